//! The `simulate`, `blind`, `metrics` and `selfcheck` commands.

use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fmt_f64, parse_key_values, read_fits, write_atomic, write_fits, RunConfig, Table};
use crate::blind::{BlindResult, BlindSolver};
use crate::error::{Error, Result};
use crate::fourier::{rotate, Interpolation};
use crate::grid::{psf_cap, Bound, ConstraintSpec, ObservationSet, PixelGrid, Star, StarField};
use crate::metrics::{box_photometry, psf_rmse};
use crate::objective::{kl_value, KlWorkspace};
use crate::projection::{project, project_oracle, ProjectionProblem};
use crate::skysim::{ideal_psf, simulate_fizeau, simulate_single, Simulation};

/// What `simulate` records next to the images; `blind` and `metrics` read it back.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub n: usize,
    pub pixel_scale: f64,
    pub n_frames: u32,
    pub ron_sigma: f64,
    pub strehl: f64,
    /// Integration time of one frame, s.
    pub exposure_time: f64,
    pub zero_flux: f64,
    /// Uniform background of each RON-compensated image.
    pub backgrounds: Vec<f64>,
    pub angles: Vec<f64>,
}

impl Manifest {
    pub fn p(&self) -> usize {
        self.angles.len()
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        format!(
            "seed = {}\nn = {}\npixel_scale = {}\nframes = {}\nron_sigma = {}\nstrehl = {}\nexposure_time = {}\nzero_flux = {}\nbackgrounds = {}\nangles = {}\n",
            self.seed,
            self.n,
            fmt_f64(self.pixel_scale),
            self.n_frames,
            fmt_f64(self.ron_sigma),
            fmt_f64(self.strehl),
            fmt_f64(self.exposure_time),
            fmt_f64(self.zero_flux),
            list(&self.backgrounds),
            list(&self.angles),
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(_, k, _)| k == key)
                .map(|(_, _, v)| v.as_str())
                .ok_or_else(|| Error::Parse(format!("manifest lacks '{key}'")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse(format!("manifest {key} = '{v}' is malformed")))
        }
        let list = |key: &str| -> Result<Vec<f64>> {
            get(key)?.split(',').map(|s| num(key, s.trim())).collect()
        };
        let m = Self {
            seed: num("seed", get("seed")?)?,
            n: num("n", get("n")?)?,
            pixel_scale: num("pixel_scale", get("pixel_scale")?)?,
            n_frames: num("frames", get("frames")?)?,
            ron_sigma: num("ron_sigma", get("ron_sigma")?)?,
            strehl: num("strehl", get("strehl")?)?,
            exposure_time: num("exposure_time", get("exposure_time")?)?,
            zero_flux: num("zero_flux", get("zero_flux")?)?,
            backgrounds: list("backgrounds")?,
            angles: list("angles")?,
        };
        if m.backgrounds.len() != m.angles.len() || m.angles.is_empty() {
            return Err(Error::Parse("manifest backgrounds and angles disagree in length".into()));
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn image_path(dir: &Path, stem: &str, j: usize) -> PathBuf {
    dir.join(format!("{stem}_{j}.fits"))
}

pub fn write_truth(path: &Path, field: &StarField) -> Result<()> {
    let mut t = Table::new(["x_mas", "y_mas", "magnitude"]);
    for s in field.stars() {
        t.push(vec![fmt_f64(s.x), fmt_f64(s.y), fmt_f64(s.magnitude)]);
    }
    t.write(path)
}

pub fn read_truth(path: &Path, n: usize, pixel_scale: f64) -> Result<StarField> {
    let t = Table::read(path)?;
    let stars = t
        .rows
        .iter()
        .map(|r| {
            let v: Vec<f64> = r
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad truth value '{s}'"))))
                .collect::<Result<_>>()?;
            Ok(Star::new(v[0], v[1], v[2]))
        })
        .collect::<Result<Vec<_>>>()?;
    StarField::new(stars, 0.0, n, pixel_scale)
}

/// Simulates the configured field and writes `noisy_j`, `data_j`, `expected_j`,
/// `psf_j` (FITS), `truth.csv` and `manifest.txt` into `out`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Simulation> {
    let spec = cfg.simulation_spec()?;
    let field = cfg.field()?;
    let sim = if cfg.is_fizeau()? {
        simulate_fizeau(&field, &spec, &cfg.angles()?)?
    } else {
        simulate_single(&field, &spec)?
    };
    std::fs::create_dir_all(out)?;
    let obs = &sim.observations;
    for j in 0..obs.p() {
        write_fits(&image_path(out, "noisy", j), &sim.noisy[j])?;
        write_fits(&image_path(out, "data", j), &obs.images()[j])?;
        write_fits(&image_path(out, "expected", j), &sim.expected[j])?;
        write_fits(&image_path(out, "psf", j), &sim.true_psfs[j])?;
    }
    write_truth(&out.join("truth.csv"), &sim.field)?;
    let manifest = Manifest {
        seed: spec.seed,
        n: spec.n,
        pixel_scale: spec.telescope.pixel_scale,
        n_frames: spec.n_frames,
        ron_sigma: spec.noise.ron_sigma,
        strehl: spec.strehl,
        exposure_time: sim.exposure_time,
        zero_flux: sim.zero_flux,
        backgrounds: obs.backgrounds().iter().map(|b| b.values()[0]).collect(),
        angles: sim.baseline_angles.clone(),
    };
    write_atomic(&out.join("manifest.txt"), manifest.to_text().as_bytes())?;
    info!(
        "simulated {} image(s), exposure {:.2} s x {} frames, into {}",
        obs.p(),
        sim.exposure_time,
        spec.n_frames,
        out.display()
    );
    Ok(sim)
}

/// Data set on disk, ready for the solver.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub manifest: Manifest,
    pub observations: ObservationSet,
    /// Diffraction-limited PSFs in the orientation of the data.
    pub ideal_psfs: Vec<PixelGrid>,
    /// `psf_j.fits` rotated into the orientation of the data, when present.
    pub true_psfs: Option<Vec<PixelGrid>>,
}

/// Rotates a detector-frame PSF into the frame of derotated data.
pub fn derotate_psf(psf: &PixelGrid, angle: f64) -> PixelGrid {
    if angle == 0.0 {
        psf.clone()
    } else {
        rotate(psf, -angle, Interpolation::Bilinear)
    }
}

/// Reads `data_j.fits` and `manifest.txt`; ideal PSFs come from the configured telescope.
pub fn load_data(cfg: &RunConfig, dir: &Path) -> Result<LoadedData> {
    let manifest = Manifest::read(dir)?;
    let tel = cfg.telescope()?;
    if tel.pixel_scale != manifest.pixel_scale {
        return Err(Error::PixelScaleMismatch(tel.pixel_scale, manifest.pixel_scale));
    }
    let p = manifest.p();
    let mut images = Vec::with_capacity(p);
    let mut backgrounds = Vec::with_capacity(p);
    let mut ideals = Vec::with_capacity(p);
    let mut caps = Vec::with_capacity(p);
    for j in 0..p {
        let g = read_fits(&image_path(dir, "data", j))?;
        backgrounds.push(PixelGrid::filled(g.n(), g.pixel_scale(), manifest.backgrounds[j])?);
        let ideal = ideal_psf(&tel, g.n(), -manifest.angles[j])?;
        caps.push(psf_cap(manifest.strehl, &ideal)?);
        ideals.push(ideal);
        images.push(g);
    }
    let observations = ObservationSet::new(
        images,
        backgrounds,
        vec![manifest.strehl; p],
        caps,
        manifest.n_frames,
        manifest.ron_sigma,
        manifest.angles.clone(),
    )?;
    let true_psfs = if image_path(dir, "psf", 0).exists() {
        Some(
            (0..p)
                .map(|j| Ok(derotate_psf(&read_fits(&image_path(dir, "psf", j))?, manifest.angles[j])))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(LoadedData {
        manifest,
        observations,
        ideal_psfs: ideals,
        true_psfs,
    })
}

fn write_result(out: &Path, result: &BlindResult, sgp_log: bool) -> Result<()> {
    write_fits(&out.join("object.fits"), &result.object)?;
    for (j, k) in result.psfs.iter().enumerate() {
        write_fits(&image_path(out, "psf", j), k)?;
    }
    let p = result.psfs.len();
    let mut header = vec!["outer".to_string(), "objective".to_string()];
    if result.psf_rmse_trace.is_some() {
        header.extend((1..=p).map(|j| format!("rmse_{j}")));
    }
    let mut trace = Table::new(header);
    for (i, v) in result.objective_trace.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), fmt_f64(*v)];
        if let Some(r) = &result.psf_rmse_trace {
            row.extend(r[i].iter().map(|x| fmt_f64(*x)));
        }
        trace.push(row);
    }
    trace.write(&out.join("trace.csv"))?;

    let mut header = vec!["outer".to_string(), "objective".to_string(), "object_iters".to_string()];
    header.extend((1..=p).map(|j| format!("psf{j}_iters")));
    header.push("wall_time_s".into());
    let mut log = Table::new(header);
    for r in &result.run_log {
        let mut row = vec![r.outer.to_string(), fmt_f64(r.objective), r.object_iters.to_string()];
        row.extend(r.psf_iters.iter().map(|x| x.to_string()));
        row.push(format!("{:.6}", r.wall_time));
        log.push(row);
    }
    log.write(&out.join("runlog.csv"))?;

    if sgp_log {
        let mut t = Table::new([
            "outer", "block", "iteration", "objective", "alpha", "lambda", "backtracks", "stationary",
        ]);
        for r in &result.inner_log {
            let s = &r.step;
            t.push(vec![
                r.outer.to_string(),
                r.block.to_string(),
                s.iteration.to_string(),
                fmt_f64(s.objective),
                fmt_f64(s.alpha),
                fmt_f64(s.lambda),
                s.backtracks.to_string(),
                s.stationary.to_string(),
            ]);
        }
        t.write(&out.join("sgp_log.csv"))?;
    }
    Ok(())
}

/// Runs the solver on the data in `input` and writes the reconstruction into `out`.
/// With frozen PSFs the true PSFs are used when `input` holds them, the ideal ones otherwise.
/// A `metrics.csv` row is added when `input` holds `truth.csv`.
pub fn cmd_blind(cfg: &RunConfig, input: &Path, out: &Path) -> Result<BlindResult> {
    let data = load_data(cfg, input)?;
    let bcfg = cfg.blind_config()?;
    std::fs::create_dir_all(out)?;
    info!(
        "{} deconvolution of {} image(s), init {}, {} outer iterations",
        if bcfg.freeze_psf { "non-blind" } else { "blind" },
        data.observations.p(),
        bcfg.init_kind,
        bcfg.outer_iters
    );
    let frozen = bcfg.freeze_psf;
    let ckpt_dir = out.join("checkpoints");
    let mut solver = BlindSolver::new(&data.observations, &data.ideal_psfs, bcfg);
    if let Some(truth) = &data.true_psfs {
        solver = solver.with_truth(truth);
        if frozen {
            solver = solver.with_initial_psfs(truth.clone());
        }
    }
    solver = solver.with_checkpoint(move |k, obj, psfs| {
        write_fits(&ckpt_dir.join(format!("object_{k:05}.fits")), obj)?;
        for (j, psf) in psfs.iter().enumerate() {
            write_fits(&ckpt_dir.join(format!("psf_{j}_{k:05}.fits")), psf)?;
        }
        Ok(())
    });
    let result = solver.run()?;
    write_result(out, &result, cfg.sgp_log()?)?;
    info!("final normalized objective {:?}", result.final_objective());
    if input.join("truth.csv").exists() {
        cmd_metrics(out, input)?;
    }
    Ok(result)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub strehl: f64,
    /// Separation of the first two stars (NaN for a single star).
    pub separation: f64,
    /// Magnitude of the second star (NaN for a single star).
    pub m2: f64,
    pub relative_errors: Vec<f64>,
    pub detected: Vec<bool>,
    pub psf_rmse: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub mare: f64,
}

impl MetricsRow {
    pub fn table(&self) -> Table {
        let mut header = vec!["sr".to_string(), "d_mas".into(), "m2".into()];
        header.extend((1..=self.relative_errors.len()).map(|i| format!("dm{i}_rel")));
        header.extend((1..=self.detected.len()).map(|i| format!("detected_{i}")));
        header.extend((1..=self.psf_rmse.len()).map(|j| format!("rmse_{j}")));
        header.extend(["j0_norm".into(), "iterations".into(), "mare".into()]);
        let mut row = vec![fmt_f64(self.strehl), fmt_f64(self.separation), fmt_f64(self.m2)];
        row.extend(self.relative_errors.iter().map(|x| fmt_f64(*x)));
        row.extend(self.detected.iter().map(|d| d.to_string()));
        row.extend(self.psf_rmse.iter().map(|x| fmt_f64(*x)));
        row.extend([fmt_f64(self.objective), self.iterations.to_string(), fmt_f64(self.mare)]);
        let mut t = Table::new(header);
        t.push(row);
        t
    }
}

/// Scores the reconstruction in `recon_dir` against `truth.csv`, `psf_j.fits` and
/// `manifest.txt` in `truth_dir`, and writes `recon_dir/metrics.csv`.
pub fn cmd_metrics(recon_dir: &Path, truth_dir: &Path) -> Result<MetricsRow> {
    let manifest = Manifest::read(truth_dir)?;
    let object = read_fits(&recon_dir.join("object.fits"))?;
    let field = read_truth(&truth_dir.join("truth.csv"), object.n(), object.pixel_scale())?;
    let report = box_photometry(&object, &field, manifest.zero_flux)?;
    let mut rmse = Vec::new();
    for j in 0..manifest.p() {
        let recon = read_fits(&image_path(recon_dir, "psf", j))?;
        let truth = derotate_psf(&read_fits(&image_path(truth_dir, "psf", j))?, manifest.angles[j]);
        rmse.push(psf_rmse(&recon, &truth)?);
    }
    let trace = Table::read(&recon_dir.join("trace.csv"))?;
    let col = trace.column("objective").ok_or_else(|| Error::Parse("trace.csv lacks 'objective'".into()))?;
    let objective = trace
        .rows
        .last()
        .map(|r| r[col].parse::<f64>())
        .transpose()
        .map_err(|_| Error::Parse("bad objective in trace.csv".into()))?
        .unwrap_or(f64::NAN);
    let stars = field.stars();
    let (separation, m2) = match stars {
        [a, b, ..] => (((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt(), b.magnitude),
        _ => (f64::NAN, f64::NAN),
    };
    let row = MetricsRow {
        strehl: manifest.strehl,
        separation,
        m2,
        relative_errors: report.relative_errors.clone(),
        detected: report.detected.clone(),
        psf_rmse: rmse,
        objective,
        iterations: trace.rows.len(),
        mare: report.mare(),
    };
    row.table().write(&recon_dir.join("metrics.csv"))?;
    Ok(row)
}

/// Outcome of one self-check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub worst: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random box-plus-sum projections against the bisection oracle.
pub fn projection_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(2..=32);
        let point: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let scaling: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..20.0)).collect();
        let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.5)).collect();
        let upper: Vec<f64> = lower.iter().map(|l| l + rng.random_range(0.1..3.0)).collect();
        let lo: f64 = lower.iter().sum();
        let hi: f64 = upper.iter().sum();
        let target = lo + rng.random_range(0.05..0.95) * (hi - lo);
        let cons = ConstraintSpec::new(Bound::Grid(lower), Bound::Grid(upper), target, n)?;
        let prob = ProjectionProblem::new(&point, &scaling, &cons)?;
        let y = project(&prob, 1e-12)?;
        let oracle = project_oracle(&prob);
        let err = y.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let (box_v, sum_v) = cons.violation(&y);
        worst = worst.max(err);
        if err > 1e-8 || box_v > 1e-10 || sum_v > 1e-10 {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "projection",
        cases,
        failures,
        worst,
    })
}

fn random_positive(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> PixelGrid {
    PixelGrid::new(n, 1.0, (0..n * n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid grid")
}

fn normalized(g: PixelGrid) -> PixelGrid {
    let s = g.sum();
    g.scaled(1.0 / s).expect("finite scale")
}

/// Object and PSF gradients against central differences on random 16 × 16 problems.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let p = if case % 2 == 0 { 1 } else { 3 };
        let obj = random_positive(&mut rng, n, 0.5, 50.0);
        let psfs: Vec<PixelGrid> = (0..p).map(|_| normalized(random_positive(&mut rng, n, 0.01, 1.0))).collect();
        let images: Vec<PixelGrid> = (0..p).map(|_| random_positive(&mut rng, n, 1.0, 80.0)).collect();
        let bgs: Vec<PixelGrid> = (0..p).map(|_| random_positive(&mut rng, n, 0.5, 5.0)).collect();
        let obs = ObservationSet::new(images, bgs, vec![1.0; p], vec![1.0; p], 1, 0.0, vec![0.0; p])?;

        let mut ws = KlWorkspace::new(&obs);
        ws.set_psfs(&psfs)?;
        let (_, grad) = ws.object_value_grad(obj.values())?;
        for _ in 0..8 {
            let i = rng.random_range(0..n * n);
            let h = 1e-4 * obj.values()[i];
            let bump = |d: f64| -> Result<f64> {
                let mut v = obj.values().to_vec();
                v[i] += d;
                kl_value(&obj.with_values(v)?, &psfs, &obs)
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
            if rel > 1e-5 {
                failures += 1;
            }
        }

        let j = rng.random_range(0..p);
        ws.set_object(obj.values())?;
        let (_, grad) = ws.psf_value_grad(j, psfs[j].values())?;
        for _ in 0..8 {
            let i = rng.random_range(0..n * n);
            let h = 1e-4 * psfs[j].values()[i];
            let bump = |d: f64| -> Result<f64> {
                let mut ks = psfs.clone();
                let mut v = ks[j].values().to_vec();
                v[i] += d;
                ks[j] = ks[j].with_values(v)?;
                kl_value(&obj, &ks, &obs)
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
            if rel > 1e-5 {
                failures += 1;
            }
        }
    }
    Ok(SuiteReport {
        name: "gradient",
        cases,
        failures,
        worst,
    })
}

pub fn cmd_selfcheck(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![projection_suite(500, seed)?, gradient_suite(20, seed)?])
}

//! End-to-end acceptance checks. Each test prints one `criterion NN PASS|FAIL` line.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use blind_deconv::blind::{BlindConfig, BlindSolver, InitKind};
use blind_deconv::fourier::{rotate_filled, Interpolation};
use blind_deconv::io::commands::{cmd_blind, cmd_metrics, cmd_simulate};
use blind_deconv::io::fits::encode;
use blind_deconv::io::{read_fits, write_fits, RunConfig};
use blind_deconv::metrics::{box_photometry, psf_rmse};
use blind_deconv::objective::{kl_divergence, KlWorkspace};
use blind_deconv::projection::{project, ProjectionProblem};
use blind_deconv::skysim::{simulate_fizeau, simulate_single, Simulation, SimulationSpec};
use blind_deconv::{flux_constant, Bound, ConstraintSpec, ObservationSet, PixelGrid, Star, StarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

fn verdict(id: u32, name: &str, pass: bool, elapsed: Duration, detail: String) {
    println!(
        "criterion {id:02} {} {name} ({:.1} s): {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn binary(spec: &SimulationSpec, d: f64, m1: f64, m2: f64) -> StarField {
    StarField::new(
        vec![Star::new(-d / 2.0, 0.0, m1), Star::new(d / 2.0, 0.0, m2)],
        0.0,
        spec.n,
        spec.telescope.pixel_scale,
    )
    .unwrap()
}

// Bisection on the multiplier of the sum constraint, written from scratch.
fn bisection_projection(x: &[f64], d: &[f64], lo: &[f64], hi: &[f64], c: f64) -> Vec<f64> {
    let y = |lam: f64| -> Vec<f64> {
        (0..x.len()).map(|i| (x[i] - lam * d[i]).clamp(lo[i], hi[i])).collect()
    };
    let mut a = (0..x.len()).map(|i| (x[i] - hi[i]) / d[i]).fold(f64::INFINITY, f64::min) - 1.0;
    let mut b = (0..x.len()).map(|i| (x[i] - lo[i]) / d[i]).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    for _ in 0..300 {
        let mid = 0.5 * (a + b);
        if y(mid).iter().sum::<f64>() > c {
            a = mid;
        } else {
            b = mid;
        }
    }
    y(0.5 * (a + b))
}

#[test]
fn criterion_01_projection_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut worst_violation: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=32);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..1.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.01..4.0)).collect();
        let (slo, shi): (f64, f64) = (lo.iter().sum(), hi.iter().sum());
        let c = slo + rng.random_range(0.0..1.0) * (shi - slo);
        let cons = ConstraintSpec::new(Bound::Grid(lo.clone()), Bound::Grid(hi.clone()), c, n).unwrap();
        let prob = ProjectionProblem::new(&x, &d, &cons).unwrap();
        let y = project(&prob, 1e-12).unwrap();
        let oracle = bisection_projection(&x, &d, &lo, &hi, c);
        for i in 0..n {
            worst = worst.max((y[i] - oracle[i]).abs());
            worst_violation = worst_violation.max(lo[i] - y[i]).max(y[i] - hi[i]);
        }
        worst_violation = worst_violation.max((y.iter().sum::<f64>() - c).abs());
    }
    let el = t0.elapsed();
    verdict(
        1,
        "projection oracle equivalence",
        worst <= 1e-8 && worst_violation <= 1e-10 && el < Duration::from_secs(5),
        el,
        format!("500 problems, max coordinate gap {worst:.2e}, max violation {worst_violation:.2e}"),
    );
}

// J0 with the convolution done as a direct circular sum over a centered PSF.
fn direct_j0(obj: &[f64], psfs: &[Vec<f64>], images: &[Vec<f64>], bgs: &[Vec<f64>], n: usize) -> f64 {
    let h = n / 2;
    let mut total = 0.0;
    for j in 0..psfs.len() {
        for iy in 0..n {
            for ix in 0..n {
                let mut m = bgs[j][iy * n + ix];
                for ky in 0..n {
                    for kx in 0..n {
                        let px = (ix + n + h - kx) % n;
                        let py = (iy + n + h - ky) % n;
                        m += obj[ky * n + kx] * psfs[j][py * n + px];
                    }
                }
                let g = images[j][iy * n + ix];
                total += g * (g / m).ln() + m - g;
            }
        }
    }
    total
}

#[test]
fn criterion_02_gradient_correctness() {
    let t0 = Instant::now();
    let n = 16;
    let len = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut worst_value: f64 = 0.0;
    for case in 0..20 {
        let p = if case % 2 == 0 { 1 } else { 3 };
        let obj: Vec<f64> = (0..len).map(|_| rng.random_range(1.0..100.0)).collect();
        let psfs: Vec<Vec<f64>> = (0..p)
            .map(|_| {
                let v: Vec<f64> = (0..len).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let images: Vec<Vec<f64>> = (0..p).map(|_| (0..len).map(|_| rng.random_range(20.0..200.0)).collect()).collect();
        let bgs: Vec<Vec<f64>> = (0..p).map(|_| (0..len).map(|_| rng.random_range(1.0..10.0)).collect()).collect();
        let grid = |v: &Vec<f64>| PixelGrid::new(n, 1.0, v.clone()).unwrap();
        let obs = ObservationSet::new(
            images.iter().map(grid).collect(),
            bgs.iter().map(grid).collect(),
            vec![1.0; p],
            vec![1.0; p],
            1,
            0.0,
            vec![0.0; p],
        )
        .unwrap();
        let psf_grids: Vec<PixelGrid> = psfs.iter().map(grid).collect();

        let mut ws = KlWorkspace::new(&obs);
        ws.set_psfs(&psf_grids).unwrap();
        let (value, g_obj) = ws.object_value_grad(&obj).unwrap();
        let reference = direct_j0(&obj, &psfs, &images, &bgs, n);
        worst_value = worst_value.max((value - reference).abs() / reference);

        let scale = g_obj.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for _ in 0..6 {
            let i = rng.random_range(0..len);
            let hstep = 1e-3 * obj[i];
            let mut plus = obj.clone();
            plus[i] += hstep;
            let mut minus = obj.clone();
            minus[i] -= hstep;
            let fd = (direct_j0(&plus, &psfs, &images, &bgs, n) - direct_j0(&minus, &psfs, &images, &bgs, n))
                / (2.0 * hstep);
            worst = worst.max((fd - g_obj[i]).abs() / g_obj[i].abs().max(1e-3 * scale));
        }

        ws.set_object(&obj).unwrap();
        for j in 0..p {
            let (_, g_psf) = ws.psf_value_grad(j, &psfs[j]).unwrap();
            let scale = g_psf.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for _ in 0..3 {
                let i = rng.random_range(0..len);
                let hstep = 1e-3 * psfs[j][i];
                let mut plus = psfs.clone();
                plus[j][i] += hstep;
                let mut minus = psfs.clone();
                minus[j][i] -= hstep;
                let fd = (direct_j0(&obj, &plus, &images, &bgs, n) - direct_j0(&obj, &minus, &images, &bgs, n))
                    / (2.0 * hstep);
                worst = worst.max((fd - g_psf[i]).abs() / g_psf[i].abs().max(1e-3 * scale));
            }
        }
    }
    let el = t0.elapsed();
    verdict(
        2,
        "gradient correctness",
        worst <= 1e-5 && worst_value <= 1e-10 && el < Duration::from_secs(30),
        el,
        format!("20 instances, worst relative gradient gap {worst:.2e}, value gap {worst_value:.2e}"),
    );
}

struct MonotoneRuns {
    instances: usize,
    increases: usize,
    worst_flux: f64,
    worst_psf_sum: f64,
    negative: bool,
    worst_cap_ratio: f64,
    psf_iterates: usize,
    elapsed: Duration,
}

fn monotone_runs() -> &'static MonotoneRuns {
    static RUNS: OnceLock<MonotoneRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = MonotoneRuns {
            instances: 0,
            increases: 0,
            worst_flux: 0.0,
            worst_psf_sum: 0.0,
            negative: false,
            worst_cap_ratio: 0.0,
            psf_iterates: 0,
            elapsed: Duration::ZERO,
        };
        for case in 0..20 {
            let fizeau = case % 4 == 3;
            let sr = rng.random_range(0.6..0.9);
            let seed = rng.random();
            let spec = if fizeau {
                SimulationSpec::fizeau(64, sr, seed)
            } else {
                SimulationSpec::single(64, sr, seed)
            };
            let reach = 0.3 * 64.0 * spec.telescope.pixel_scale;
            let stars = (0..rng.random_range(1..=3))
                .map(|_| {
                    Star::new(
                        rng.random_range(-reach..reach),
                        rng.random_range(-reach..reach),
                        rng.random_range(14.0..17.0),
                    )
                })
                .collect();
            let field = StarField::new(stars, 0.0, 64, spec.telescope.pixel_scale).unwrap();
            let sim = if fizeau {
                simulate_fizeau(&field, &spec, &[0.0, 60.0, 120.0]).unwrap()
            } else {
                simulate_single(&field, &spec).unwrap()
            };
            let obs = &sim.observations;
            let c = flux_constant(obs).unwrap();
            let caps = obs.psf_caps().to_vec();
            let cfg = BlindConfig {
                outer_iters: 15,
                inner_obj: 10,
                checkpoint_every: Some(1),
                init_kind: if case % 2 == 0 { InitKind::Pedestal } else { InitKind::Autocorrelation },
                ..BlindConfig::default()
            };
            let mut local = (0.0f64, 0.0f64, false, 0.0f64, 0usize);
            let result = BlindSolver::new(obs, &sim.ideal_psfs, cfg)
                .with_checkpoint(|_, obj, psfs| {
                    local.0 = local.0.max((obj.sum() - c).abs() / c);
                    local.2 |= obj.min() < 0.0;
                    for (k, &s) in psfs.iter().zip(&caps) {
                        local.1 = local.1.max((k.sum() - 1.0).abs());
                        local.2 |= k.min() < 0.0;
                        local.3 = local.3.max(k.max() / s);
                        local.4 += 1;
                    }
                    Ok(())
                })
                .run()
                .unwrap();
            out.instances += 1;
            out.increases += result.objective_trace.windows(2).filter(|w| w[1] > w[0]).count();
            out.worst_flux = out.worst_flux.max(local.0);
            out.worst_psf_sum = out.worst_psf_sum.max(local.1);
            out.negative |= local.2;
            out.worst_cap_ratio = out.worst_cap_ratio.max(local.3);
            out.psf_iterates += local.4;
        }
        out.elapsed = t0.elapsed();
        out
    })
}

#[test]
fn criterion_03_monotonicity_and_feasibility() {
    let r = monotone_runs();
    let pass = r.instances == 20
        && r.increases == 0
        && r.worst_flux <= 1e-8
        && r.worst_psf_sum <= 1e-10
        && !r.negative
        && r.worst_cap_ratio <= 1.0
        && r.elapsed < Duration::from_secs(120);
    verdict(
        3,
        "monotonicity and feasibility",
        pass,
        r.elapsed,
        format!(
            "{} instances, {} trace increases, flux gap {:.1e} (relative), PSF sum gap {:.1e}, negatives {}",
            r.instances, r.increases, r.worst_flux, r.worst_psf_sum, r.negative
        ),
    );
}

#[test]
fn criterion_04_trivial_minimizer_excluded() {
    let r = monotone_runs();
    verdict(
        4,
        "trivial minimizer excluded",
        r.psf_iterates > 0 && r.worst_cap_ratio <= 1.0,
        r.elapsed,
        format!(
            "{} PSF iterates checked, largest max(K)/s = {:.12}",
            r.psf_iterates, r.worst_cap_ratio
        ),
    );
}

#[test]
fn criterion_05_noise_statistic() {
    let t0 = Instant::now();
    let spec = SimulationSpec::single(128, 0.81, 5);
    let sim = simulate_single(&binary(&spec, 240.0, 15.0, 15.0), &spec).unwrap();
    let offset = spec.n_frames as f64 * spec.noise.ron_sigma.powi(2);
    let model = sim.expected[0].map(|v| v + offset).unwrap();
    let j0 = kl_divergence(&sim.observations.images()[0], &model).unwrap();
    let stat = 2.0 * j0 / (128.0 * 128.0);
    let el = t0.elapsed();
    verdict(
        5,
        "noise statistic near one",
        (0.9..=1.1).contains(&stat) && el < Duration::from_secs(10),
        el,
        format!("2 J0 / N^2 = {stat:.4} with n = {}, sigma = {}", spec.n_frames, spec.noise.ron_sigma),
    );
}

#[test]
fn criterion_06_inverse_crime() {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for (k, factor) in [1.0, 2.0, 4.0].into_iter().enumerate() {
        for dm in [0.0, 1.0, 2.0] {
            let spec = SimulationSpec::single(128, 0.8, 600 + k as u64 * 10 + dm as u64);
            let d = factor * spec.telescope.resolution_limit();
            let sim = simulate_single(&binary(&spec, d, 15.0, 15.0 + dm), &spec).unwrap();
            let cfg = BlindConfig {
                outer_iters: 10,
                inner_obj: 50,
                freeze_psf: true,
                ..BlindConfig::default()
            };
            let r = BlindSolver::new(&sim.observations, &sim.ideal_psfs, cfg)
                .with_initial_psfs(sim.true_psfs.clone())
                .run()
                .unwrap();
            let rep = box_photometry(&r.object, &sim.field, sim.zero_flux).unwrap();
            let worst = rep.relative_errors.iter().fold(0.0f64, |a, &e| a.max(e));
            let ok = rep.all_detected() && worst < 0.01;
            pass &= ok;
            lines.push(format!("{factor}x/dm{dm}: {worst:.1e}{}", if ok { "" } else { " (miss)" }));
        }
    }
    let el = t0.elapsed();
    verdict(
        6,
        "inverse-crime deconvolution",
        pass && el < Duration::from_secs(600),
        el,
        lines.join(", "),
    );
}

#[test]
fn criterion_07_blind_single() {
    let t0 = Instant::now();
    let spec = SimulationSpec::single(128, 0.8, 7);
    let d = 4.0 * spec.telescope.resolution_limit();
    let sim = simulate_single(&binary(&spec, d, 15.0, 15.0), &spec).unwrap();
    let cfg = BlindConfig {
        outer_iters: 500,
        init_kind: InitKind::Pedestal,
        ..BlindConfig::default()
    };
    let r = BlindSolver::new(&sim.observations, &sim.ideal_psfs, cfg).run().unwrap();
    let rep = box_photometry(&r.object, &sim.field, sim.zero_flux).unwrap();
    let worst = rep.relative_errors.iter().fold(0.0f64, |a, &e| a.max(e));
    let rmse = psf_rmse(&r.psfs[0], &sim.reference_psfs[0]).unwrap();
    let el = t0.elapsed();
    verdict(
        7,
        "blind single-image binary",
        rep.all_detected() && worst <= 0.005 && rmse <= 0.05 && el < Duration::from_secs(1200),
        el,
        format!(
            "d = {d:.1} mas, detected {:?}, magnitude errors {:.2e}/{:.2e}, PSF RMSE {rmse:.4}, 2J0/N^2 {:.4}",
            rep.detected,
            rep.relative_errors[0],
            rep.relative_errors[1],
            r.final_objective().unwrap()
        ),
    );
}

#[test]
fn criterion_08_blind_fizeau() {
    let t0 = Instant::now();
    let spec = SimulationSpec::fizeau(128, 0.77, 8);
    let d = 4.0 * spec.telescope.resolution_limit();
    let sim = simulate_fizeau(&binary(&spec, d, 15.0, 15.0), &spec, &[0.0, 60.0, 120.0]).unwrap();
    let cfg = BlindConfig {
        outer_iters: 300,
        init_kind: InitKind::Pedestal,
        ..BlindConfig::default()
    };
    let r = BlindSolver::new(&sim.observations, &sim.ideal_psfs, cfg).run().unwrap();
    let rep = box_photometry(&r.object, &sim.field, sim.zero_flux).unwrap();
    let worst = rep.relative_errors.iter().fold(0.0f64, |a, &e| a.max(e));
    let rmse: Vec<f64> = r
        .psfs
        .iter()
        .zip(&sim.reference_psfs)
        .map(|(k, t)| psf_rmse(k, t).unwrap())
        .collect();
    let mean = rmse.iter().sum::<f64>() / 3.0;
    let el = t0.elapsed();
    verdict(
        8,
        "blind Fizeau binary",
        rep.all_detected() && worst <= 0.01 && mean <= 0.08 && el < Duration::from_secs(2700),
        el,
        format!(
            "d = {d:.1} mas, detected {:?}, magnitude errors {:.2e}/{:.2e}, PSF RMSE {:.4?} (mean {mean:.4})",
            rep.detected, rep.relative_errors[0], rep.relative_errors[1], rmse
        ),
    );
}

#[test]
fn criterion_09_initialization_dependence() {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut diverged = false;
    for seed in [9u64, 19, 29] {
        let spec = SimulationSpec::single(64, 0.8, seed);
        let d = spec.telescope.resolution_limit();
        let sim = simulate_single(&binary(&spec, d, 15.0, 16.0), &spec).unwrap();
        let mut finals = Vec::new();
        for init in [InitKind::Autocorrelation, InitKind::Pedestal] {
            let cfg = BlindConfig {
                outer_iters: 100,
                init_kind: init,
                ..BlindConfig::default()
            };
            let r = BlindSolver::new(&sim.observations, &sim.ideal_psfs, cfg).run().unwrap();
            let rep = box_photometry(&r.object, &sim.field, sim.zero_flux).unwrap();
            let j = r.final_objective().unwrap();
            lines.push(format!("seed {seed} {init}: J {j:.6}, secondary detected {}", rep.detected[1]));
            finals.push(j);
        }
        if (finals[0] - finals[1]).abs() > 1e-6 * finals[1] {
            diverged = true;
            break;
        }
    }
    let el = t0.elapsed();
    verdict(9, "initialization dependence", diverged, el, lines.join("; "));
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn criterion_10_derotation_statistics() {
    let t0 = Instant::now();
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let poisson = Poisson::new(1000.0).unwrap();
    let g = PixelGrid::new(n, 1.0, (0..n * n).map(|_| poisson.sample(&mut rng)).collect()).unwrap();
    let (m0, v0) = mean_var(g.values());
    let inside = |method| -> Vec<f64> {
        rotate_filled(&g, 60.0, method, f64::NAN)
            .values()
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect()
    };
    let (mb, vb) = mean_var(&inside(Interpolation::Bilinear));
    let (_, vn) = mean_var(&inside(Interpolation::Nearest));
    let el = t0.elapsed();
    let pass = ((mb - m0) / m0).abs() <= 0.005
        && vb < v0
        && ((vn - v0) / v0).abs() <= 0.05
        && el < Duration::from_secs(10);
    verdict(
        10,
        "derotation statistics",
        pass,
        el,
        format!("mean {m0:.2} -> {mb:.2}, variance {v0:.1} -> bilinear {vb:.1}, nearest {vn:.1}"),
    );
}

#[test]
fn criterion_11_fits_round_trip() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for i in 0..100 {
        let n = 1usize << rng.random_range(0..7);
        let values: Vec<f64> = (0..n * n)
            .map(|_| loop {
                let v = f64::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let g = PixelGrid::new(n, rng.random_range(0.1..100.0), values).unwrap();
        let path = dir.path().join(format!("g{i}.fits"));
        write_fits(&path, &g).unwrap();
        let back = read_fits(&path).unwrap();
        let same = back.n() == n
            && back.pixel_scale().to_bits() == g.pixel_scale().to_bits()
            && back.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += usize::from(!same);
    }
    let big = dir.path().join("n256.fits");
    write_fits(&big, &PixelGrid::zeros(256, 5.0).unwrap()).unwrap();
    let size = std::fs::metadata(&big).unwrap().len();
    let el = t0.elapsed();
    verdict(
        11,
        "FITS round trip",
        mismatches == 0 && size == 529_920 && encode(&PixelGrid::zeros(256, 5.0).unwrap()).len() == 529_920
            && el < Duration::from_secs(5),
        el,
        format!("100 random grids, {mismatches} mismatches, N=256 file {size} bytes"),
    );
}

fn pipeline(root: &std::path::Path) -> Vec<u8> {
    let data = root.join("data");
    let out = root.join("out");
    let cfg = RunConfig::parse(&format!(
        "field.n = 64\nsim.seed = 12\nblind.outer_iters = 25\ninput.dir = {}\noutput.dir = {}\n",
        data.display(),
        out.display()
    ))
    .unwrap();
    let _: Simulation = cmd_simulate(&cfg, &data).unwrap();
    cmd_blind(&cfg, &data, &out).unwrap();
    cmd_metrics(&out, &data).unwrap();
    std::fs::read(out.join("metrics.csv")).unwrap()
}

#[test]
fn criterion_12_determinism() {
    let t0 = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let el = t0.elapsed();
    verdict(
        12,
        "pipeline determinism",
        first == second && !first.is_empty(),
        el,
        format!("metrics.csv {} bytes, identical: {}", first.len(), first == second),
    );
}

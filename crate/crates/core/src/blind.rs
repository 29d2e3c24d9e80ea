//! Inexact alternating minimization over the object and the `p` PSFs.
//!
//! Every outer iteration runs a few SGP steps on the object with the PSFs
//! fixed, then a few on each PSF in turn with the object fixed. Each block
//! keeps its own solver state, so steplength memory carries over from one
//! outer iteration to the next.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fourier::FftPlan;
use crate::grid::{flux_constant, ConstraintSpec, ObservationSet, PixelGrid};
use crate::metrics::psf_rmse;
use crate::objective::{normalize, KlWorkspace};
use crate::projection::{project, ProjectionProblem, DEFAULT_TOL};
use crate::sgp::{SgpParams, SgpState, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Autocorrelation,
    Pedestal,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autocorrelation" => Ok(Self::Autocorrelation),
            "pedestal" => Ok(Self::Pedestal),
            other => Err(Error::Parse(format!("unknown PSF initialization '{other}'"))),
        }
    }
}

impl std::fmt::Display for InitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Self::Autocorrelation => "autocorrelation",
            Self::Pedestal => "pedestal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlindConfig {
    pub outer_iters: usize,
    pub inner_obj: usize,
    pub inner_psf: usize,
    pub init_kind: InitKind,
    /// Keep the PSFs at their initial values (non-blind deconvolution).
    pub freeze_psf: bool,
    /// Recorded with the results; the algorithm itself is deterministic.
    pub seed: u64,
    pub sgp: SgpParams,
    /// `(L1, L2)` for the object block; `None` uses `(1e-6 c/N², 10 c)`.
    pub object_scaling: Option<(f64, f64)>,
    /// `(L1, L2)` for every PSF block; `None` uses `(1e-12, s_j)`.
    pub psf_scaling: Option<(f64, f64)>,
    /// Stop once the relative objective change of an outer iteration drops below this.
    pub rel_tol: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

impl Default for BlindConfig {
    fn default() -> Self {
        Self {
            outer_iters: 100,
            inner_obj: 50,
            inner_psf: 1,
            init_kind: InitKind::Pedestal,
            freeze_psf: false,
            seed: 0,
            sgp: SgpParams::default(),
            object_scaling: None,
            psf_scaling: None,
            rel_tol: None,
            checkpoint_every: None,
        }
    }
}

impl BlindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_obj == 0 || self.inner_psf == 0 {
            return Err(Error::InvalidParameter(
                "outer and inner iteration counts must be at least 1".into(),
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidParameter("checkpoint interval must be at least 1".into()));
        }
        if let Some(t) = self.rel_tol {
            if !(t >= 0.0) {
                return Err(Error::InvalidParameter(format!("relative tolerance {t} must be >= 0")));
            }
        }
        self.sgp.validate()
    }
}

/// One row of the outer-iteration run log.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub outer: usize,
    pub objective: f64,
    pub object_iters: usize,
    pub psf_iters: Vec<usize>,
    pub wall_time: f64,
}

/// Inner SGP step tagged with its outer iteration and block (0 = object, `j+1` = PSF `j`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerRecord {
    pub outer: usize,
    pub block: usize,
    pub step: StepRecord,
}

#[derive(Debug, Clone)]
pub struct BlindResult {
    pub object: PixelGrid,
    pub psfs: Vec<PixelGrid>,
    /// `2 J_0 / (p N²)` after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// Per outer iteration, the relative error of each PSF (when truth was supplied).
    pub psf_rmse_trace: Option<Vec<Vec<f64>>>,
    pub run_log: Vec<OuterRecord>,
    pub inner_log: Vec<InnerRecord>,
}

impl BlindResult {
    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }
}

/// Constant object at the mean flux level.
pub fn init_object(obs: &ObservationSet) -> Result<PixelGrid> {
    let c = flux_constant(obs)?;
    let n = obs.n();
    PixelGrid::filled(n, obs.pixel_scale(), c / (n * n) as f64)
}

/// Circular autocorrelation of the ideal PSF, centered and unit-sum, made
/// feasible for the cap.
pub fn init_psf_autocorrelation(ideal: &PixelGrid, cap: f64) -> Result<PixelGrid> {
    let n = ideal.n();
    let plan = FftPlan::cached(n);
    let mut spec = plan.spectrum(ideal.values());
    for v in spec.iter_mut() {
        *v = rustfft::num_complex::Complex64::new(v.norm_sqr(), 0.0);
    }
    let ac = plan.real_inverse(spec)?;
    let ac = ideal.with_values(ac.into_iter().map(|v| v.max(0.0)).collect())?.to_centered();
    let total = ac.sum();
    if !(total > 0.0) {
        return Err(Error::NoSignal(total));
    }
    make_psf_feasible(&ac.scaled(1.0 / total)?, cap)
}

/// Ideal PSF blended with a flat pedestal `ω = (1 - SR) / (SR N²)`.
pub fn init_psf_pedestal(ideal: &PixelGrid, strehl: f64) -> Result<PixelGrid> {
    if !(strehl > 0.0 && strehl <= 1.0) {
        return Err(Error::InvalidParameter(format!("Strehl ratio {strehl} outside (0, 1]")));
    }
    let n2 = ideal.len() as f64;
    let omega = pedestal_level(strehl, ideal.n());
    ideal.map(|k| (k + omega) / (1.0 + omega * n2))
}

pub fn pedestal_level(strehl: f64, n: usize) -> f64 {
    (1.0 - strehl) / (strehl * (n * n) as f64)
}

/// Euclidean projection onto `{0 <= K <= cap, ΣK = 1}` unless already inside.
pub fn make_psf_feasible(psf: &PixelGrid, cap: f64) -> Result<PixelGrid> {
    let cons = ConstraintSpec::psf(cap, psf.len())?;
    let (box_viol, sum_err) = cons.violation(psf.values());
    if box_viol == 0.0 && sum_err <= DEFAULT_TOL {
        return Ok(psf.clone());
    }
    let ones = vec![1.0; psf.len()];
    let prob = ProjectionProblem::new(psf.values(), &ones, &cons)?;
    psf.with_values(project(&prob, DEFAULT_TOL)?)
}

type Checkpoint<'a> = Box<dyn FnMut(usize, &PixelGrid, &[PixelGrid]) -> Result<()> + 'a>;

/// Configurable driver; [`run_blind`] covers the common case.
pub struct BlindSolver<'a> {
    obs: &'a ObservationSet,
    ideal_psfs: &'a [PixelGrid],
    cfg: BlindConfig,
    truth: Option<&'a [PixelGrid]>,
    initial_psfs: Option<Vec<PixelGrid>>,
    checkpoint: Option<Checkpoint<'a>>,
}

impl<'a> BlindSolver<'a> {
    pub fn new(obs: &'a ObservationSet, ideal_psfs: &'a [PixelGrid], cfg: BlindConfig) -> Self {
        Self {
            obs,
            ideal_psfs,
            cfg,
            truth: None,
            initial_psfs: None,
            checkpoint: None,
        }
    }

    /// True PSFs for the RMSE trace.
    pub fn with_truth(mut self, truth: &'a [PixelGrid]) -> Self {
        self.truth = Some(truth);
        self
    }

    /// Starts from these PSFs instead of the configured initialization.
    pub fn with_initial_psfs(mut self, psfs: Vec<PixelGrid>) -> Self {
        self.initial_psfs = Some(psfs);
        self
    }

    /// Called with the outer iteration, object and PSFs every `checkpoint_every` iterations.
    pub fn with_checkpoint(mut self, f: impl FnMut(usize, &PixelGrid, &[PixelGrid]) -> Result<()> + 'a) -> Self {
        self.checkpoint = Some(Box::new(f));
        self
    }

    fn initial_psfs(&mut self) -> Result<Vec<PixelGrid>> {
        let obs = self.obs;
        if let Some(psfs) = self.initial_psfs.take() {
            if psfs.len() != obs.p() {
                return Err(Error::InvalidParameter(format!(
                    "expected {} initial PSFs, got {}",
                    obs.p(),
                    psfs.len()
                )));
            }
            for k in &psfs {
                obs.images()[0].same_geometry(k)?;
            }
            if self.cfg.freeze_psf {
                return Ok(psfs);
            }
            return psfs
                .iter()
                .zip(obs.psf_caps())
                .map(|(k, &cap)| make_psf_feasible(k, cap))
                .collect();
        }
        (0..obs.p())
            .map(|j| {
                let ideal = &self.ideal_psfs[j];
                let cap = obs.psf_caps()[j];
                match self.cfg.init_kind {
                    InitKind::Autocorrelation => init_psf_autocorrelation(ideal, cap),
                    InitKind::Pedestal => {
                        make_psf_feasible(&init_psf_pedestal(ideal, obs.strehl_bounds()[j])?, cap)
                    }
                }
            })
            .collect()
    }

    pub fn run(mut self) -> Result<BlindResult> {
        self.cfg.validate()?;
        let obs = self.obs;
        let p = obs.p();
        let n = obs.n();
        if self.ideal_psfs.len() != p {
            return Err(Error::InvalidParameter(format!(
                "expected {p} ideal PSFs, got {}",
                self.ideal_psfs.len()
            )));
        }
        for k in self.ideal_psfs {
            obs.images()[0].same_geometry(k)?;
        }
        if let Some(truth) = self.truth {
            if truth.len() != p {
                return Err(Error::InvalidParameter(format!("expected {p} true PSFs, got {}", truth.len())));
            }
        }

        let c = flux_constant(obs)?;
        let len = n * n;
        let obj_cons = ConstraintSpec::nonnegative_with_sum(c, len)?;
        let psf_cons: Vec<ConstraintSpec> = obs
            .psf_caps()
            .iter()
            .map(|&s| ConstraintSpec::psf(s, len))
            .collect::<Result<_>>()?;
        let obj_bounds = self
            .cfg
            .object_scaling
            .unwrap_or((1e-6 * c / len as f64, 10.0 * c));

        let object0 = init_object(obs)?;
        let mut psfs = self.initial_psfs()?;
        let template = object0.clone();

        let mut ws = KlWorkspace::new(obs);
        ws.set_psfs(&psfs)?;
        let mut obj_state = SgpState::new(
            object0.into_values(),
            &mut |x: &[f64]| ws.object_value_grad(x),
            &obj_cons,
            obj_bounds,
            self.cfg.sgp.clone(),
        )?;
        let mut psf_states: Vec<Option<SgpState>> = vec![None; p];

        let mut previous = obj_state.value();
        let mut trace = Vec::with_capacity(self.cfg.outer_iters);
        let mut rmse_trace = self.truth.map(|_| Vec::with_capacity(self.cfg.outer_iters));
        let mut run_log = Vec::with_capacity(self.cfg.outer_iters);
        let mut inner_log = Vec::new();
        let start = Instant::now();

        for outer in 1..=self.cfg.outer_iters {
            if outer > 1 {
                ws.set_psfs(&psfs)?;
                obj_state.restart(&mut |x: &[f64]| ws.object_value_grad(x))?;
            }
            let steps = obj_state.run(&mut |x: &[f64]| ws.object_value_grad(x), &obj_cons, self.cfg.inner_obj)?;
            let object_iters = steps.len();
            inner_log.extend(steps.into_iter().map(|step| InnerRecord { outer, block: 0, step }));

            let mut psf_iters = vec![0; p];
            let total = if self.cfg.freeze_psf {
                obj_state.value()
            } else {
                ws.set_object(obj_state.iterate())?;
                let mut total = 0.0;
                for j in 0..p {
                    let bounds = self.cfg.psf_scaling.unwrap_or((1e-12, obs.psf_caps()[j]));
                    let mut eval = |x: &[f64]| ws.psf_value_grad(j, x);
                    let state = match &mut psf_states[j] {
                        Some(st) => {
                            st.restart(&mut eval)?;
                            st
                        }
                        slot @ None => slot.insert(SgpState::new(
                            psfs[j].values().to_vec(),
                            &mut eval,
                            &psf_cons[j],
                            bounds,
                            self.cfg.sgp.clone(),
                        )?),
                    };
                    let steps = state.run(&mut eval, &psf_cons[j], self.cfg.inner_psf)?;
                    psf_iters[j] = steps.len();
                    inner_log.extend(steps.into_iter().map(|step| InnerRecord {
                        outer,
                        block: j + 1,
                        step,
                    }));
                    total += state.value();
                    psfs[j] = psfs[j].with_values(state.iterate().to_vec())?;
                }
                total
            };

            if total > previous + 1e-9 * previous.abs() {
                return Err(Error::InvariantBreach(format!(
                    "objective increased from {previous:e} to {total:e} at outer iteration {outer}"
                )));
            }
            check_outer_feasibility(obj_state.iterate(), c, &psfs, obs.psf_caps(), self.cfg.freeze_psf)?;

            let norm = normalize(total, obs);
            trace.push(norm);
            if let (Some(rt), Some(truth)) = (rmse_trace.as_mut(), self.truth) {
                let row = psfs
                    .iter()
                    .zip(truth)
                    .map(|(k, t)| psf_rmse(k, t))
                    .collect::<Result<Vec<_>>>()?;
                rt.push(row);
            }
            run_log.push(OuterRecord {
                outer,
                objective: norm,
                object_iters,
                psf_iters,
                wall_time: start.elapsed().as_secs_f64(),
            });
            log::debug!("outer {outer}: normalized objective {norm:.9e}");

            if let (Some(every), Some(cb)) = (self.cfg.checkpoint_every, self.checkpoint.as_mut()) {
                if outer % every == 0 {
                    let obj = template.with_values(obj_state.iterate().to_vec())?;
                    cb(outer, &obj, &psfs)?;
                }
            }

            let change = (previous - total).abs() / total.abs().max(f64::MIN_POSITIVE);
            previous = total;
            if let Some(tol) = self.cfg.rel_tol {
                if change < tol {
                    log::info!("relative change {change:e} below {tol:e} after {outer} outer iterations");
                    break;
                }
            }
        }

        Ok(BlindResult {
            object: template.with_values(obj_state.into_iterate())?,
            psfs,
            objective_trace: trace,
            psf_rmse_trace: rmse_trace,
            run_log,
            inner_log,
        })
    }
}

fn check_outer_feasibility(obj: &[f64], c: f64, psfs: &[PixelGrid], caps: &[f64], frozen: bool) -> Result<()> {
    let sum: f64 = obj.iter().sum();
    if (sum - c).abs() > 1e-8 * c || obj.iter().any(|&v| v < 0.0) {
        return Err(Error::InvariantBreach(format!("object infeasible: sum {sum} vs {c}")));
    }
    if frozen {
        return Ok(());
    }
    for (j, (k, &cap)) in psfs.iter().zip(caps).enumerate() {
        let s = k.sum();
        if (s - 1.0).abs() > 1e-10 || k.min() < 0.0 || k.max() > cap {
            return Err(Error::InvariantBreach(format!(
                "PSF {j} infeasible: sum {s}, range [{}, {}], cap {cap}",
                k.min(),
                k.max()
            )));
        }
    }
    Ok(())
}

/// Blind deconvolution with PSFs initialized from the ideal ones.
pub fn run_blind(obs: &ObservationSet, ideal_psfs: &[PixelGrid], cfg: BlindConfig) -> Result<BlindResult> {
    BlindSolver::new(obs, ideal_psfs, cfg).run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::convolve;
    use crate::grid::psf_cap;

    fn gaussian_psf(n: usize, sigma: f64) -> PixelGrid {
        let h = (n / 2) as f64;
        let v: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 - h, (i / n) as f64 - h);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = v.iter().sum();
        PixelGrid::new(n, 1.0, v.into_iter().map(|x| x / s).collect()).unwrap()
    }

    fn obs_with(images: Vec<PixelGrid>, bg: f64, strehl: f64, ideal: &PixelGrid) -> ObservationSet {
        let n = images[0].n();
        let p = images.len();
        let cap = psf_cap(strehl, ideal).unwrap();
        ObservationSet::new(
            images,
            vec![PixelGrid::filled(n, 1.0, bg).unwrap(); p],
            vec![strehl; p],
            vec![cap; p],
            1,
            0.0,
            vec![0.0; p],
        )
        .unwrap()
    }

    #[test]
    fn object_init_is_flat_mean_flux() {
        let n = 4;
        let img = PixelGrid::filled(n, 1.0, 1.5).unwrap();
        let ideal = gaussian_psf(n, 0.8);
        let obs = obs_with(vec![img], 0.5, 0.9, &ideal);
        let f = init_object(&obs).unwrap();
        assert!(f.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn pedestal_identity_and_level() {
        let ideal = gaussian_psf(16, 1.5);
        assert_eq!(init_psf_pedestal(&ideal, 1.0).unwrap(), ideal);
        assert!((pedestal_level(0.81, 256) - 3.579222e-6).abs() < 1e-12);
    }

    #[test]
    fn pedestal_peak_ratio_near_strehl() {
        let ideal = gaussian_psf(128, 1.2);
        let k0 = init_psf_pedestal(&ideal, 0.62).unwrap();
        assert!((k0.sum() - 1.0).abs() < 1e-12);
        assert!((k0.max() / ideal.max() - 0.62).abs() <= 0.01);
        let feasible = make_psf_feasible(&k0, psf_cap(0.62, &ideal).unwrap()).unwrap();
        assert!(feasible.max() <= 0.62 * ideal.max());
        assert!((feasible.sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn autocorrelation_of_delta_is_delta() {
        let mut v = vec![0.0; 64];
        v[4 * 8 + 4] = 1.0;
        let delta = PixelGrid::new(8, 1.0, v).unwrap();
        let ac = init_psf_autocorrelation(&delta, 1.0).unwrap();
        for (a, b) in ac.values().iter().zip(delta.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn autocorrelation_matches_direct_sum() {
        let n = 8;
        let raw: Vec<f64> = (0..n * n).map(|i| ((i * 37 % 11) as f64 + 0.5) * if i % 3 == 0 { 2.0 } else { 1.0 }).collect();
        let s: f64 = raw.iter().sum();
        let k = PixelGrid::new(n, 1.0, raw.iter().map(|v| v / s).collect()).unwrap();
        let ac = init_psf_autocorrelation(&k, 1.0).unwrap();
        let h = (n / 2) as isize;
        for ty in 0..n as isize {
            for tx in 0..n as isize {
                let (lx, ly) = (tx - h, ty - h);
                let mut acc = 0.0;
                for y in 0..n as isize {
                    for x in 0..n as isize {
                        let xs = (x + lx).rem_euclid(n as isize) as usize;
                        let ys = (y + ly).rem_euclid(n as isize) as usize;
                        acc += k.get(x as usize, y as usize) * k.get(xs, ys);
                    }
                }
                assert!((ac.get(tx as usize, ty as usize) - acc).abs() < 1e-10);
            }
        }
        assert!((ac.sum() - 1.0).abs() < 1e-10 && ac.min() >= 0.0);
    }

    #[test]
    fn autocorrelation_respects_cap() {
        let ideal = gaussian_psf(32, 0.6);
        let cap = psf_cap(0.3, &ideal).unwrap();
        let ac = init_psf_autocorrelation(&ideal, cap).unwrap();
        assert!(ac.max() <= cap && (ac.sum() - 1.0).abs() < 1e-10);
    }

    fn binary_scene(n: usize, psf: &PixelGrid) -> (PixelGrid, PixelGrid) {
        let mut f = vec![0.0; n * n];
        f[(n / 2) * n + n / 2 - 3] = 5e4;
        f[(n / 2 + 2) * n + n / 2 + 4] = 2e4;
        let obj = PixelGrid::new(n, 1.0, f).unwrap();
        let img = convolve(&psf.to_wraparound(), &obj).unwrap().map(|v| v.max(0.0) + 10.0).unwrap();
        (obj, img)
    }

    #[test]
    fn frozen_true_psf_recovers_binary_fluxes() {
        let n = 32;
        let psf = gaussian_psf(n, 1.3);
        let (obj, img) = binary_scene(n, &psf);
        let obs = obs_with(vec![img], 10.0, 1.0, &psf);
        let cfg = BlindConfig {
            outer_iters: 1,
            inner_obj: 500,
            freeze_psf: true,
            ..BlindConfig::default()
        };
        let res = BlindSolver::new(&obs, std::slice::from_ref(&psf), cfg)
            .with_initial_psfs(vec![psf.clone()])
            .run()
            .unwrap();
        assert_eq!(res.psfs[0], psf);
        for (idx, truth) in obj.values().iter().enumerate().filter(|(_, v)| **v > 0.0) {
            let (x, y) = (idx % n, idx / n);
            let mut flux = 0.0;
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    flux += res.object.get(xx, yy);
                }
            }
            assert!((flux - truth).abs() / truth < 0.01, "{flux} vs {truth}");
        }
    }

    #[test]
    fn blind_trace_is_monotone_and_feasible() {
        let n = 32;
        let truth = gaussian_psf(n, 1.6);
        let ideal = gaussian_psf(n, 1.0);
        let (_, img) = binary_scene(n, &truth);
        let obs = obs_with(vec![img], 10.0, 0.5, &ideal);
        for kind in [InitKind::Pedestal, InitKind::Autocorrelation] {
            let cfg = BlindConfig {
                outer_iters: 15,
                inner_obj: 10,
                init_kind: kind,
                checkpoint_every: Some(5),
                ..BlindConfig::default()
            };
            let mut seen = Vec::new();
            let res = BlindSolver::new(&obs, std::slice::from_ref(&ideal), cfg)
                .with_truth(std::slice::from_ref(&truth))
                .with_checkpoint(|k, _, _| {
                    seen.push(k);
                    Ok(())
                })
                .run()
                .unwrap();
            assert_eq!(seen, vec![5, 10, 15]);
            assert_eq!(res.objective_trace.len(), 15);
            for w in res.objective_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9));
            }
            assert_eq!(res.psf_rmse_trace.as_ref().unwrap().len(), 15);
            let cap = obs.psf_caps()[0];
            assert!(res.psfs[0].max() <= cap && (res.psfs[0].sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let n = 16;
        let truth = gaussian_psf(n, 1.4);
        let (_, img) = binary_scene(n, &truth);
        let obs = obs_with(vec![img.clone(), img], 10.0, 0.6, &truth);
        let ideal = vec![truth.clone(), truth];
        let cfg = BlindConfig {
            outer_iters: 5,
            inner_obj: 5,
            ..BlindConfig::default()
        };
        let a = run_blind(&obs, &ideal, cfg.clone()).unwrap();
        let b = run_blind(&obs, &ideal, cfg).unwrap();
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.object, b.object);
    }

    #[test]
    fn zero_iteration_counts_are_rejected() {
        let cfg = BlindConfig {
            inner_psf: 0,
            ..BlindConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

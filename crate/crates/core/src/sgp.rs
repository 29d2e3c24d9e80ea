//! Scaled gradient projection for `min J(h)` over one block's feasible set.
//!
//! Each step scales the gradient by `D = clamp(h, L1, L2)`, picks the
//! multiplier `α` by alternating the two generalized Barzilai-Borwein rules,
//! projects `h - α D ∇J` onto the feasible set in the `D^{-1}` norm and runs a
//! monotone Armijo backtracking along the resulting direction.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::{ConstraintSpec, PixelGrid};
use crate::projection::{project_into, ProjectionProblem};

/// Objective value and gradient at a point.
pub trait Evaluator {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Evaluator for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgpParams {
    pub alpha_init: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub tau_init: f64,
    pub bb2_memory: usize,
    /// Backtracking reduction factor.
    pub beta: f64,
    /// Armijo sufficient-decrease constant.
    pub gamma: f64,
    pub max_backtracks: usize,
    /// Directional derivatives above `-stationary_tol` end the run.
    pub stationary_tol: f64,
    pub projection_tol: f64,
}

impl Default for SgpParams {
    fn default() -> Self {
        Self {
            alpha_init: 1.3,
            alpha_min: 1e-5,
            alpha_max: 1e5,
            tau_init: 0.5,
            bb2_memory: 3,
            beta: 0.4,
            gamma: 1e-4,
            max_backtracks: 50,
            stationary_tol: 1e-14,
            projection_tol: crate::projection::DEFAULT_TOL,
        }
    }
}

impl SgpParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_min > 0.0
            && self.alpha_min <= self.alpha_init
            && self.alpha_init <= self.alpha_max
            && self.tau_init > 0.0
            && self.bb2_memory >= 1
            && self.beta > 0.0
            && self.beta < 1.0
            && self.gamma > 0.0
            && self.gamma < 1.0
            && self.projection_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("inconsistent SGP parameters {self:?}")))
        }
    }
}

/// Diagonal of the scaling matrix: the iterate clamped into `[l1, l2]`.
pub fn scaling_matrix(iterate: &[f64], l1: f64, l2: f64) -> Vec<f64> {
    assert!(l1 > 0.0 && l1 <= l2, "scaling bounds must satisfy 0 < L1 <= L2");
    iterate.iter().map(|&h| h.max(l1).min(l2)).collect()
}

/// The two generalized Barzilai-Borwein steplengths for step `s`, gradient
/// change `z` and scaling `d`. `None` marks a rule whose curvature estimate is
/// nonpositive or not finite; the caller then falls back to `α_max`.
pub fn bb_steplengths(s: &[f64], z: &[f64], d: &[f64]) -> (Option<f64>, Option<f64>) {
    let mut ss = 0.0;
    let mut sz_inv = 0.0;
    let mut sz_d = 0.0;
    let mut zz = 0.0;
    for ((&si, &zi), &di) in s.iter().zip(z).zip(d) {
        let si_d = si / di;
        ss += si_d * si_d;
        sz_inv += si_d * zi;
        sz_d += di * si * zi;
        zz += di * di * zi * zi;
    }
    let bb1 = (sz_inv > 0.0 && sz_inv.is_finite()).then(|| ss / sz_inv);
    let bb2 = (zz > 0.0 && zz.is_finite() && sz_d > 0.0).then(|| sz_d / zz);
    (
        bb1.filter(|v| v.is_finite()),
        bb2.filter(|v| v.is_finite()),
    )
}

/// One line of the per-iteration run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    /// Objective after the step.
    pub objective: f64,
    pub alpha: f64,
    /// Accepted line-search step (0 when stationary).
    pub lambda: f64,
    pub backtracks: usize,
    pub stationary: bool,
}

#[derive(Debug, Clone)]
pub struct SgpState {
    iterate: Vec<f64>,
    gradient: Vec<f64>,
    value: f64,
    prev_step: Option<Vec<f64>>,
    prev_grad_diff: Option<Vec<f64>>,
    alpha: f64,
    tau: f64,
    bb2_memory: VecDeque<f64>,
    scaling_bounds: (f64, f64),
    params: SgpParams,
    iterations: usize,
    stationary: bool,
}

impl SgpState {
    /// Starts from a feasible `initial` point; evaluates the objective there.
    pub fn new(
        initial: Vec<f64>,
        evaluator: &mut impl Evaluator,
        constraint: &ConstraintSpec,
        scaling_bounds: (f64, f64),
        params: SgpParams,
    ) -> Result<Self> {
        params.validate()?;
        let (l1, l2) = scaling_bounds;
        if !(l1 > 0.0 && l1 <= l2) {
            return Err(Error::InvalidParameter(format!(
                "scaling bounds ({l1}, {l2}) must satisfy 0 < L1 <= L2"
            )));
        }
        if initial.len() != constraint.len() {
            return Err(Error::LengthMismatch {
                expected: constraint.len(),
                got: initial.len(),
            });
        }
        check_feasible(&initial, constraint, params.projection_tol)?;
        let (value, gradient) = evaluator.evaluate(&initial)?;
        Ok(Self {
            iterate: initial,
            gradient,
            value,
            prev_step: None,
            prev_grad_diff: None,
            alpha: params.alpha_init,
            tau: params.tau_init,
            bb2_memory: VecDeque::with_capacity(params.bb2_memory + 1),
            scaling_bounds,
            params,
            iterations: 0,
            stationary: false,
        })
    }

    /// Re-evaluates value and gradient after the objective changed (another
    /// block moved). Steplength memory, `s` and `z` are kept.
    pub fn restart(&mut self, evaluator: &mut impl Evaluator) -> Result<()> {
        let (value, gradient) = evaluator.evaluate(&self.iterate)?;
        self.value = value;
        self.gradient = gradient;
        self.stationary = false;
        Ok(())
    }

    pub fn iterate(&self) -> &[f64] {
        &self.iterate
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn bb2_memory(&self) -> &VecDeque<f64> {
        &self.bb2_memory
    }

    pub fn scaling_bounds(&self) -> (f64, f64) {
        self.scaling_bounds
    }

    pub fn set_scaling_bounds(&mut self, l1: f64, l2: f64) {
        self.scaling_bounds = (l1, l2);
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn into_iterate(self) -> Vec<f64> {
        self.iterate
    }

    /// Alternation between the two rules given their (sentinel-aware) values.
    pub fn select_alpha(&mut self, bb1: Option<f64>, bb2: Option<f64>) -> f64 {
        let p = &self.params;
        let clamp = |a: f64| a.max(p.alpha_min).min(p.alpha_max);
        let bb2_eff = bb2.map_or(p.alpha_max, clamp);
        self.bb2_memory.push_back(bb2_eff);
        while self.bb2_memory.len() > p.bb2_memory {
            self.bb2_memory.pop_front();
        }
        let alpha = match (bb1, bb2) {
            (Some(a1), Some(_)) => {
                let a1 = clamp(a1);
                if bb2_eff / a1 <= self.tau {
                    self.tau *= 0.9;
                    self.bb2_memory
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min)
                } else {
                    self.tau *= 1.1;
                    a1
                }
            }
            _ => p.alpha_max,
        };
        self.alpha = clamp(alpha);
        self.alpha
    }

    /// Steplength for the coming step from the last `(s, z)` pair, if any.
    pub fn alpha_select(&mut self) -> f64 {
        if let (Some(s), Some(z)) = (self.prev_step.take(), self.prev_grad_diff.take()) {
            let (l1, l2) = self.scaling_bounds;
            let d = scaling_matrix(&self.iterate, l1, l2);
            let (bb1, bb2) = bb_steplengths(&s, &z, &d);
            self.select_alpha(bb1, bb2)
        } else {
            self.alpha
        }
    }

    /// One scaled gradient projection step with monotone backtracking.
    pub fn step(&mut self, evaluator: &mut impl Evaluator, constraint: &ConstraintSpec) -> Result<StepRecord> {
        let n = self.iterate.len();
        let alpha = self.alpha_select();
        let (l1, l2) = self.scaling_bounds;
        let d = scaling_matrix(&self.iterate, l1, l2);

        let point: Vec<f64> = (0..n)
            .map(|i| self.iterate[i] - alpha * d[i] * self.gradient[i])
            .collect();
        let mut projected = vec![0.0; n];
        let prob = ProjectionProblem::new(&point, &d, constraint)?;
        project_into(&prob, self.params.projection_tol, &mut projected)?;

        let dir: Vec<f64> = projected.iter().zip(&self.iterate).map(|(y, x)| y - x).collect();
        let slope: f64 = dir.iter().zip(&self.gradient).map(|(a, b)| a * b).sum();
        self.iterations += 1;
        if !(slope < -self.params.stationary_tol) {
            self.stationary = true;
            return Ok(StepRecord {
                iteration: self.iterations,
                objective: self.value,
                alpha,
                lambda: 0.0,
                backtracks: 0,
                stationary: true,
            });
        }

        let mut lambda = 1.0;
        let mut candidate = projected;
        for backtracks in 0..=self.params.max_backtracks {
            if backtracks > 0 {
                for i in 0..n {
                    let v = self.iterate[i] + lambda * dir[i];
                    candidate[i] = v
                        .max(constraint.lower().at(i))
                        .min(constraint.upper().at(i));
                }
            }
            let (value, gradient) = evaluator.evaluate(&candidate)?;
            if value <= self.value + self.params.gamma * lambda * slope {
                check_feasible(&candidate, constraint, 1e-8)?;
                let s: Vec<f64> = candidate.iter().zip(&self.iterate).map(|(a, b)| a - b).collect();
                let z: Vec<f64> = gradient.iter().zip(&self.gradient).map(|(a, b)| a - b).collect();
                if s.iter().any(|v| *v != 0.0) {
                    self.prev_step = Some(s);
                    self.prev_grad_diff = Some(z);
                }
                self.iterate = candidate;
                self.gradient = gradient;
                self.value = value;
                return Ok(StepRecord {
                    iteration: self.iterations,
                    objective: value,
                    alpha,
                    lambda,
                    backtracks,
                    stationary: false,
                });
            }
            lambda *= self.params.beta;
        }
        Err(Error::LineSearchExhausted(self.params.max_backtracks))
    }

    /// Up to `n_iters` steps, stopping early at a stationary point.
    pub fn run(
        &mut self,
        evaluator: &mut impl Evaluator,
        constraint: &ConstraintSpec,
        n_iters: usize,
    ) -> Result<Vec<StepRecord>> {
        let mut log = Vec::with_capacity(n_iters);
        for _ in 0..n_iters {
            let rec = self.step(evaluator, constraint)?;
            log.push(rec);
            if rec.stationary {
                break;
            }
        }
        Ok(log)
    }
}

fn check_feasible(x: &[f64], constraint: &ConstraintSpec, rel_tol: f64) -> Result<()> {
    let (box_viol, sum_err) = constraint.violation(x);
    let target = constraint.sum_target();
    if box_viol > 0.0 || sum_err > rel_tol * target.abs().max(1.0) {
        return Err(Error::InvariantBreach(format!(
            "iterate infeasible (box {box_viol:e}, sum {sum_err:e})"
        )));
    }
    Ok(())
}

/// Applies `n_iters` SGP steps (fewer if a stationary point is hit) from a
/// feasible grid and returns the final iterate with the per-step log.
pub fn run_sgp(
    initial: &PixelGrid,
    evaluator: &mut impl Evaluator,
    constraint: &ConstraintSpec,
    n_iters: usize,
    scaling_bounds: (f64, f64),
    params: SgpParams,
) -> Result<(PixelGrid, Vec<StepRecord>)> {
    let mut state = SgpState::new(
        initial.values().to_vec(),
        evaluator,
        constraint,
        scaling_bounds,
        params,
    )?;
    let log = state.run(evaluator, constraint, n_iters)?;
    Ok((initial.with_values(state.into_iterate())?, log))
}

//! Projection onto `{ l <= y <= u, sum(y) = c }` in the norm induced by `D^{-1}`.
//!
//! The minimizer is `y(λ) = clamp(h - λ D, l, u)` where `λ` is the root of the
//! continuous, nonincreasing, piecewise linear residual
//! `r(λ) = sum(y(λ)) - c`. [`project`] finds it with a safeguarded secant
//! iteration in linear time per evaluation; [`project_oracle`] uses plain
//! bisection and is kept as an independent reference.

use crate::error::{Error, Result};
use crate::grid::ConstraintSpec;

pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_SECANT_ITERS: usize = 200;
const MAX_EXPANSIONS: usize = 200;

#[derive(Debug, Clone, Copy)]
pub struct ProjectionProblem<'a> {
    point: &'a [f64],
    scaling: &'a [f64],
    constraint: &'a ConstraintSpec,
}

impl<'a> ProjectionProblem<'a> {
    pub fn new(point: &'a [f64], scaling: &'a [f64], constraint: &'a ConstraintSpec) -> Result<Self> {
        let len = constraint.len();
        for (what, v) in [("point", point), ("scaling", scaling)] {
            if v.len() != len {
                return Err(Error::InvalidParameter(format!(
                    "{what} has length {}, constraint has {len}",
                    v.len()
                )));
            }
        }
        if let Some(i) = point.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if let Some(i) = scaling.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "scaling entry {i} = {} is not strictly positive",
                scaling[i]
            )));
        }
        Ok(Self {
            point,
            scaling,
            constraint,
        })
    }

    pub fn point(&self) -> &[f64] {
        self.point
    }

    pub fn scaling(&self) -> &[f64] {
        self.scaling
    }

    pub fn constraint(&self) -> &ConstraintSpec {
        self.constraint
    }

    #[inline]
    fn y_at(&self, i: usize, lambda: f64) -> f64 {
        let c = self.constraint;
        (self.point[i] - lambda * self.scaling[i])
            .max(c.lower().at(i))
            .min(c.upper().at(i))
    }

    fn fill(&self, lambda: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.y_at(i, lambda);
        }
    }

    /// `r(λ)`, together with the slope `-sum(D_i)` over the unclamped coordinates.
    fn residual(&self, lambda: f64) -> (f64, f64) {
        let c = self.constraint;
        let mut sum = 0.0;
        let mut free = 0.0;
        for i in 0..self.point.len() {
            let t = self.point[i] - lambda * self.scaling[i];
            let (l, u) = (c.lower().at(i), c.upper().at(i));
            if t <= l {
                sum += l;
            } else if t >= u {
                sum += u;
            } else {
                sum += t;
                free += self.scaling[i];
            }
        }
        (sum - c.sum_target(), free)
    }

    /// Distance in the `D^{-1}` norm.
    pub fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(self.scaling)
            .map(|((x, y), d)| (x - y) * (x - y) / d)
            .sum::<f64>()
            .sqrt()
    }
}

/// `argmin_{y in Ω} (h - y)^T D^{-1} (h - y)`, with `|sum(y) - c| <= tol * max(1, |c|)`.
pub fn project(prob: &ProjectionProblem<'_>, tol: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; prob.point.len()];
    project_into(prob, tol, &mut out)?;
    Ok(out)
}

/// [`project`] writing into a caller-provided buffer.
pub fn project_into(prob: &ProjectionProblem<'_>, tol: f64, out: &mut [f64]) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let c = prob.constraint.sum_target();
    let thr = tol * c.abs().max(1.0);

    let (r0, _) = prob.residual(0.0);
    let lambda = if r0.abs() <= thr {
        0.0
    } else {
        let ((a, ra), (b, rb)) = bracket(prob, r0)?;
        secant(prob, a, ra, b, rb, thr)
    };
    prob.fill(lambda, out);
    if prob.constraint.violation(out).1 > thr {
        polish(prob, out);
    }

    let (box_viol, sum_err) = prob.constraint.violation(out);
    if box_viol > 0.0 || sum_err > thr {
        return Err(Error::InvariantBreach(format!(
            "projection output infeasible (box {box_viol:e}, sum {sum_err:e})"
        )));
    }
    Ok(())
}

/// Newton step taken directly on `y`: spreads the sum residual over the free
/// coordinates in proportion to the scaling. Used when `λ` has run out of
/// precision (large multipliers on tiny scalings).
fn polish(prob: &ProjectionProblem<'_>, out: &mut [f64]) {
    let cons = prob.constraint;
    for _ in 0..3 {
        let r: f64 = out.iter().sum::<f64>() - cons.sum_target();
        let free: f64 = (0..out.len())
            .filter(|&i| out[i] > cons.lower().at(i) && out[i] < cons.upper().at(i))
            .map(|i| prob.scaling[i])
            .sum();
        if free <= 0.0 || r == 0.0 {
            return;
        }
        for (i, y) in out.iter_mut().enumerate() {
            let (lo, hi) = (cons.lower().at(i), cons.upper().at(i));
            if *y > lo && *y < hi {
                *y = (*y - r * prob.scaling[i] / free).clamp(lo, hi);
            }
        }
    }
}

type Point = (f64, f64);

/// Returns `((a, r(a)), (b, r(b)))` with `r(a) > 0 > r(b)`. One end is always λ = 0.
fn bracket(prob: &ProjectionProblem<'_>, r0: f64) -> Result<(Point, Point)> {
    let cons = prob.constraint;
    let n = prob.point.len();
    let mut extreme = if r0 > 0.0 {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    };
    // exact bracket from the bound extremes when the relevant bounds are finite
    for i in 0..n {
        let d = prob.scaling[i];
        if r0 > 0.0 {
            extreme = extreme.max((prob.point[i] - cons.lower().at(i)) / d);
        } else {
            extreme = extreme.min((prob.point[i] - cons.upper().at(i)) / d);
        }
    }
    let good = |r: f64| if r0 > 0.0 { r <= 0.0 } else { r >= 0.0 };
    let mut far = extreme;
    let mut r_far = if far.is_finite() {
        prob.residual(far).0
    } else {
        f64::NAN
    };
    if !far.is_finite() || !good(r_far) {
        // infinite bounds on the relevant side: expand geometrically from 0
        let total_d: f64 = prob.scaling.iter().sum();
        let mut step = (r0.abs() / total_d).max(f64::MIN_POSITIVE);
        let sign = if r0 > 0.0 { 1.0 } else { -1.0 };
        let mut found = false;
        for _ in 0..MAX_EXPANSIONS {
            far = sign * step;
            r_far = prob.residual(far).0;
            if good(r_far) {
                found = true;
                break;
            }
            step *= 2.0;
        }
        if !found {
            return Err(Error::NoBracket);
        }
    }
    if r0 > 0.0 {
        Ok(((0.0, r0), (far, r_far)))
    } else {
        Ok(((far, r_far), (0.0, r0)))
    }
}

/// Secant on `r` over `[a, b]` with an Illinois weight and bisection fallback,
/// finished by one Newton step on the current linear piece.
fn secant(prob: &ProjectionProblem<'_>, mut a: f64, mut ra: f64, mut b: f64, mut rb: f64, thr: f64) -> f64 {
    if rb.abs() <= thr {
        return b;
    }
    if ra.abs() <= thr {
        return a;
    }
    let mut side = 0i8;
    let mut best = if ra.abs() < rb.abs() { (a, ra) } else { (b, rb) };
    for _ in 0..MAX_SECANT_ITERS {
        let width = b - a;
        let mut lambda = b - rb * width / (rb - ra);
        if !(lambda > a && lambda < b) {
            lambda = 0.5 * (a + b);
        }
        let (r, free) = prob.residual(lambda);
        if r.abs() < best.1.abs() {
            best = (lambda, r);
        }
        if r.abs() <= thr {
            // the root of the linear piece through lambda is usually exact
            if free > 0.0 {
                let newton = lambda + r / free;
                let (rn, _) = prob.residual(newton);
                if rn.abs() < r.abs() {
                    return newton;
                }
            }
            return lambda;
        }
        if r > 0.0 {
            a = lambda;
            ra = r;
            if side == 1 {
                rb *= 0.5;
            }
            side = 1;
        } else {
            b = lambda;
            rb = r;
            if side == -1 {
                ra *= 0.5;
            }
            side = -1;
        }
        if b - a <= 4.0 * f64::EPSILON * a.abs().max(b.abs()) {
            break;
        }
        // force a bisection when the interval refuses to shrink
        if b - a > 0.5 * width && side != 0 {
            let mid = 0.5 * (a + b);
            let (rm, _) = prob.residual(mid);
            if rm.abs() < best.1.abs() {
                best = (mid, rm);
            }
            if rm.abs() <= thr {
                return mid;
            }
            if rm > 0.0 {
                a = mid;
                ra = rm;
            } else {
                b = mid;
                rb = rm;
            }
            side = 0;
        }
    }
    best.0
}

/// Reference projection by 200 bisection steps from a guaranteed bracket.
/// Intended for small problems (dimension ≤ 32) in tests; lower bounds must be finite.
pub fn project_oracle(prob: &ProjectionProblem<'_>) -> Vec<f64> {
    let cons = prob.constraint;
    let n = prob.point.len();
    let c = cons.sum_target();
    let sum_lower: f64 = (0..n).map(|i| cons.lower().at(i)).sum();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let l = cons.lower().at(i);
        // no feasible point has a coordinate above this
        let cap = cons.upper().at(i).min(c - (sum_lower - l));
        lo = lo.min((prob.point[i] - cap) / prob.scaling[i]);
        hi = hi.max((prob.point[i] - l) / prob.scaling[i]);
    }
    let r = |lam: f64| -> f64 { (0..n).map(|i| prob.y_at(i, lam)).sum::<f64>() - c };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if r(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    (0..n).map(|i| prob.y_at(i, lambda)).collect()
}

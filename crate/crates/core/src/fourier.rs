//! Circular convolution, its adjoint, Fourier sub-pixel shifts and image rotation.
//!
//! Spectra produced by [`FftPlan::forward`] are stored transposed: the
//! coefficient for horizontal frequency `kx` and vertical frequency `ky` sits
//! at `kx * n + ky`. Everything that touches spectra in this crate is either
//! pointwise or goes through [`shift_factors`], so the layout stays internal.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::PixelGrid;

/// Largest tolerated `max|Im| / max|Re|` after an inverse transform.
pub const IMAG_TOLERANCE: f64 = 1e-8;

pub struct FftPlan {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: RefCell<Vec<Complex64>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan").field("n", &self.n).finish()
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<FftPlan>>> = RefCell::new(HashMap::new());
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Self {
            n,
            fwd,
            inv,
            scratch: RefCell::new(vec![Complex64::new(0.0, 0.0); len]),
        }
    }

    /// Shared per-thread plan for size `n`.
    pub fn cached(n: usize) -> Rc<FftPlan> {
        PLANS.with(|p| {
            p.borrow_mut()
                .entry(n)
                .or_insert_with(|| Rc::new(FftPlan::new(n)))
                .clone()
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// In-place forward 2-D transform of a row-major `n × n` buffer.
    pub fn forward(&self, buf: &mut [Complex64]) {
        let mut scratch = self.scratch.borrow_mut();
        self.fwd.process_with_scratch(buf, &mut scratch);
        transpose(buf, self.n);
        self.fwd.process_with_scratch(buf, &mut scratch);
    }

    /// In-place normalized inverse of [`FftPlan::forward`].
    pub fn inverse(&self, buf: &mut [Complex64]) {
        let mut scratch = self.scratch.borrow_mut();
        self.inv.process_with_scratch(buf, &mut scratch);
        transpose(buf, self.n);
        self.inv.process_with_scratch(buf, &mut scratch);
        let norm = 1.0 / (self.n * self.n) as f64;
        for v in buf.iter_mut() {
            *v *= norm;
        }
    }

    pub fn spectrum(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform of `spec` followed by the imaginary-residue check.
    pub fn real_inverse(&self, mut spec: Vec<Complex64>) -> Result<Vec<f64>> {
        self.inverse(&mut spec);
        take_real(spec)
    }
}

fn transpose(buf: &mut [Complex64], n: usize) {
    const B: usize = 16;
    for bi in (0..n).step_by(B) {
        for bj in (bi..n).step_by(B) {
            for i in bi..(bi + B).min(n) {
                let start = if bi == bj { i + 1 } else { bj };
                for j in start..(bj + B).min(n) {
                    buf.swap(i * n + j, j * n + i);
                }
            }
        }
    }
}

pub(crate) fn take_real(buf: Vec<Complex64>) -> Result<Vec<f64>> {
    let mut max_re: f64 = 0.0;
    let mut max_im: f64 = 0.0;
    for v in &buf {
        max_re = max_re.max(v.re.abs());
        max_im = max_im.max(v.im.abs());
    }
    if max_im > IMAG_TOLERANCE * max_re.max(f64::MIN_POSITIVE) {
        return Err(Error::ImaginaryResidue {
            residue: max_im,
            max: max_re,
        });
    }
    Ok(buf.into_iter().map(|v| v.re).collect())
}

/// Signed frequency of FFT bin `k` on an `n`-point axis.
#[inline]
pub(crate) fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// One-axis factors of a shift by `d` pixels. The Nyquist bin gets the real
/// factor `cos(pi d)` so that shifted real grids stay real; this is exact for
/// integer shifts.
pub(crate) fn axis_shift_factors(n: usize, d: f64) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            if n % 2 == 0 && k == n / 2 {
                Complex64::new((PI * d).cos(), 0.0)
            } else {
                let phase = -2.0 * PI * signed_freq(k, n) * d / n as f64;
                Complex64::from_polar(1.0, phase)
            }
        })
        .collect()
}

/// Full 2-D phase ramp for a shift by `(dx, dy)`, in spectrum layout.
pub fn shift_factors(n: usize, dx: f64, dy: f64) -> Vec<Complex64> {
    let fx = axis_shift_factors(n, dx);
    let fy = axis_shift_factors(n, dy);
    let mut out = Vec::with_capacity(n * n);
    for ax in &fx {
        for ay in &fy {
            out.push(ax * ay);
        }
    }
    out
}

/// Circular convolution `psf * obj`, with `psf` in wrap-around layout.
pub fn convolve(psf: &PixelGrid, obj: &PixelGrid) -> Result<PixelGrid> {
    check_sizes(psf, obj)?;
    let plan = FftPlan::cached(psf.n());
    let k = plan.spectrum(psf.values());
    let mut f = plan.spectrum(obj.values());
    for (a, b) in f.iter_mut().zip(&k) {
        *a *= b;
    }
    obj.with_values(plan.real_inverse(f)?)
}

/// Adjoint of `convolve(psf, ·)`: circular cross-correlation with `psf`.
pub fn correlate(psf: &PixelGrid, img: &PixelGrid) -> Result<PixelGrid> {
    check_sizes(psf, img)?;
    let plan = FftPlan::cached(psf.n());
    let k = plan.spectrum(psf.values());
    let mut f = plan.spectrum(img.values());
    for (a, b) in f.iter_mut().zip(&k) {
        *a *= b.conj();
    }
    img.with_values(plan.real_inverse(f)?)
}

fn check_sizes(a: &PixelGrid, b: &PixelGrid) -> Result<()> {
    if a.n() != b.n() {
        return Err(Error::SizeMismatch(a.n(), b.n()));
    }
    Ok(())
}

/// Circular shift by a real number of pixels via a Fourier phase ramp.
/// Positive `dx` moves content towards larger column indices.
pub fn subpixel_shift(grid: &PixelGrid, dx: f64, dy: f64) -> Result<PixelGrid> {
    if !(dx.is_finite() && dy.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite shift ({dx}, {dy})"
        )));
    }
    let n = grid.n();
    let plan = FftPlan::cached(n);
    let mut spec = plan.spectrum(grid.values());
    for (s, f) in spec.iter_mut().zip(shift_factors(n, dx, dy)) {
        *s *= f;
    }
    grid.with_values(plan.real_inverse(spec)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    /// Copies the nearest source pixel, so the value distribution is kept.
    Nearest,
}

/// Rotates the grid content counterclockwise by `angle_deg` about pixel
/// `(n/2, n/2)`; samples falling outside the grid are set to 0.
pub fn rotate(grid: &PixelGrid, angle_deg: f64, method: Interpolation) -> PixelGrid {
    rotate_filled(grid, angle_deg, method, 0.0)
}

/// [`rotate`] with an explicit value for out-of-field samples.
pub fn rotate_filled(grid: &PixelGrid, angle_deg: f64, method: Interpolation, fill: f64) -> PixelGrid {
    let n = grid.n();
    let c = (n / 2) as f64;
    let hi = (n - 1) as f64;
    let (s, co) = angle_deg.to_radians().sin_cos();
    let v = grid.values();
    let snap = |t: f64| {
        let r = t.round();
        if (t - r).abs() < 1e-9 {
            r
        } else {
            t
        }
    };
    let mut out = vec![fill; n * n];
    for y in 0..n {
        let ry = y as f64 - c;
        for x in 0..n {
            let rx = x as f64 - c;
            // inverse rotation of the output position
            let sx = snap(co * rx + s * ry + c);
            let sy = snap(-s * rx + co * ry + c);
            if !(0.0..=hi).contains(&sx) || !(0.0..=hi).contains(&sy) {
                continue;
            }
            out[y * n + x] = match method {
                Interpolation::Nearest => v[sy.round() as usize * n + sx.round() as usize],
                Interpolation::Bilinear => {
                    let x0 = sx.floor() as usize;
                    let y0 = sy.floor() as usize;
                    let x1 = (x0 + 1).min(n - 1);
                    let y1 = (y0 + 1).min(n - 1);
                    let fx = sx - x0 as f64;
                    let fy = sy - y0 as f64;
                    let top = v[y0 * n + x0] * (1.0 - fx) + v[y0 * n + x1] * fx;
                    let bot = v[y1 * n + x0] * (1.0 - fx) + v[y1 * n + x1] * fx;
                    top * (1.0 - fy) + bot * fy
                }
            };
        }
    }
    PixelGrid::from_parts_unchecked(n, grid.pixel_scale(), out)
}

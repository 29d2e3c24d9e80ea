//! Dense square grids and the problem data shared by every other module.
//!
//! Layout conventions used throughout the crate:
//!
//! * values are row-major, `values[y * n + x]`, with `x` the column index;
//! * the optical axis (and the peak of a diffraction PSF) sits at pixel
//!   `(n/2, n/2)`; this is the "centered" layout used for storage and I/O;
//! * FFT routines want kernels in wrap-around layout (origin at pixel
//!   `(0, 0)`); [`PixelGrid::to_wraparound`] and [`PixelGrid::to_centered`]
//!   convert between the two. For even `n` both are the same half-size roll.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    n: usize,
    pixel_scale: f64,
    values: Vec<f64>,
}

impl PixelGrid {
    /// Builds an `n × n` grid. `n` must be a power of two and every value finite.
    pub fn new(n: usize, pixel_scale: f64, values: Vec<f64>) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(n));
        }
        if values.len() != n * n {
            return Err(Error::LengthMismatch {
                expected: n * n,
                got: values.len(),
            });
        }
        if !(pixel_scale.is_finite() && pixel_scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel scale must be positive, got {pixel_scale}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            n,
            pixel_scale,
            values,
        })
    }

    pub fn filled(n: usize, pixel_scale: f64, value: f64) -> Result<Self> {
        Self::new(n, pixel_scale, vec![value; n * n])
    }

    pub fn zeros(n: usize, pixel_scale: f64) -> Result<Self> {
        Self::filled(n, pixel_scale, 0.0)
    }

    /// Grid with the same geometry as `self` and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.n, self.pixel_scale, values)
    }

    /// Internal constructor for values produced by arithmetic on valid grids.
    pub(crate) fn from_parts_unchecked(n: usize, pixel_scale: f64, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n * n);
        Self {
            n,
            pixel_scale,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Milliarcseconds per pixel.
    pub fn pixel_scale(&self) -> f64 {
        self.pixel_scale
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.n + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `(x, y)` of the largest value (first one in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.n, best / self.n)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.map(|v| v * factor)
    }

    pub fn same_geometry(&self, other: &PixelGrid) -> Result<()> {
        if self.n != other.n {
            return Err(Error::SizeMismatch(self.n, other.n));
        }
        if self.pixel_scale != other.pixel_scale {
            return Err(Error::PixelScaleMismatch(self.pixel_scale, other.pixel_scale));
        }
        Ok(())
    }

    /// Circular roll by `(dx, dy)` whole pixels: `out(x + dx, y + dy) = in(x, y)`.
    pub fn roll(&self, dx: isize, dy: isize) -> PixelGrid {
        let n = self.n as isize;
        let mut out = vec![0.0; self.values.len()];
        for y in 0..n {
            let ty = (y + dy).rem_euclid(n) as usize;
            for x in 0..n {
                let tx = (x + dx).rem_euclid(n) as usize;
                out[ty * self.n + tx] = self.values[(y * n + x) as usize];
            }
        }
        Self::from_parts_unchecked(self.n, self.pixel_scale, out)
    }

    /// Moves the centre pixel `(n/2, n/2)` to the origin.
    pub fn to_wraparound(&self) -> PixelGrid {
        let h = (self.n / 2) as isize;
        self.roll(-h, -h)
    }

    /// Inverse of [`PixelGrid::to_wraparound`].
    pub fn to_centered(&self) -> PixelGrid {
        let h = (self.n / 2) as isize;
        self.roll(h, h)
    }

    /// Reflection about the central column `x = n/2`.
    pub fn mirror_x(&self) -> PixelGrid {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                out[y * n + (n - x) % n] = self.values[y * n + x];
            }
        }
        Self::from_parts_unchecked(n, self.pixel_scale, out)
    }

    /// Pixel index nearest to a sky position given in mas from the optical axis.
    pub fn pixel_of(&self, x_mas: f64, y_mas: f64) -> Option<(usize, usize)> {
        let c = (self.n / 2) as f64;
        let px = (c + x_mas / self.pixel_scale).round();
        let py = (c + y_mas / self.pixel_scale).round();
        let hi = (self.n - 1) as f64;
        if (0.0..=hi).contains(&px) && (0.0..=hi).contains(&py) {
            Some((px as usize, py as usize))
        } else {
            None
        }
    }
}

/// A lower or upper bound, either one scalar broadcast to every pixel or a full array.
#[derive(Debug, Clone, PartialEq)]
pub enum Bound {
    Scalar(f64),
    Grid(Vec<f64>),
}

impl Bound {
    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Bound::Scalar(v) => *v,
            Bound::Grid(g) => g[i],
        }
    }

    fn sum(&self, len: usize) -> f64 {
        match self {
            Bound::Scalar(v) if v.is_infinite() => *v,
            Bound::Scalar(v) => v * len as f64,
            Bound::Grid(g) => g.iter().sum(),
        }
    }
}

/// Feasible set `{ lower <= y <= upper, sum(y) = sum_target }`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    lower: Bound,
    upper: Bound,
    sum_target: f64,
    len: usize,
}

impl ConstraintSpec {
    pub fn new(lower: Bound, upper: Bound, sum_target: f64, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("constraint dimension"));
        }
        for b in [&lower, &upper] {
            if let Bound::Grid(g) = b {
                if g.len() != len {
                    return Err(Error::LengthMismatch {
                        expected: len,
                        got: g.len(),
                    });
                }
            }
        }
        if !sum_target.is_finite() {
            return Err(Error::InfeasibleConstraint(format!(
                "sum target {sum_target} is not finite"
            )));
        }
        for i in 0..len {
            let (l, u) = (lower.at(i), upper.at(i));
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::InfeasibleConstraint(format!(
                    "bad bounds [{l}, {u}] at {i}"
                )));
            }
            if l > u {
                return Err(Error::InfeasibleConstraint(format!(
                    "lower {l} > upper {u} at index {i}"
                )));
            }
            if !matches!(lower, Bound::Grid(_)) && !matches!(upper, Bound::Grid(_)) {
                break;
            }
        }
        let (lo, hi) = (lower.sum(len), upper.sum(len));
        let slack = 1e-12 * sum_target.abs().max(1.0);
        if lo > sum_target + slack || hi < sum_target - slack {
            return Err(Error::InfeasibleConstraint(format!(
                "sum target {sum_target} outside [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            lower,
            upper,
            sum_target,
            len,
        })
    }

    /// Object set: `f >= 0`, `sum(f) = flux`.
    pub fn nonnegative_with_sum(flux: f64, len: usize) -> Result<Self> {
        Self::new(Bound::Scalar(0.0), Bound::Scalar(f64::INFINITY), flux, len)
    }

    /// PSF set: `0 <= K <= cap`, `sum(K) = 1`.
    pub fn psf(cap: f64, len: usize) -> Result<Self> {
        Self::new(Bound::Scalar(0.0), Bound::Scalar(cap), 1.0, len)
    }

    pub fn lower(&self) -> &Bound {
        &self.lower
    }

    pub fn upper(&self) -> &Bound {
        &self.upper
    }

    pub fn sum_target(&self) -> f64 {
        self.sum_target
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Largest violation of the box or of the (relative) sum equality.
    pub fn violation(&self, y: &[f64]) -> (f64, f64) {
        let mut box_viol: f64 = 0.0;
        for (i, &v) in y.iter().enumerate() {
            box_viol = box_viol
                .max(self.lower.at(i) - v)
                .max(v - self.upper.at(i));
        }
        let sum: f64 = y.iter().sum();
        (box_viol.max(0.0), (sum - self.sum_target).abs())
    }
}

/// The `p` images to deconvolve together with their backgrounds and PSF bounds.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    images: Vec<PixelGrid>,
    backgrounds: Vec<PixelGrid>,
    strehl_bounds: Vec<f64>,
    psf_caps: Vec<f64>,
    n_frames: u32,
    ron_sigma: f64,
    baseline_angles: Vec<f64>,
}

impl ObservationSet {
    pub fn new(
        images: Vec<PixelGrid>,
        backgrounds: Vec<PixelGrid>,
        strehl_bounds: Vec<f64>,
        psf_caps: Vec<f64>,
        n_frames: u32,
        ron_sigma: f64,
        baseline_angles: Vec<f64>,
    ) -> Result<Self> {
        let p = images.len();
        if p == 0 {
            return Err(Error::Empty("observation images"));
        }
        let bad = |msg: String| Err(Error::InvalidObservation(msg));
        if backgrounds.len() != p
            || strehl_bounds.len() != p
            || psf_caps.len() != p
            || baseline_angles.len() != p
        {
            return bad(format!(
                "per-image lists disagree in length ({p} images, {} backgrounds, {} strehl, {} caps, {} angles)",
                backgrounds.len(),
                strehl_bounds.len(),
                psf_caps.len(),
                baseline_angles.len()
            ));
        }
        let first = &images[0];
        for g in images.iter().chain(backgrounds.iter()) {
            first.same_geometry(g)?;
        }
        for (j, (g, b)) in images.iter().zip(&backgrounds).enumerate() {
            if g.min() < 0.0 {
                return bad(format!("image {j} has negative pixels"));
            }
            if b.min() < 0.0 {
                return bad(format!("background {j} has negative pixels"));
            }
        }
        let npix = first.len() as f64;
        for (j, (&sr, &cap)) in strehl_bounds.iter().zip(&psf_caps).enumerate() {
            if !(sr > 0.0 && sr <= 1.0) {
                return bad(format!("Strehl bound {sr} of image {j} outside (0, 1]"));
            }
            if !(cap.is_finite() && cap > 1.0 / npix) {
                return bad(format!(
                    "PSF cap {cap} of image {j} must exceed 1/N^2 = {}",
                    1.0 / npix
                ));
            }
        }
        if n_frames == 0 {
            return bad("n_frames must be positive".into());
        }
        if !(ron_sigma >= 0.0 && ron_sigma.is_finite()) {
            return bad(format!("RON sigma {ron_sigma} must be nonnegative"));
        }
        Ok(Self {
            images,
            backgrounds,
            strehl_bounds,
            psf_caps,
            n_frames,
            ron_sigma,
            baseline_angles,
        })
    }

    /// Number of images `p`.
    pub fn p(&self) -> usize {
        self.images.len()
    }

    pub fn n(&self) -> usize {
        self.images[0].n()
    }

    pub fn pixel_scale(&self) -> f64 {
        self.images[0].pixel_scale()
    }

    pub fn images(&self) -> &[PixelGrid] {
        &self.images
    }

    pub fn backgrounds(&self) -> &[PixelGrid] {
        &self.backgrounds
    }

    pub fn strehl_bounds(&self) -> &[f64] {
        &self.strehl_bounds
    }

    pub fn psf_caps(&self) -> &[f64] {
        &self.psf_caps
    }

    pub fn n_frames(&self) -> u32 {
        self.n_frames
    }

    pub fn ron_sigma(&self) -> f64 {
        self.ron_sigma
    }

    pub fn baseline_angles(&self) -> &[f64] {
        &self.baseline_angles
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Star {
    /// Offset from the optical axis along the columns, mas.
    pub x: f64,
    /// Offset from the optical axis along the rows, mas.
    pub y: f64,
    pub magnitude: f64,
}

impl Star {
    pub fn new(x: f64, y: f64, magnitude: f64) -> Self {
        Self { x, y, magnitude }
    }
}

/// Point sources expressed in the frame of a given baseline orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct StarField {
    stars: Vec<Star>,
    reference_frame: f64,
}

impl StarField {
    /// Checks that every star lands on the `n × n` detector at `pixel_scale` mas/px.
    pub fn new(stars: Vec<Star>, reference_frame: f64, n: usize, pixel_scale: f64) -> Result<Self> {
        let half = (n / 2) as f64;
        let lo = -half * pixel_scale;
        let hi = (half - 1.0) * pixel_scale;
        for s in &stars {
            if !(s.x.is_finite() && s.y.is_finite() && s.magnitude.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite star {s:?}")));
            }
            if s.x < lo || s.x > hi || s.y < lo || s.y > hi {
                return Err(Error::OutOfField { x: s.x, y: s.y });
            }
        }
        Ok(Self {
            stars,
            reference_frame,
        })
    }

    pub fn stars(&self) -> &[Star] {
        &self.stars
    }

    pub fn reference_frame(&self) -> f64 {
        self.reference_frame
    }

    pub fn is_empty(&self) -> bool {
        self.stars.is_empty()
    }

    /// Index of the brightest (smallest magnitude) star.
    pub fn brightest(&self) -> Option<usize> {
        (0..self.stars.len()).min_by(|&a, &b| {
            self.stars[a]
                .magnitude
                .total_cmp(&self.stars[b].magnitude)
        })
    }

    /// The same field seen after rotating the sky counterclockwise by `angle_deg`
    /// about the optical axis, using the rotation convention of [`crate::fourier::rotate`].
    pub fn rotated(&self, angle_deg: f64, n: usize, pixel_scale: f64) -> Result<Self> {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let stars = self
            .stars
            .iter()
            .map(|st| Star::new(c * st.x - s * st.y, s * st.x + c * st.y, st.magnitude))
            .collect();
        Self::new(stars, self.reference_frame + angle_deg, n, pixel_scale)
    }
}

/// Average background-subtracted flux of the `p` images: the object's total flux.
pub fn flux_constant(obs: &ObservationSet) -> Result<f64> {
    let total: f64 = obs
        .images()
        .iter()
        .zip(obs.backgrounds())
        .map(|(g, b)| {
            g.values()
                .iter()
                .zip(b.values())
                .map(|(gv, bv)| gv - bv)
                .sum::<f64>()
        })
        .sum();
    let c = total / obs.p() as f64;
    if c > 0.0 {
        Ok(c)
    } else {
        Err(Error::NoSignal(c))
    }
}

/// Per-pixel upper bound on a reconstructed PSF: `strehl * max(ideal_psf)`.
pub fn psf_cap(strehl: f64, ideal_psf: &PixelGrid) -> Result<f64> {
    if !(strehl > 0.0 && strehl <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Strehl ratio {strehl} outside (0, 1]"
        )));
    }
    let sum = ideal_psf.sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized(sum));
    }
    Ok(strehl * ideal_psf.max())
}

//! Synthetic observations: diffraction PSFs of one or two apertures, Strehl
//! degradation, star-field rendering, CCD noise and baseline rotation.
//!
//! Angles on the sky are in milliarcseconds; the optical axis sits at pixel
//! `(N/2, N/2)` and `y` runs along rows.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::{rotate, rotate_filled, shift_factors, signed_freq, FftPlan, Interpolation};
use crate::grid::{psf_cap, ObservationSet, PixelGrid, StarField};

pub const MAS_PER_RAD: f64 = 180.0 / PI * 3600.0 * 1000.0;

/// FWHM of the Airy core in units of `λ/D`.
const AIRY_FWHM: f64 = 1.028_94;

#[derive(Debug, Clone, PartialEq)]
pub struct TelescopeModel {
    /// Diameter of each aperture, m.
    pub aperture_diameter: f64,
    /// Center-to-center aperture separation, m; 0 for a single aperture.
    pub baseline: f64,
    /// Observing wavelength, m.
    pub wavelength: f64,
    /// Detector pixel size, mas.
    pub pixel_scale: f64,
    /// Fraction of incident photons detected.
    pub efficiency: f64,
    /// Pupil samples per detector pixel along each axis.
    pub oversampling: usize,
}

impl TelescopeModel {
    /// One 8.4 m mirror in K band on 15 mas pixels.
    pub fn single() -> Self {
        Self {
            aperture_diameter: 8.4,
            baseline: 0.0,
            wavelength: 2.2e-6,
            pixel_scale: 15.0,
            efficiency: 0.3,
            oversampling: 4,
        }
    }

    /// Two 8.4 m mirrors 14.4 m apart in K band on 5 mas pixels.
    pub fn fizeau() -> Self {
        Self {
            baseline: 14.4,
            pixel_scale: 5.0,
            ..Self::single()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.aperture_diameter > 0.0
            && self.baseline >= 0.0
            && self.wavelength > 0.0
            && self.pixel_scale > 0.0
            && self.efficiency > 0.0
            && self.efficiency <= 1.0
            && self.oversampling >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid telescope model {self:?}")))
        }
    }

    pub fn is_interferometer(&self) -> bool {
        self.baseline > 0.0
    }

    /// Largest separation between two pupil points, m.
    pub fn max_baseline(&self) -> f64 {
        self.baseline + self.aperture_diameter
    }

    /// Area of the union of the apertures, m².
    pub fn collecting_area(&self) -> f64 {
        let r = 0.5 * self.aperture_diameter;
        let disc = PI * r * r;
        let d = self.baseline;
        if d == 0.0 {
            return disc;
        }
        if d >= 2.0 * r {
            return 2.0 * disc;
        }
        let lens = 2.0 * r * r * (d / (2.0 * r)).acos() - 0.5 * d * (4.0 * r * r - d * d).sqrt();
        2.0 * disc - lens
    }

    /// `λ / D_max` in mas: the resolution limit used to scale binary separations.
    pub fn resolution_limit(&self) -> f64 {
        self.wavelength / self.max_baseline() * MAS_PER_RAD
    }

    /// FWHM of a single aperture's diffraction core, mas.
    pub fn diffraction_fwhm(&self) -> f64 {
        AIRY_FWHM * self.wavelength / self.aperture_diameter * MAS_PER_RAD
    }

    /// Largest pixel size that samples the highest spatial frequency at Nyquist, mas.
    pub fn nyquist_pixel(&self) -> f64 {
        self.wavelength / (2.0 * self.max_baseline()) * MAS_PER_RAD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Read-out noise standard deviation per frame, electrons/pixel.
    pub ron_sigma: f64,
    /// Counts per pixel that a single frame may not exceed.
    pub saturation: f64,
    /// Sky surface brightness, mag/arcsec².
    pub background_mag: f64,
    /// Photons s⁻¹ m⁻² from a magnitude-0 source.
    pub flux_zero_point: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            ron_sigma: 10.0,
            saturation: 5e4,
            background_mag: 13.5,
            flux_zero_point: DEFAULT_ZERO_POINT,
        }
    }
}

/// Gives an exposure close to 40 s for a lone m = 15 star at Strehl 0.81 with
/// the single-aperture model.
pub const DEFAULT_ZERO_POINT: f64 = 1.45e9;

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ron_sigma >= 0.0
            && self.saturation > 0.0
            && self.background_mag.is_finite()
            && self.flux_zero_point > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid noise model {self:?}")))
        }
    }

    /// Photon rate of a source of magnitude `m` per unit area, s⁻¹ m⁻².
    pub fn photon_rate(&self, m: f64) -> f64 {
        self.flux_zero_point * 10f64.powf(-0.4 * m)
    }
}

/// Elliptical Gaussian used to spread the seeing halo, sizes in mas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaloShape {
    pub fwhm_major: f64,
    pub fwhm_minor: f64,
    /// Counterclockwise angle of the major axis from the x axis, degrees.
    pub angle: f64,
}

impl HaloShape {
    pub fn circular(fwhm: f64) -> Self {
        Self {
            fwhm_major: fwhm,
            fwhm_minor: fwhm,
            angle: 0.0,
        }
    }

    /// Round halo four diffraction widths across.
    pub fn default_for(tel: &TelescopeModel) -> Self {
        Self::circular(4.0 * tel.diffraction_fwhm())
    }

    /// Tilted elongated halo, so that mirroring the PSF changes it.
    pub fn tilted_for(tel: &TelescopeModel) -> Self {
        Self {
            fwhm_major: 4.0 * tel.diffraction_fwhm(),
            fwhm_minor: 2.0 * tel.diffraction_fwhm(),
            angle: 30.0,
        }
    }
}

/// Fraction of pupil cell `[u ± h] × [v ± h]` inside the union of the discs.
fn cell_coverage(u: f64, v: f64, h: f64, centers: &[(f64, f64)], r: f64) -> f64 {
    let diag = h * std::f64::consts::SQRT_2;
    let mut partial = false;
    for &(cx, cy) in centers {
        let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
        if d <= r - diag {
            return 1.0;
        }
        if d < r + diag {
            partial = true;
        }
    }
    if !partial {
        return 0.0;
    }
    const S: usize = 16;
    let mut inside = 0usize;
    for a in 0..S {
        let su = u - h + (a as f64 + 0.5) * 2.0 * h / S as f64;
        for b in 0..S {
            let sv = v - h + (b as f64 + 0.5) * 2.0 * h / S as f64;
            if centers
                .iter()
                .any(|&(cx, cy)| (su - cx).powi(2) + (sv - cy).powi(2) <= r * r)
            {
                inside += 1;
            }
        }
    }
    inside as f64 / (S * S) as f64
}

/// Diffraction-limited PSF integrated over detector pixels, unit sum, centered.
/// For two apertures the baseline lies along x rotated counterclockwise by
/// `fringe_angle` degrees, so at 0 the fringes are vertical.
pub fn ideal_psf(tel: &TelescopeModel, n: usize, fringe_angle: f64) -> Result<PixelGrid> {
    tel.validate()?;
    PixelGrid::zeros(n, tel.pixel_scale)?;
    let limit = tel.nyquist_pixel();
    if tel.pixel_scale > limit {
        return Err(Error::Undersampled {
            pixel_scale: tel.pixel_scale,
            limit,
        });
    }
    let os = tel.oversampling;
    let m = os * n;
    let du = tel.wavelength / (n as f64 * tel.pixel_scale / MAS_PER_RAD);
    let r = 0.5 * tel.aperture_diameter;
    if 2.0 * (tel.max_baseline() / du + 2.0) > n as f64 {
        return Err(Error::Undersampled {
            pixel_scale: tel.pixel_scale,
            limit,
        });
    }
    let (s, c) = fringe_angle.to_radians().sin_cos();
    let half_b = 0.5 * tel.baseline;
    let centers = if tel.is_interferometer() {
        vec![(c * half_b, s * half_b), (-c * half_b, -s * half_b)]
    } else {
        vec![(0.0, 0.0)]
    };

    // samples land at (k + δ) fine pixels; δ = 1/2 centers the binning for even factors
    let delta = if os % 2 == 0 { 0.5 } else { 0.0 };
    let reach = ((tel.max_baseline() * 0.5) / du).ceil() as isize + 2;
    let mut field = vec![Complex64::new(0.0, 0.0); m * m];
    for b in -reach..=reach {
        let v = b as f64 * du;
        for a in -reach..=reach {
            let u = a as f64 * du;
            let cov = cell_coverage(u, v, 0.5 * du, &centers, r);
            if cov == 0.0 {
                continue;
            }
            let phase = -2.0 * PI * delta * (a + b) as f64 / m as f64;
            let ia = a.rem_euclid(m as isize) as usize;
            let ib = b.rem_euclid(m as isize) as usize;
            field[ib * m + ia] = Complex64::from_polar(cov, phase);
        }
    }
    FftPlan::cached(m).forward(&mut field);
    // spectrum layout is transposed
    let intensity: Vec<f64> = (0..m * m)
        .map(|i| {
            let (row, col) = (i / m, i % m);
            field[col * m + row].norm_sqr()
        })
        .collect();

    let k0 = -((os / 2) as isize);
    let mut binned = vec![0.0; n * n];
    for y in 0..n {
        let sy = signed_freq(y, n) as isize;
        for x in 0..n {
            let sx = signed_freq(x, n) as isize;
            let mut acc = 0.0;
            for ty in 0..os as isize {
                let fy = (sy * os as isize + k0 + ty).rem_euclid(m as isize) as usize;
                for tx in 0..os as isize {
                    let fx = (sx * os as isize + k0 + tx).rem_euclid(m as isize) as usize;
                    acc += intensity[fy * m + fx];
                }
            }
            binned[y * n + x] = acc;
        }
    }
    let total: f64 = binned.iter().sum();
    let grid = PixelGrid::new(n, tel.pixel_scale, binned.into_iter().map(|v| v / total).collect())?;
    Ok(grid.to_centered())
}

/// Normalized elliptical Gaussian in wrap-around layout.
fn gaussian_kernel(n: usize, pixel_scale: f64, halo: &HaloShape) -> Result<PixelGrid> {
    let k = 2.0 * (2.0 * 2f64.ln()).sqrt();
    let sa = halo.fwhm_major / k / pixel_scale;
    let sb = halo.fwhm_minor / k / pixel_scale;
    if !(sa > 0.0 && sb > 0.0) {
        return Err(Error::InvalidParameter(format!("halo widths must be positive: {halo:?}")));
    }
    let (s, c) = halo.angle.to_radians().sin_cos();
    let mut v = Vec::with_capacity(n * n);
    for y in 0..n {
        let dy = signed_freq(y, n);
        for x in 0..n {
            let dx = signed_freq(x, n);
            let a = c * dx + s * dy;
            let b = -s * dx + c * dy;
            v.push((-0.5 * (a * a / (sa * sa) + b * b / (sb * sb))).exp());
        }
    }
    let total: f64 = v.iter().sum();
    PixelGrid::new(n, pixel_scale, v.into_iter().map(|x| x / total).collect())
}

/// `a · ideal + (1 - a) · halo` with `a` chosen so the peak drops to `strehl`
/// times the ideal peak.
pub fn degrade_to_strehl(ideal: &PixelGrid, strehl: f64, halo: &HaloShape) -> Result<PixelGrid> {
    if !(strehl > 0.0 && strehl <= 1.0) {
        return Err(Error::InvalidParameter(format!("Strehl ratio {strehl} outside (0, 1]")));
    }
    if strehl == 1.0 {
        return Ok(ideal.clone());
    }
    let kernel = gaussian_kernel(ideal.n(), ideal.pixel_scale(), halo)?;
    let spread = crate::fourier::convolve(&kernel, ideal)?.map(|v| v.max(0.0))?;
    let spread = spread.scaled(1.0 / spread.sum())?;
    let peak = ideal.max();
    let iv = ideal.values();
    let hv = spread.values();
    let ratio = |a: f64| {
        iv.iter()
            .zip(hv)
            .map(|(i, h)| a * i + (1.0 - a) * h)
            .fold(f64::NEG_INFINITY, f64::max)
            / peak
    };
    let floor = ratio(0.0);
    if strehl < floor {
        return Err(Error::StrehlBelowFloor { strehl, floor });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < strehl {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let a = 0.5 * (lo + hi);
    let out: Vec<f64> = iv.iter().zip(hv).map(|(i, h)| a * i + (1.0 - a) * h).collect();
    let total: f64 = out.iter().sum();
    ideal.with_values(out.into_iter().map(|v| v / total).collect())
}

fn check_scale(psf: &PixelGrid, tel: &TelescopeModel) -> Result<()> {
    if (psf.pixel_scale() - tel.pixel_scale).abs() > 1e-12 * tel.pixel_scale {
        return Err(Error::PixelScaleMismatch(psf.pixel_scale(), tel.pixel_scale));
    }
    Ok(())
}

/// Sky background per pixel accumulated over `exposure` seconds.
pub fn background_level(exposure: f64, tel: &TelescopeModel, noise: &NoiseModel) -> f64 {
    let pix_arcsec = tel.pixel_scale / 1000.0;
    noise.photon_rate(noise.background_mag) * tel.collecting_area() * tel.efficiency * exposure * pix_arcsec * pix_arcsec
}

/// Counts detected from a magnitude-0 source in `exposure` seconds.
pub fn zero_flux(exposure: f64, tel: &TelescopeModel, noise: &NoiseModel) -> f64 {
    noise.flux_zero_point * tel.collecting_area() * tel.efficiency * exposure
}

/// Noise-free expected counts for `exposure` seconds: shifted, weighted PSFs
/// plus a uniform sky background.
pub fn render_field(
    field: &StarField,
    psf: &PixelGrid,
    exposure: f64,
    tel: &TelescopeModel,
    noise: &NoiseModel,
) -> Result<PixelGrid> {
    check_scale(psf, tel)?;
    let n = psf.n();
    let plan = FftPlan::cached(n);
    let mut acc = vec![Complex64::new(0.0, 0.0); n * n];
    let unit = zero_flux(exposure, tel, noise);
    for st in field.stars() {
        if psf.pixel_of(st.x, st.y).is_none() {
            return Err(Error::OutOfField { x: st.x, y: st.y });
        }
        let w = unit * 10f64.powf(-0.4 * st.magnitude);
        let ramp = shift_factors(n, st.x / tel.pixel_scale, st.y / tel.pixel_scale);
        for (a, r) in acc.iter_mut().zip(ramp) {
            *a += w * r;
        }
    }
    let spec = plan.spectrum(psf.values());
    for (a, s) in acc.iter_mut().zip(spec) {
        *a *= s;
    }
    let bg = background_level(exposure, tel, noise);
    let img = plan.real_inverse(acc)?;
    psf.with_values(img.into_iter().map(|v| v.max(0.0) + bg).collect())
}

/// Single-frame integration time that brings the brightest star's pixel to saturation.
pub fn exposure_time(field: &StarField, psf: &PixelGrid, tel: &TelescopeModel, noise: &NoiseModel) -> Result<f64> {
    let idx = field.brightest().ok_or(Error::Empty("star field"))?;
    let star = field.stars()[idx];
    let rate = render_field(field, psf, 1.0, tel, noise)?;
    let (x, y) = rate
        .pixel_of(star.x, star.y)
        .ok_or(Error::OutOfField { x: star.x, y: star.y })?;
    Ok(noise.saturation / rate.get(x, y))
}

/// Poisson counts plus Gaussian read-out noise of the `n_frames`-frame sum.
/// `stream` separates the images of one simulation.
pub fn apply_noise(expected: &PixelGrid, n_frames: u32, noise: &NoiseModel, seed: u64, stream: u64) -> Result<PixelGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let sd = (n_frames as f64).sqrt() * noise.ron_sigma;
    let gauss = Normal::new(0.0, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = Vec::with_capacity(expected.len());
    for &lam in expected.values() {
        let counts = if lam > 0.0 {
            Poisson::new(lam)
                .map_err(|e| Error::InvalidParameter(format!("Poisson mean {lam}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        let ron = if sd > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
        out.push(counts + ron);
    }
    expected.with_values(out)
}

/// Adds `n σ²` to image and background so that the read-out noise behaves like
/// extra Poisson counts; negative image pixels are clipped.
pub fn ron_compensate(img: &PixelGrid, bg: &PixelGrid, n_frames: u32, noise: &NoiseModel) -> Result<(PixelGrid, PixelGrid)> {
    let offset = n_frames as f64 * noise.ron_sigma * noise.ron_sigma;
    Ok((img.map(|v| (v + offset).max(0.0))?, bg.map(|v| v + offset)?))
}

/// Everything needed to generate one data set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub telescope: TelescopeModel,
    pub noise: NoiseModel,
    pub n: usize,
    pub strehl: f64,
    /// `None` uses [`HaloShape::default_for`] (single) or [`HaloShape::tilted_for`] (Fizeau).
    pub halo: Option<HaloShape>,
    pub n_frames: u32,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn single(n: usize, strehl: f64, seed: u64) -> Self {
        Self {
            telescope: TelescopeModel::single(),
            noise: NoiseModel::default(),
            n,
            strehl,
            halo: None,
            n_frames: 10,
            seed,
        }
    }

    pub fn fizeau(n: usize, strehl: f64, seed: u64) -> Self {
        Self {
            telescope: TelescopeModel::fizeau(),
            ..Self::single(n, strehl, seed)
        }
    }
}

/// A simulated data set together with its ground truth.
#[derive(Debug, Clone)]
pub struct Simulation {
    /// Stars in the frame of the first image.
    pub field: StarField,
    /// RON-compensated (and, for rotated baselines, derotated) data.
    pub observations: ObservationSet,
    /// Raw frame sums in detector orientation.
    pub noisy: Vec<PixelGrid>,
    /// Noise-free expected counts in detector orientation.
    pub expected: Vec<PixelGrid>,
    /// PSFs used to render each image, detector orientation.
    pub true_psfs: Vec<PixelGrid>,
    /// True PSFs in the orientation of the data, for error measurement.
    pub reference_psfs: Vec<PixelGrid>,
    /// Diffraction-limited PSFs in the orientation of the data.
    pub ideal_psfs: Vec<PixelGrid>,
    /// Integration time of one frame, s.
    pub exposure_time: f64,
    /// Counts of a magnitude-0 star over the whole image.
    pub zero_flux: f64,
    pub baseline_angles: Vec<f64>,
}

/// Binary or multiple star seen through one aperture.
pub fn simulate_single(field: &StarField, spec: &SimulationSpec) -> Result<Simulation> {
    let tel = &spec.telescope;
    spec.noise.validate()?;
    let field = StarField::new(field.stars().to_vec(), field.reference_frame(), spec.n, tel.pixel_scale)?;
    let ideal = ideal_psf(tel, spec.n, 0.0)?;
    let halo = spec.halo.unwrap_or_else(|| HaloShape::default_for(tel));
    let psf = degrade_to_strehl(&ideal, spec.strehl, &halo)?;
    let t = exposure_time(&field, &psf, tel, &spec.noise)?;
    let total = t * spec.n_frames as f64;
    let expected = render_field(&field, &psf, total, tel, &spec.noise)?;
    let noisy = apply_noise(&expected, spec.n_frames, &spec.noise, spec.seed, 0)?;
    let bg = PixelGrid::filled(spec.n, tel.pixel_scale, background_level(total, tel, &spec.noise))?;
    let (data, bg) = ron_compensate(&noisy, &bg, spec.n_frames, &spec.noise)?;
    let observations = ObservationSet::new(
        vec![data],
        vec![bg],
        vec![spec.strehl],
        vec![psf_cap(spec.strehl, &ideal)?],
        spec.n_frames,
        spec.noise.ron_sigma,
        vec![0.0],
    )?;
    Ok(Simulation {
        field,
        observations,
        noisy: vec![noisy],
        expected: vec![expected],
        true_psfs: vec![psf.clone()],
        reference_psfs: vec![psf],
        ideal_psfs: vec![ideal],
        exposure_time: t,
        zero_flux: zero_flux(total, tel, &spec.noise),
        baseline_angles: vec![0.0],
    })
}

/// The three PSFs of a rotating-baseline sequence: the degraded one, its
/// mirror about the central column and the mean of the two.
pub fn fizeau_psf_triplet(first: &PixelGrid) -> Result<Vec<PixelGrid>> {
    let second = first.mirror_x();
    let third = first.with_values(
        first
            .values()
            .iter()
            .zip(second.values())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    )?;
    Ok(vec![first.clone(), second, third])
}

/// One image per baseline angle with the baseline fixed on the detector and
/// the sky rotated; every image is then derotated to the first one's frame.
pub fn simulate_fizeau(field: &StarField, spec: &SimulationSpec, angles: &[f64]) -> Result<Simulation> {
    let tel = &spec.telescope;
    spec.noise.validate()?;
    if angles.len() != 3 {
        return Err(Error::InvalidParameter(format!(
            "a Fizeau sequence needs three baseline angles, got {}",
            angles.len()
        )));
    }
    let n = spec.n;
    let field = StarField::new(field.stars().to_vec(), field.reference_frame(), n, tel.pixel_scale)?;
    let ideal0 = ideal_psf(tel, n, 0.0)?;
    let halo = spec.halo.unwrap_or_else(|| HaloShape::tilted_for(tel));
    let psfs = fizeau_psf_triplet(&degrade_to_strehl(&ideal0, spec.strehl, &halo)?)?;

    let t = exposure_time(&field.rotated(angles[0], n, tel.pixel_scale)?, &psfs[0], tel, &spec.noise)?;
    let total = t * spec.n_frames as f64;
    let bg_level = background_level(total, tel, &spec.noise);
    let bg = PixelGrid::filled(n, tel.pixel_scale, bg_level)?;

    let mut data = Vec::new();
    let mut bgs = Vec::new();
    let mut caps = Vec::new();
    let mut ideals = Vec::new();
    let mut references = Vec::new();
    let mut expected_all = Vec::new();
    let mut noisy_all = Vec::new();
    for (j, (&theta, psf)) in angles.iter().zip(&psfs).enumerate() {
        let seen = field.rotated(theta, n, tel.pixel_scale)?;
        let expected = render_field(&seen, psf, total, tel, &spec.noise)?;
        let noisy = apply_noise(&expected, spec.n_frames, &spec.noise, spec.seed, j as u64)?;
        let (comp, comp_bg) = ron_compensate(&noisy, &bg, spec.n_frames, &spec.noise)?;
        let fill = comp_bg.values()[0];
        data.push(rotate_filled(&comp, -theta, Interpolation::Bilinear, fill));
        bgs.push(comp_bg);
        let ideal = ideal_psf(tel, n, -theta)?;
        caps.push(psf_cap(spec.strehl, &ideal)?);
        ideals.push(ideal);
        references.push(rotate(psf, -theta, Interpolation::Bilinear));
        expected_all.push(expected);
        noisy_all.push(noisy);
    }
    let observations = ObservationSet::new(
        data,
        bgs,
        vec![spec.strehl; 3],
        caps,
        spec.n_frames,
        spec.noise.ron_sigma,
        angles.to_vec(),
    )?;
    Ok(Simulation {
        field,
        observations,
        noisy: noisy_all,
        expected: expected_all,
        true_psfs: psfs,
        reference_psfs: references,
        ideal_psfs: ideals,
        exposure_time: t,
        zero_flux: zero_flux(total, tel, &spec.noise),
        baseline_angles: angles.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Star;
    use crate::objective::kl_divergence;

    fn row_profile(psf: &PixelGrid) -> Vec<f64> {
        let n = psf.n();
        (0..n / 2).map(|r| psf.get(n / 2 + r, n / 2)).collect()
    }

    #[test]
    fn ideal_psf_is_centered_normalized_symmetric() {
        let psf = ideal_psf(&TelescopeModel::single(), 64, 0.0).unwrap();
        assert!((psf.sum() - 1.0).abs() < 1e-10);
        assert!(psf.min() >= 0.0);
        assert_eq!(psf.argmax(), (32, 32));
        for d in 1..20 {
            let a = psf.get(32 + d, 32);
            assert!((a - psf.get(32 - d, 32)).abs() < 1e-14);
            assert!((a - psf.get(32, 32 + d)).abs() < 1e-14);
        }
    }

    #[test]
    fn airy_first_zero_radius() {
        let tel = TelescopeModel::single();
        let psf = ideal_psf(&tel, 64, 0.0).unwrap();
        let prof = row_profile(&psf);
        let k = (1..prof.len() - 1)
            .find(|&k| prof[k] < prof[k - 1] && prof[k] <= prof[k + 1])
            .unwrap();
        // vertex of the parabola through the three samples around the minimum
        let (a, b, c) = (prof[k - 1], prof[k], prof[k + 1]);
        let r = k as f64 + 0.5 * (a - c) / (a - 2.0 * b + c);
        let predicted = 1.22 * tel.wavelength / tel.aperture_diameter * MAS_PER_RAD / tel.pixel_scale;
        assert!((predicted - 4.39).abs() < 0.01);
        assert!((r - predicted).abs() <= 0.5, "{r} vs {predicted}");
    }

    #[test]
    fn odd_and_even_oversampling_agree() {
        let mut tel = TelescopeModel::single();
        tel.oversampling = 3;
        let a = ideal_psf(&tel, 64, 0.0).unwrap();
        tel.oversampling = 4;
        let b = ideal_psf(&tel, 64, 0.0).unwrap();
        tel.oversampling = 5;
        let c = ideal_psf(&tel, 64, 0.0).unwrap();
        // pixel integration converges as the pupil is sampled more finely
        assert!((b.max() - c.max()).abs() < (a.max() - b.max()).abs());
        assert!((a.max() - c.max()).abs() < 3e-3 * c.max());
    }

    #[test]
    fn zero_baseline_twin_is_single() {
        let single = ideal_psf(&TelescopeModel::single(), 64, 0.0).unwrap();
        let twin = ideal_psf(&TelescopeModel { baseline: 0.0, ..TelescopeModel::single() }, 64, 0.0).unwrap();
        for (a, b) in single.values().iter().zip(twin.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        let mut tiny = TelescopeModel::single();
        tiny.baseline = 1e-9;
        let lens = ideal_psf(&tiny, 64, 0.0).unwrap();
        for (a, b) in single.values().iter().zip(lens.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fizeau_spectrum_support() {
        let tel = TelescopeModel::fizeau();
        let n = 64;
        let psf = ideal_psf(&tel, n, 0.0).unwrap();
        assert!((psf.sum() - 1.0).abs() < 1e-10);
        let du = tel.wavelength / (n as f64 * tel.pixel_scale / MAS_PER_RAD);
        let spec = FftPlan::cached(n).spectrum(psf.values());
        let d = tel.aperture_diameter / du + 2.0;
        let b = tel.baseline / du;
        let mut outside = 0;
        for kx in 0..n {
            for ky in 0..n {
                let (fx, fy) = (signed_freq(kx, n), signed_freq(ky, n));
                let near = |cx: f64| ((fx - cx).powi(2) + fy * fy).sqrt() <= d;
                if !(near(0.0) || near(b) || near(-b)) {
                    outside += 1;
                    assert!(spec[kx * n + ky].norm() < 1e-8, "({fx}, {fy}) {}", spec[kx * n + ky].norm());
                }
            }
        }
        assert!(outside > 0);
    }

    #[test]
    fn fringes_are_vertical_and_rotate_with_the_baseline() {
        let tel = TelescopeModel::fizeau();
        let psf = ideal_psf(&tel, 64, 0.0).unwrap();
        // fringe period λ/B ≈ 31.5 mas ≈ 6.3 px: first dark fringe near 3 px along x only
        assert!(psf.get(35, 32) < 0.2 * psf.get(32, 32));
        assert!(psf.get(32, 35) > 0.2 * psf.get(32, 32));
        let turned = ideal_psf(&tel, 64, 90.0).unwrap();
        let exact = rotate(&psf, 90.0, Interpolation::Nearest);
        // row and column 0 rotate in from outside the grid
        for y in 1..64 {
            for x in 1..64 {
                assert!((turned.get(x, y) - exact.get(x, y)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn undersampled_configuration_is_rejected() {
        let mut tel = TelescopeModel::fizeau();
        tel.pixel_scale = 15.0;
        assert!(matches!(ideal_psf(&tel, 64, 0.0), Err(Error::Undersampled { .. })));
    }

    #[test]
    fn strehl_degradation_hits_target() {
        let tel = TelescopeModel::single();
        let ideal = ideal_psf(&tel, 128, 0.0).unwrap();
        let halo = HaloShape::default_for(&tel);
        assert_eq!(degrade_to_strehl(&ideal, 1.0, &halo).unwrap(), ideal);
        let mut prev = 0.0;
        for sr in [0.46, 0.62, 0.77, 0.81] {
            let k = degrade_to_strehl(&ideal, sr, &halo).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-10);
            assert!((k.max() / ideal.max() - sr).abs() < 1e-6);
            assert!(k.max() > prev);
            prev = k.max();
        }
        assert!(matches!(
            degrade_to_strehl(&ideal, 0.001, &halo),
            Err(Error::StrehlBelowFloor { .. })
        ));
    }

    #[test]
    fn exposure_scales_inversely_with_zero_point_and_respects_saturation() {
        let tel = TelescopeModel::single();
        let ideal = ideal_psf(&tel, 64, 0.0).unwrap();
        let psf = degrade_to_strehl(&ideal, 0.81, &HaloShape::default_for(&tel)).unwrap();
        let field = StarField::new(vec![Star::new(0.0, 0.0, 15.0)], 0.0, 64, 15.0).unwrap();
        let noise = NoiseModel::default();
        let t = exposure_time(&field, &psf, &tel, &noise).unwrap();
        assert!((t - 40.0).abs() < 2.0, "{t}");
        let bright = NoiseModel {
            flux_zero_point: 2.0 * noise.flux_zero_point,
            ..noise.clone()
        };
        let t2 = exposure_time(&field, &psf, &tel, &bright).unwrap();
        assert!((t2 - 0.5 * t).abs() < 1e-12 * t);
        let frame = render_field(&field, &psf, t, &tel, &noise).unwrap();
        assert!(frame.max() <= noise.saturation * (1.0 + 1e-12));
    }

    #[test]
    fn rendering_is_linear_and_flux_conserving() {
        let tel = TelescopeModel::single();
        let psf = ideal_psf(&tel, 64, 0.0).unwrap();
        let noise = NoiseModel::default();
        let a = Star::new(-120.0, 7.5, 15.0);
        let b = Star::new(120.0, -3.0, 16.0);
        let fa = StarField::new(vec![a], 0.0, 64, 15.0).unwrap();
        let fb = StarField::new(vec![b], 0.0, 64, 15.0).unwrap();
        let fab = StarField::new(vec![a, b], 0.0, 64, 15.0).unwrap();
        let t = 10.0;
        let ra = render_field(&fa, &psf, t, &tel, &noise).unwrap();
        let rb = render_field(&fb, &psf, t, &tel, &noise).unwrap();
        let rab = render_field(&fab, &psf, t, &tel, &noise).unwrap();
        let bg = background_level(t, &tel, &noise);
        for ((x, y), z) in ra.values().iter().zip(rb.values()).zip(rab.values()) {
            assert!((x + y - bg - z).abs() <= 1e-9 * z);
        }
        let unit = zero_flux(t, &tel, &noise);
        let weights = unit * (10f64.powf(-6.0) + 10f64.powf(-6.4));
        let source = rab.sum() - bg * 4096.0;
        assert!((source - weights).abs() <= 1e-8 * weights);
    }

    #[test]
    fn centered_star_peak_is_exact() {
        let tel = TelescopeModel::single();
        let psf = ideal_psf(&tel, 32, 0.0).unwrap();
        let noise = NoiseModel::default();
        let field = StarField::new(vec![Star::new(0.0, 0.0, 12.0)], 0.0, 32, 15.0).unwrap();
        let img = render_field(&field, &psf, 1.0, &tel, &noise).unwrap();
        let w = zero_flux(1.0, &tel, &noise) * 10f64.powf(-4.8);
        let bg = background_level(1.0, &tel, &noise);
        assert!((img.get(16, 16) - (w * psf.max() + bg)).abs() < 1e-9 * w);
    }

    #[test]
    fn binary_at_240_mas_gives_two_maxima_16_px_apart() {
        let tel = TelescopeModel::single();
        let psf = ideal_psf(&tel, 64, 0.0).unwrap();
        let field = StarField::new(
            vec![Star::new(-120.0, 0.0, 15.0), Star::new(120.0, 0.0, 15.0)],
            0.0,
            64,
            15.0,
        )
        .unwrap();
        let img = render_field(&field, &psf, 10.0, &tel, &NoiseModel::default()).unwrap();
        let peaks = crate::metrics::detect_stars(&img, 2, 4.0).unwrap();
        assert_eq!(peaks.len(), 2);
        let dx = (peaks[0].0 .0 as isize - peaks[1].0 .0 as isize).abs();
        assert_eq!(dx, 16);
    }

    #[test]
    fn noise_moments_and_determinism() {
        let noise = NoiseModel::default();
        let zero = PixelGrid::zeros(16, 1.0).unwrap();
        let quiet = NoiseModel { ron_sigma: 0.0, ..noise.clone() };
        assert_eq!(apply_noise(&zero, 10, &quiet, 1, 0).unwrap(), zero);

        let flat = PixelGrid::filled(256, 1.0, 1e4).unwrap();
        let a = apply_noise(&flat, 10, &noise, 7, 0).unwrap();
        assert_eq!(a, apply_noise(&flat, 10, &noise, 7, 0).unwrap());
        assert_ne!(a, apply_noise(&flat, 10, &noise, 7, 1).unwrap());
        let mean = a.sum() / a.len() as f64;
        let var = a.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (a.len() - 1) as f64;
        assert!((var / 1.1e4 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn compensation_offsets_and_clips() {
        let noise = NoiseModel::default();
        let img = PixelGrid::new(2, 1.0, vec![-50.0, -1200.0, 3.0, 0.0]).unwrap();
        let bg = PixelGrid::filled(2, 1.0, 5.0).unwrap();
        let (i, b) = ron_compensate(&img, &bg, 10, &noise).unwrap();
        assert_eq!(i.values(), &[950.0, 0.0, 1003.0, 1000.0]);
        assert_eq!(b.values(), &[1005.0; 4]);
    }

    #[test]
    fn single_simulation_statistic_near_one() {
        let field = StarField::new(
            vec![Star::new(-120.0, 0.0, 15.0), Star::new(120.0, 0.0, 15.0)],
            0.0,
            128,
            15.0,
        )
        .unwrap();
        let sim = simulate_single(&field, &SimulationSpec::single(128, 0.81, 3)).unwrap();
        let obs = &sim.observations;
        let model = sim.expected[0].map(|v| v + 1000.0).unwrap();
        let j = kl_divergence(&obs.images()[0], &model).unwrap() * 2.0 / (128.0 * 128.0);
        assert!((0.9..=1.1).contains(&j), "{j}");
    }

    #[test]
    fn fizeau_triplet_shares_peak() {
        let tel = TelescopeModel::fizeau();
        let ideal = ideal_psf(&tel, 64, 0.0).unwrap();
        let k = degrade_to_strehl(&ideal, 0.77, &HaloShape::tilted_for(&tel)).unwrap();
        let t = fizeau_psf_triplet(&k).unwrap();
        assert_ne!(t[0], t[1]);
        for p in &t {
            assert!((p.max() - k.max()).abs() < 1e-9 * k.max());
            assert!((p.sum() - 1.0).abs() < 1e-10);
        }
    }

    fn brightest_two(img: &PixelGrid) -> [(f64, f64); 2] {
        let peaks = crate::metrics::detect_stars(img, 2, 4.0).unwrap();
        let mut out = [(0.0, 0.0); 2];
        for (o, &((x, y), _)) in out.iter_mut().zip(&peaks) {
            // intensity-weighted centroid over a 3x3 box
            let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let v = img.get(xx, yy);
                    sx += v * xx as f64;
                    sy += v * yy as f64;
                    s += v;
                }
            }
            *o = (sx / s, sy / s);
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    #[test]
    fn fizeau_derotation_aligns_binary() {
        let field = StarField::new(
            vec![Star::new(-40.0, 0.0, 15.0), Star::new(40.0, 0.0, 15.0)],
            0.0,
            128,
            5.0,
        )
        .unwrap();
        let sim = simulate_fizeau(&field, &SimulationSpec::fizeau(128, 0.77, 5), &[0.0, 60.0, 120.0]).unwrap();
        let obs = &sim.observations;
        assert_eq!(obs.p(), 3);
        let sep: Vec<(f64, f64)> = obs
            .images()
            .iter()
            .map(|g| {
                let s = brightest_two(g);
                (s[1].0 - s[0].0, s[1].1 - s[0].1)
            })
            .collect();
        for s in &sep[1..] {
            assert!((s.0 - sep[0].0).abs() <= 0.5 && (s.1 - sep[0].1).abs() <= 0.5, "{sep:?}");
        }

        // derotation smooths the noise, so the data fit their expectation better
        let stat = |j: usize| {
            let comp = sim.expected[j].map(|v| v + 1000.0).unwrap();
            let fill = obs.backgrounds()[j].values()[0];
            let model = rotate_filled(&comp, -sim.baseline_angles[j], Interpolation::Bilinear, fill);
            kl_divergence(&obs.images()[j], &model).unwrap() * 2.0 / (128.0 * 128.0)
        };
        let aligned = stat(0);
        assert!(stat(1) < aligned && stat(2) < aligned);
    }

    #[test]
    fn centered_point_source_is_rotation_invariant() {
        let field = StarField::new(vec![Star::new(0.0, 0.0, 14.0)], 0.0, 64, 5.0).unwrap();
        let mut spec = SimulationSpec::fizeau(64, 0.77, 9);
        spec.halo = Some(HaloShape::circular(4.0 * spec.telescope.diffraction_fwhm()));
        let sim = simulate_fizeau(&field, &spec, &[0.0, 60.0, 120.0]).unwrap();
        for img in sim.observations.images() {
            assert_eq!(img.argmax(), (32, 32));
        }
    }
}

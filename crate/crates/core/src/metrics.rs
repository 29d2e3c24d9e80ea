//! Photometry and PSF accuracy figures for reconstructed images.

use crate::error::{Error, Result};
use crate::grid::{PixelGrid, StarField};

/// Detection threshold above the median, in units of the MAD.
pub const DETECTION_SIGMA: f64 = 5.0;

/// Separation below which two maxima count as one star, pixels.
pub const MIN_SEPARATION: f64 = 2.0;

/// Magnitudes measured on a reconstruction against the true field.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometryReport {
    pub fluxes: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub true_magnitudes: Vec<f64>,
    /// `|m - m̃| / m̃` per star.
    pub relative_errors: Vec<f64>,
    pub detected: Vec<bool>,
}

impl PhotometryReport {
    /// Mean relative magnitude error over the detected stars (NaN if none).
    pub fn mare(&self) -> f64 {
        let (sum, count) = self
            .relative_errors
            .iter()
            .zip(&self.detected)
            .filter(|(_, d)| **d)
            .fold((0.0, 0usize), |(s, c), (e, _)| (s + e, c + 1));
        if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        }
    }

    pub fn all_detected(&self) -> bool {
        self.detected.iter().all(|&d| d)
    }
}

/// Sum over the `(2 half + 1)²` box around pixel `(x, y)`, clipped to the grid.
pub fn box_sum(grid: &PixelGrid, x: usize, y: usize, half: usize) -> f64 {
    let n = grid.n();
    let mut acc = 0.0;
    for yy in y.saturating_sub(half)..=(y + half).min(n - 1) {
        for xx in x.saturating_sub(half)..=(x + half).min(n - 1) {
            acc += grid.get(xx, yy);
        }
    }
    acc
}

/// `m = -2.5 log10(flux / zero_flux)`, where `zero_flux` is the count level of
/// a magnitude-0 star.
pub fn magnitude(flux: f64, zero_flux: f64) -> Result<f64> {
    if !(flux > 0.0) {
        return Err(Error::InvalidParameter(format!("flux {flux} must be positive")));
    }
    Ok(-2.5 * (flux / zero_flux).log10())
}

/// Magnitude from the 3x3 block around the pixel nearest `(x_mas, y_mas)`.
pub fn star_magnitude(recon: &PixelGrid, x_mas: f64, y_mas: f64, zero_flux: f64) -> Result<f64> {
    let (x, y) = recon
        .pixel_of(x_mas, y_mas)
        .ok_or(Error::OutOfField { x: x_mas, y: y_mas })?;
    magnitude(box_sum(recon, x, y, 1), zero_flux)
}

/// 3x3 box photometry at every true star position, with detection flags.
pub fn box_photometry(recon: &PixelGrid, field: &StarField, zero_flux: f64) -> Result<PhotometryReport> {
    if field.is_empty() {
        return Err(Error::Empty("star field"));
    }
    let detections = detect_stars(recon, field.stars().len(), MIN_SEPARATION)?;
    let mut rep = PhotometryReport {
        fluxes: Vec::new(),
        magnitudes: Vec::new(),
        true_magnitudes: Vec::new(),
        relative_errors: Vec::new(),
        detected: Vec::new(),
    };
    for star in field.stars() {
        let (x, y) = recon
            .pixel_of(star.x, star.y)
            .ok_or(Error::OutOfField { x: star.x, y: star.y })?;
        let flux = box_sum(recon, x, y, 1);
        let m = magnitude(flux, zero_flux).unwrap_or(f64::INFINITY);
        rep.fluxes.push(flux);
        rep.magnitudes.push(m);
        rep.true_magnitudes.push(star.magnitude);
        rep.relative_errors.push((m - star.magnitude).abs() / star.magnitude.abs());
        let hit = detections.iter().any(|&((dx, dy), _)| {
            let ddx = dx as f64 - x as f64;
            let ddy = dy as f64 - y as f64;
            (ddx * ddx + ddy * ddy).sqrt() <= MIN_SEPARATION
        });
        rep.detected.push(hit && flux > 0.0);
    }
    Ok(rep)
}

/// Mean relative magnitude error.
pub fn mare(measured: &[f64], truth: &[f64]) -> Result<f64> {
    if measured.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: measured.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("magnitude list"));
    }
    Ok(measured
        .iter()
        .zip(truth)
        .map(|(m, t)| (m - t).abs() / t.abs())
        .sum::<f64>()
        / truth.len() as f64)
}

/// `‖K - K̃‖ / ‖K̃‖` in the Euclidean norm.
pub fn psf_rmse(psf: &PixelGrid, truth: &PixelGrid) -> Result<f64> {
    psf.same_geometry(truth)?;
    let num: f64 = psf
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = truth.values().iter().map(|v| v * v).sum();
    if !(den > 0.0) {
        return Err(Error::NoSignal(den));
    }
    Ok((num / den).sqrt())
}

/// Median absolute deviation from the median.
pub fn mad(values: &[f64]) -> f64 {
    let med = median(values.to_vec());
    median(values.iter().map(|v| (v - med).abs()).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Up to `k_max` local maxima (8-neighbourhood) more than
/// [`DETECTION_SIGMA`] MADs above the median, brightest first; maxima closer than `min_sep` pixels to an
/// accepted one are dropped. Returns pixel positions and peak values.
pub fn detect_stars(grid: &PixelGrid, k_max: usize, min_sep: f64) -> Result<Vec<((usize, usize), f64)>> {
    if k_max == 0 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    let n = grid.n();
    let thr = median(grid.values().to_vec()) + DETECTION_SIGMA * mad(grid.values());
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..n {
        for x in 0..n {
            let v = grid.get(x, y);
            if v <= thr {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if (dx == 0 && dy == 0) || xx < 0 || yy < 0 || xx >= n as isize || yy >= n as isize {
                        continue;
                    }
                    if grid.get(xx as usize, yy as usize) > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v, x, y));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<((usize, usize), f64)> = Vec::new();
    for (v, x, y) in peaks {
        if kept.len() == k_max {
            break;
        }
        let close = kept.iter().any(|&((kx, ky), _)| {
            let dx = kx as f64 - x as f64;
            let dy = ky as f64 - y as f64;
            (dx * dx + dy * dy).sqrt() < min_sep
        });
        if !close {
            kept.push(((x, y), v));
        }
    }
    Ok(kept)
}

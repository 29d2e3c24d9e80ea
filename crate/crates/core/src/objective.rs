//! Multi-image generalized Kullback-Leibler divergence and its block gradients.
//!
//! PSFs are passed in centered layout (see [`crate::grid`]); gradients with
//! respect to a PSF come back in the same layout.

use std::rc::Rc;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::FftPlan;
use crate::grid::{ObservationSet, PixelGrid};

/// Relative floor applied to the model before quotients and logarithms.
pub const EPS_FLOOR_REL: f64 = 1e-12;

/// Caches the FFT plan, spectra of the fixed blocks and the last models `A_j f + b_j`.
pub struct KlWorkspace<'a> {
    obs: &'a ObservationSet,
    plan: Rc<FftPlan>,
    eps: Vec<f64>,
    psf_spectra: Vec<Vec<Complex64>>,
    obj_spectrum: Option<Vec<Complex64>>,
    model: Vec<Vec<f64>>,
}

impl<'a> KlWorkspace<'a> {
    pub fn new(obs: &'a ObservationSet) -> Self {
        let n = obs.n();
        let eps = obs
            .images()
            .iter()
            .map(|g| (EPS_FLOOR_REL * g.max()).max(f64::MIN_POSITIVE))
            .collect();
        Self {
            obs,
            plan: FftPlan::cached(n),
            eps,
            psf_spectra: Vec::new(),
            obj_spectrum: None,
            model: vec![Vec::new(); obs.p()],
        }
    }

    pub fn observations(&self) -> &ObservationSet {
        self.obs
    }

    /// Last computed model `A_j f + b_j` for image `j` (empty before any evaluation).
    pub fn model(&self, j: usize) -> &[f64] {
        &self.model[j]
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let want = self.obs.n() * self.obs.n();
        if len != want {
            return Err(Error::LengthMismatch {
                expected: want,
                got: len,
            });
        }
        Ok(())
    }

    /// Fixes the PSFs for subsequent object-block evaluations.
    pub fn set_psfs(&mut self, psfs: &[PixelGrid]) -> Result<()> {
        if psfs.len() != self.obs.p() {
            return Err(Error::InvalidParameter(format!(
                "expected {} PSFs, got {}",
                self.obs.p(),
                psfs.len()
            )));
        }
        self.psf_spectra.clear();
        for k in psfs {
            self.check_len(k.len())?;
            self.psf_spectra
                .push(self.plan.spectrum(k.to_wraparound().values()));
        }
        Ok(())
    }

    /// Fixes the object for subsequent PSF-block evaluations.
    pub fn set_object(&mut self, obj: &[f64]) -> Result<()> {
        self.check_len(obj.len())?;
        self.obj_spectrum = Some(self.plan.spectrum(obj));
        Ok(())
    }

    /// Total `J_0` and its gradient with respect to the object, PSFs as last set.
    pub fn object_value_grad(&mut self, obj: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(obj.len())?;
        if self.psf_spectra.len() != self.obs.p() {
            return Err(Error::InvalidParameter("PSFs not set".into()));
        }
        let f_hat = self.plan.spectrum(obj);
        let mut total = 0.0;
        let mut grad_hat = vec![Complex64::new(0.0, 0.0); obj.len()];
        for j in 0..self.obs.p() {
            let (value, mut r_hat) = image_term(
                &self.plan,
                self.obs,
                j,
                self.eps[j],
                &mut self.model[j],
                &f_hat,
                &self.psf_spectra[j],
            )?;
            total += value;
            for ((acc, r), k) in grad_hat.iter_mut().zip(r_hat.drain(..)).zip(&self.psf_spectra[j]) {
                *acc += r * k.conj();
            }
        }
        let grad = self.plan.real_inverse(grad_hat)?;
        Ok((total, grad))
    }

    /// `KL_j` (the only term depending on PSF `j`) and its gradient with respect
    /// to that PSF, given in centered layout; object as last set.
    pub fn psf_value_grad(&mut self, j: usize, psf: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(psf.len())?;
        if j >= self.obs.p() {
            return Err(Error::InvalidParameter(format!("no PSF block {j}")));
        }
        let f_hat = self
            .obj_spectrum
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("object not set".into()))?;
        let n = self.obs.n();
        let wrapped = PixelGrid::from_parts_unchecked(n, 1.0, psf.to_vec()).to_wraparound();
        let k_hat = self.plan.spectrum(wrapped.values());
        let (value, mut r_hat) = image_term(
            &self.plan,
            self.obs,
            j,
            self.eps[j],
            &mut self.model[j],
            f_hat,
            &k_hat,
        )?;
        for (r, f) in r_hat.iter_mut().zip(f_hat) {
            *r *= f.conj();
        }
        let grad_w = self.plan.real_inverse(r_hat)?;
        let grad = PixelGrid::from_parts_unchecked(n, 1.0, grad_w).to_centered();
        Ok((value, grad.into_values()))
    }
}

/// `KL_j` for the model `K_j * f + b_j` (stored into `model`) and the
/// spectrum of `1 - g_j / model`.
fn image_term(
    plan: &FftPlan,
    obs: &ObservationSet,
    j: usize,
    eps: f64,
    model: &mut Vec<f64>,
    f_hat: &[Complex64],
    k_hat: &[Complex64],
) -> Result<(f64, Vec<Complex64>)> {
    let prod: Vec<Complex64> = f_hat.iter().zip(k_hat).map(|(a, b)| a * b).collect();
    let conv = plan.real_inverse(prod)?;
    let g = obs.images()[j].values();
    let b = obs.backgrounds()[j].values();
    let mut value = 0.0;
    let mut resid = Vec::with_capacity(conv.len());
    model.clear();
    for (i, ((&c, &gv), &bv)) in conv.iter().zip(g).zip(b).enumerate() {
        let m = c + bv;
        if m < -eps {
            return Err(Error::NegativeModel { index: i, value: m });
        }
        model.push(m);
        let (t, q) = kl_pixel(gv, m, eps);
        value += t;
        resid.push(Complex64::new(1.0 - q, 0.0));
    }
    plan.forward(&mut resid);
    Ok((value, resid))
}

/// Contribution of one pixel and the floored quotient `g / model`.
#[inline]
fn kl_pixel(g: f64, model: f64, eps: f64) -> (f64, f64) {
    let m = model.max(eps);
    if g > 0.0 {
        let q = g / m;
        (g * q.ln() + m - g, q)
    } else {
        (m, 0.0)
    }
}

/// Generalized KL divergence between data `g` and a model of the same geometry.
pub fn kl_divergence(data: &PixelGrid, model: &PixelGrid) -> Result<f64> {
    data.same_geometry(model)?;
    let eps = (EPS_FLOOR_REL * data.max()).max(f64::MIN_POSITIVE);
    let mut total = 0.0;
    for (i, (&g, &m)) in data.values().iter().zip(model.values()).enumerate() {
        if m < -eps {
            return Err(Error::NegativeModel { index: i, value: m });
        }
        total += kl_pixel(g, m, eps).0;
    }
    Ok(total)
}

/// `J_0`: the sum over images of the KL divergence between `g_j` and `K_j * f + b_j`.
pub fn kl_value(obj: &PixelGrid, psfs: &[PixelGrid], obs: &ObservationSet) -> Result<f64> {
    let mut ws = KlWorkspace::new(obs);
    ws.set_psfs(psfs)?;
    Ok(ws.object_value_grad(obj.values())?.0)
}

/// `2 J_0 / (p N^2)`, close to 1 when the model is the noise-free expectation.
pub fn kl_value_normalized(obj: &PixelGrid, psfs: &[PixelGrid], obs: &ObservationSet) -> Result<f64> {
    Ok(normalize(kl_value(obj, psfs, obs)?, obs))
}

pub fn normalize(j0: f64, obs: &ObservationSet) -> f64 {
    let n = obs.n() as f64;
    2.0 * j0 / (obs.p() as f64 * n * n)
}

pub fn kl_grad_object(obj: &PixelGrid, psfs: &[PixelGrid], obs: &ObservationSet) -> Result<PixelGrid> {
    let mut ws = KlWorkspace::new(obs);
    ws.set_psfs(psfs)?;
    let (_, g) = ws.object_value_grad(obj.values())?;
    obj.with_values(g)
}

/// Gradient of `J_0` with respect to PSF `j` (0-based), centered layout.
pub fn kl_grad_psf(
    obj: &PixelGrid,
    psfs: &[PixelGrid],
    obs: &ObservationSet,
    j: usize,
) -> Result<PixelGrid> {
    let psf = psfs
        .get(j)
        .ok_or_else(|| Error::InvalidParameter(format!("no PSF block {j}")))?;
    let mut ws = KlWorkspace::new(obs);
    ws.set_object(obj.values())?;
    let (_, g) = ws.psf_value_grad(j, psf.values())?;
    psf.with_values(g)
}

//! Flat `section.key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blind::{BlindConfig, InitKind};
use crate::error::{Error, Result};
use crate::grid::{Star, StarField};
use crate::skysim::{HaloShape, NoiseModel, SimulationSpec, TelescopeModel};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("telescope.kind", "single | fizeau; selects the preset the other telescope keys override"),
    ("telescope.diameter", "aperture diameter, m"),
    ("telescope.baseline", "center-to-center aperture separation, m"),
    ("telescope.wavelength", "wavelength, m"),
    ("telescope.pixel_scale", "detector pixel, mas"),
    ("telescope.efficiency", "detected photon fraction"),
    ("telescope.oversampling", "pupil samples per detector pixel"),
    ("noise.ron_sigma", "read-out noise per frame, e-/px"),
    ("noise.saturation", "counts per frame at the brightest pixel"),
    ("noise.background_mag", "sky brightness, mag/arcsec^2"),
    ("noise.flux_zero_point", "photons/s/m^2 at magnitude 0"),
    ("noise.frames", "frames summed per image"),
    ("field.n", "grid size (power of two)"),
    ("field.stars", "'x,y,m; x,y,m' with offsets in mas"),
    ("sim.strehl", "Strehl ratio of the simulated PSFs"),
    ("sim.halo_fwhm", "halo FWHM along the major axis, mas"),
    ("sim.halo_minor_fwhm", "halo FWHM along the minor axis, mas"),
    ("sim.halo_angle", "halo major-axis angle, degrees"),
    ("sim.angles", "baseline angles of a Fizeau sequence, degrees"),
    ("sim.seed", "noise seed"),
    ("blind.outer_iters", "alternating-minimization passes"),
    ("blind.inner_obj", "SGP iterations on the object per pass"),
    ("blind.inner_psf", "SGP iterations on each PSF per pass"),
    ("blind.init", "autocorrelation | pedestal"),
    ("blind.freeze_psf", "true keeps the PSFs fixed"),
    ("blind.rel_tol", "stop on a smaller relative objective change"),
    ("blind.checkpoint_every", "write the iterate every k passes"),
    ("blind.sgp_log", "true writes every inner step"),
    ("solver.alpha_init", "initial step length"),
    ("solver.alpha_min", "smallest step length"),
    ("solver.alpha_max", "largest step length"),
    ("solver.tau", "initial alternation threshold"),
    ("solver.memory", "BB2 memory length"),
    ("solver.beta", "backtracking factor"),
    ("solver.gamma", "sufficient-decrease constant"),
    ("solver.max_backtracks", "backtracks before giving up"),
    ("solver.object_l1", "lower scaling bound, object block"),
    ("solver.object_l2", "upper scaling bound, object block"),
    ("solver.psf_l1", "lower scaling bound, PSF blocks"),
    ("solver.psf_l2", "upper scaling bound, PSF blocks"),
    ("input.dir", "directory with simulated or user data"),
    ("output.dir", "directory for results"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, (usize, String)>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in super::parse_key_values(text)? {
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key '{key}'"),
                });
            }
            if cfg.values.insert(key.clone(), (line, value)).is_some() {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides one key, as a command-line flag would.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config {
                line: 0,
                msg: format!("unknown key '{key}'"),
            });
        }
        self.values.insert(key.to_string(), (0, value.into()));
        self.validate()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Config {
                line: *line,
                msg: format!("cannot parse '{v}' for {key}"),
            }),
        }
    }

    fn bad(&self, key: &str, msg: String) -> Error {
        Error::Config {
            line: self.values.get(key).map_or(0, |(l, _)| *l),
            msg,
        }
    }

    /// Builds every typed view once so that bad values surface at load time.
    fn validate(&self) -> Result<()> {
        self.telescope()?.validate().map_err(|e| self.bad("telescope.kind", e.to_string()))?;
        self.noise()?.validate().map_err(|e| self.bad("noise.ron_sigma", e.to_string()))?;
        self.n_frames()?;
        self.stars()?;
        self.angles()?;
        self.halo()?;
        self.blind_config()?.validate().map_err(|e| self.bad("blind.outer_iters", e.to_string()))?;
        let n = self.n()?;
        if !n.is_power_of_two() {
            return Err(self.bad("field.n", format!("field.n = {n} is not a power of two")));
        }
        let sr = self.strehl()?;
        if !(sr > 0.0 && sr <= 1.0) {
            return Err(self.bad("sim.strehl", format!("Strehl {sr} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn is_fizeau(&self) -> Result<bool> {
        match self.get("telescope.kind").unwrap_or("single") {
            "single" => Ok(false),
            "fizeau" => Ok(true),
            other => Err(self.bad("telescope.kind", format!("unknown telescope kind '{other}'"))),
        }
    }

    pub fn telescope(&self) -> Result<TelescopeModel> {
        let mut t = if self.is_fizeau()? {
            TelescopeModel::fizeau()
        } else {
            TelescopeModel::single()
        };
        if let Some(v) = self.typed("telescope.diameter")? {
            t.aperture_diameter = v;
        }
        if let Some(v) = self.typed("telescope.baseline")? {
            t.baseline = v;
        }
        if let Some(v) = self.typed("telescope.wavelength")? {
            t.wavelength = v;
        }
        if let Some(v) = self.typed("telescope.pixel_scale")? {
            t.pixel_scale = v;
        }
        if let Some(v) = self.typed("telescope.efficiency")? {
            t.efficiency = v;
        }
        if let Some(v) = self.typed("telescope.oversampling")? {
            t.oversampling = v;
        }
        Ok(t)
    }

    pub fn noise(&self) -> Result<NoiseModel> {
        let mut m = NoiseModel::default();
        if let Some(v) = self.typed("noise.ron_sigma")? {
            m.ron_sigma = v;
        }
        if let Some(v) = self.typed("noise.saturation")? {
            m.saturation = v;
        }
        if let Some(v) = self.typed("noise.background_mag")? {
            m.background_mag = v;
        }
        if let Some(v) = self.typed("noise.flux_zero_point")? {
            m.flux_zero_point = v;
        }
        Ok(m)
    }

    pub fn n_frames(&self) -> Result<u32> {
        let f = self.typed("noise.frames")?.unwrap_or(10);
        if f == 0 {
            return Err(self.bad("noise.frames", "noise.frames must be positive".into()));
        }
        Ok(f)
    }

    pub fn n(&self) -> Result<usize> {
        Ok(self.typed("field.n")?.unwrap_or(128))
    }

    pub fn strehl(&self) -> Result<f64> {
        Ok(self.typed("sim.strehl")?.unwrap_or(0.81))
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.typed("sim.seed")?.unwrap_or(0))
    }

    /// Defaults to an equal-magnitude pair 240 mas apart.
    pub fn stars(&self) -> Result<Vec<Star>> {
        let Some(text) = self.get("field.stars") else {
            return Ok(vec![Star::new(-120.0, 0.0, 15.0), Star::new(120.0, 0.0, 15.0)]);
        };
        let mut stars = Vec::new();
        for entry in text.split(';').map(str::trim).filter(|e| !e.is_empty()) {
            let parts: Vec<f64> = entry
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| self.bad("field.stars", format!("cannot parse star '{entry}'")))?;
            if parts.len() != 3 {
                return Err(self.bad("field.stars", format!("star '{entry}' needs x,y,m")));
            }
            stars.push(Star::new(parts[0], parts[1], parts[2]));
        }
        if stars.is_empty() {
            return Err(self.bad("field.stars", "field.stars lists no star".into()));
        }
        Ok(stars)
    }

    pub fn field(&self) -> Result<StarField> {
        let t = self.telescope()?;
        StarField::new(self.stars()?, 0.0, self.n()?, t.pixel_scale)
    }

    pub fn angles(&self) -> Result<Vec<f64>> {
        let Some(text) = self.get("sim.angles") else {
            return Ok(vec![0.0, 60.0, 120.0]);
        };
        let angles: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.bad("sim.angles", format!("cannot parse angles '{text}'")))?;
        if angles.len() != 3 {
            return Err(self.bad("sim.angles", "sim.angles needs three values".into()));
        }
        Ok(angles)
    }

    pub fn halo(&self) -> Result<Option<HaloShape>> {
        let Some(major) = self.typed::<f64>("sim.halo_fwhm")? else {
            return Ok(None);
        };
        Ok(Some(HaloShape {
            fwhm_major: major,
            fwhm_minor: self.typed("sim.halo_minor_fwhm")?.unwrap_or(major),
            angle: self.typed("sim.halo_angle")?.unwrap_or(0.0),
        }))
    }

    pub fn simulation_spec(&self) -> Result<SimulationSpec> {
        Ok(SimulationSpec {
            telescope: self.telescope()?,
            noise: self.noise()?,
            n: self.n()?,
            strehl: self.strehl()?,
            halo: self.halo()?,
            n_frames: self.n_frames()?,
            seed: self.seed()?,
        })
    }

    pub fn blind_config(&self) -> Result<BlindConfig> {
        let mut c = BlindConfig::default();
        if let Some(v) = self.typed("blind.outer_iters")? {
            c.outer_iters = v;
        }
        if let Some(v) = self.typed("blind.inner_obj")? {
            c.inner_obj = v;
        }
        if let Some(v) = self.typed("blind.inner_psf")? {
            c.inner_psf = v;
        }
        if let Some(v) = self.get("blind.init") {
            c.init_kind = InitKind::from_str(v).map_err(|e| self.bad("blind.init", e.to_string()))?;
        }
        if let Some(v) = self.typed("blind.freeze_psf")? {
            c.freeze_psf = v;
        }
        c.rel_tol = self.typed("blind.rel_tol")?;
        c.checkpoint_every = self.typed("blind.checkpoint_every")?;
        c.seed = self.seed()?;
        let s = &mut c.sgp;
        if let Some(v) = self.typed("solver.alpha_init")? {
            s.alpha_init = v;
        }
        if let Some(v) = self.typed("solver.alpha_min")? {
            s.alpha_min = v;
        }
        if let Some(v) = self.typed("solver.alpha_max")? {
            s.alpha_max = v;
        }
        if let Some(v) = self.typed("solver.tau")? {
            s.tau_init = v;
        }
        if let Some(v) = self.typed("solver.memory")? {
            s.bb2_memory = v;
        }
        if let Some(v) = self.typed("solver.beta")? {
            s.beta = v;
        }
        if let Some(v) = self.typed("solver.gamma")? {
            s.gamma = v;
        }
        if let Some(v) = self.typed("solver.max_backtracks")? {
            s.max_backtracks = v;
        }
        c.object_scaling = self.pair("solver.object_l1", "solver.object_l2")?;
        c.psf_scaling = self.pair("solver.psf_l1", "solver.psf_l2")?;
        Ok(c)
    }

    fn pair(&self, lo: &str, hi: &str) -> Result<Option<(f64, f64)>> {
        match (self.typed::<f64>(lo)?, self.typed::<f64>(hi)?) {
            (None, None) => Ok(None),
            (Some(a), Some(b)) => Ok(Some((a, b))),
            _ => Err(self.bad(lo, format!("{lo} and {hi} must be given together"))),
        }
    }

    pub fn sgp_log(&self) -> Result<bool> {
        Ok(self.typed("blind.sgp_log")?.unwrap_or(false))
    }

    pub fn input_dir(&self) -> PathBuf {
        PathBuf::from(self.get("input.dir").unwrap_or("data"))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("output.dir").unwrap_or("out"))
    }

    /// The explicitly set keys, one per line, in key order.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, (_, v))| format!("{k} = {v}\n"))
            .collect()
    }
}

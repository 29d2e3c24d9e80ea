//! Runs the same blind problem from the autocorrelation and the pedestal PSF
//! and compares where each one ends up.

use blind_deconv::blind::{run_blind, BlindConfig, InitKind};
use blind_deconv::metrics::{box_photometry, detect_stars, MIN_SEPARATION};
use blind_deconv::skysim::{simulate_single, SimulationSpec};
use blind_deconv::{Star, StarField};

fn main() -> blind_deconv::Result<()> {
    let spec = SimulationSpec::single(64, 0.8, 11);
    let d = spec.telescope.resolution_limit();
    let field = StarField::new(
        vec![Star::new(-d / 2.0, 0.0, 15.0), Star::new(d / 2.0, 0.0, 16.0)],
        0.0,
        spec.n,
        spec.telescope.pixel_scale,
    )?;
    let sim = simulate_single(&field, &spec)?;
    for init in [InitKind::Autocorrelation, InitKind::Pedestal] {
        let cfg = BlindConfig {
            outer_iters: 60,
            init_kind: init,
            ..BlindConfig::default()
        };
        let r = run_blind(&sim.observations, &sim.ideal_psfs, cfg)?;
        let found = detect_stars(&r.object, 2, MIN_SEPARATION)?;
        let report = box_photometry(&r.object, &sim.field, sim.zero_flux)?;
        println!(
            "{init:<16} objective {:.6}  detections {}  detected {:?}",
            r.final_objective().unwrap_or(f64::NAN),
            found.len(),
            report.detected
        );
    }
    Ok(())
}

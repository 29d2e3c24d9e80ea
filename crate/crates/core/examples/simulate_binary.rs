//! Simulates an equal-magnitude binary through one 8.4 m aperture and reports
//! the exposure, background and the noise statistic of the data.

use blind_deconv::objective::kl_value_normalized;
use blind_deconv::skysim::{simulate_single, SimulationSpec};
use blind_deconv::{Star, StarField};

fn main() -> blind_deconv::Result<()> {
    let spec = SimulationSpec::single(128, 0.81, 42);
    let field = StarField::new(
        vec![Star::new(-120.0, 0.0, 15.0), Star::new(120.0, 0.0, 15.0)],
        0.0,
        spec.n,
        spec.telescope.pixel_scale,
    )?;
    let sim = simulate_single(&field, &spec)?;
    let obs = &sim.observations;

    println!("exposure per frame   {:.2} s", sim.exposure_time);
    println!("frames               {}", obs.n_frames());
    println!("background per pixel {:.1}", obs.backgrounds()[0].values()[0]);
    println!("PSF cap              {:.5}", obs.psf_caps()[0]);
    println!("data peak            {:.1}", obs.images()[0].max());

    let mut object = vec![0.0; spec.n * spec.n];
    let zero = sim.zero_flux;
    for s in field.stars() {
        let h = (spec.n / 2) as f64;
        let x = (h + s.x / spec.telescope.pixel_scale) as usize;
        let y = (h + s.y / spec.telescope.pixel_scale) as usize;
        object[y * spec.n + x] += zero * 10f64.powf(-0.4 * s.magnitude);
    }
    let object = obs.images()[0].with_values(object)?;
    let stat = kl_value_normalized(&object, &sim.true_psfs, obs)?;
    println!("2 J0 / N^2 at truth  {stat:.4}");
    Ok(())
}

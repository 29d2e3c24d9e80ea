//! Scaled gradient projection on a small Poisson denoising problem: the
//! objective decreases monotonically while the iterates stay feasible.

use blind_deconv::sgp::{run_sgp, SgpParams};
use blind_deconv::{ConstraintSpec, PixelGrid};

fn main() -> blind_deconv::Result<()> {
    let n = 8;
    let data: Vec<f64> = (0..n * n).map(|i| 5.0 + 40.0 * ((i as f64) * 0.3).sin().powi(2)).collect();
    let bg = 2.0;
    let flux: f64 = data.iter().map(|g| g - bg).sum();

    let mut kl = |x: &[f64]| -> blind_deconv::Result<(f64, Vec<f64>)> {
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        for ((gi, g), &xi) in grad.iter_mut().zip(&data).zip(x) {
            let m = xi + bg;
            value += g * (g / m).ln() + m - g;
            *gi = 1.0 - g / m;
        }
        Ok((value, grad))
    };

    let start = PixelGrid::filled(n, 1.0, flux / (n * n) as f64)?;
    let cons = ConstraintSpec::nonnegative_with_sum(flux, n * n)?;
    let (x, log) = run_sgp(&start, &mut kl, &cons, 40, (1e-6, 1e6), SgpParams::default())?;
    for r in log.iter().step_by(5) {
        println!(
            "iter {:>3}  J = {:.6e}  alpha = {:.3e}  backtracks {}",
            r.iteration, r.objective, r.alpha, r.backtracks
        );
    }
    println!("sum {:.6} (target {flux:.6}), min {:.3e}", x.sum(), x.min());
    Ok(())
}

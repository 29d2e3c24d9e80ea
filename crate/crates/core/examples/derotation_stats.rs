//! Rotating a Poisson field: bilinear keeps the mean and smooths the noise,
//! nearest-neighbour keeps the variance.

use blind_deconv::fourier::{rotate_filled, Interpolation};
use blind_deconv::PixelGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

fn stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn main() -> blind_deconv::Result<()> {
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poisson = Poisson::new(1000.0).expect("positive rate");
    let grid = PixelGrid::new(n, 1.0, (0..n * n).map(|_| poisson.sample(&mut rng)).collect())?;
    let (m0, v0) = stats(grid.values());
    println!("original  mean {m0:.2}  variance {v0:.1}");
    for (name, method) in [("bilinear", Interpolation::Bilinear), ("nearest", Interpolation::Nearest)] {
        let r = rotate_filled(&grid, 60.0, method, f64::NAN);
        let inside: Vec<f64> = r.values().iter().copied().filter(|v| v.is_finite()).collect();
        let (m, v) = stats(&inside);
        println!("{name:<9} mean {m:.2}  variance {v:.1}  ({:.3} of original)", v / v0);
    }
    Ok(())
}

pub mod blind;
pub mod error;
pub mod fourier;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod projection;
pub mod sgp;
pub mod skysim;

pub use error::{Error, Result};
pub use grid::{flux_constant, psf_cap, Bound, ConstraintSpec, ObservationSet, PixelGrid, Star, StarField};

//! Spectral-Galerkin solver for the coupled quasi-static Biot-Stokes
//! filtration problem with Beavers-Joseph-Saffman slip on the interface.

pub mod assembly;
pub mod config;
pub mod energy;
pub mod error;
pub mod greens;
pub mod integrator;
pub mod io;
pub mod limit;
pub mod mesh;
pub mod oracle;
pub mod spectral;
pub mod verification;

pub use error::{Error, Result};
pub use num_complex::Complex64;

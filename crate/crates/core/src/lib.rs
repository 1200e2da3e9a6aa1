//! Inducing schemes, hyperbolic times and SRB measure estimation for
//! partially hyperbolic maps of the two-torus.

pub mod app;
pub mod census;
pub mod cones;
pub mod config;
pub mod error;
pub mod hyptimes;
pub mod leaf;
pub mod partition;
pub mod rng;
pub mod systems;
pub mod tower;

pub use error::{GmyError, Result};
pub use systems::{Point, System, Vec2};

//! Generalized conditional gradient and fictitious play for discrete potential
//! mean field games on the flat torus, with congestion through a smoothing
//! kernel and a price coupling on aggregate flux.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fokker_planck;
pub mod gcg;
pub mod grid;
pub mod hjb;
pub mod model;

pub use error::{Error, Result};
pub use grid::{ScalarField, TorusGrid, VectorField};

//! Matrix-variate skew-t regression for longitudinal multivariate responses.

pub mod bootstrap;
pub mod cm;
pub mod dec;
pub mod engine;
pub mod error;
pub mod estep;
pub mod info;
pub mod io;
pub mod model;
pub mod mvst;
pub mod numeric;
pub mod rng;
pub mod simgen;
pub mod special;

pub use error::{Error, Result};

//! Implicit displacement fields: a smooth base signed distance network plus
//! a bounded high-frequency displacement along the base normal.

pub mod analytic;
pub mod error;
pub mod jet;
pub mod loss;
pub mod model;
pub mod optim;
pub mod real;
pub mod siren;
pub mod tape;
pub mod theory;
pub mod train;
pub mod transfer;

pub use error::{IdfError, Result};
pub use real::{Precision, Real};

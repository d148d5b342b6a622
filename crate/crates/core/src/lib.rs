pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod federation;
pub mod gcd;
pub mod nuisance;
pub mod numeric;
pub mod objective;
pub mod simgen;
pub mod smoothing;

pub use error::{Error, Result};

pub mod bessel;
pub mod bound_spectrum;
pub mod channels;
pub mod error;
pub mod mqdt_engine;
pub mod numerov_propagator;
pub mod potential;
pub mod qdt_special;
pub mod system_model;

pub use error::{Error, Result};

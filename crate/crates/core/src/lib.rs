pub mod compose;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod oracle;
pub mod plot;
pub mod provenance;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod scorefield;
pub mod train;

pub use error::{Error, Result};

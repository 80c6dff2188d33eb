//! Scenarios, file formats and experiment harness on top of `gprc-core`.

pub mod error;
pub mod harness;
pub mod io;
pub mod ode;
pub mod scenario;

pub use error::{Error, Result};

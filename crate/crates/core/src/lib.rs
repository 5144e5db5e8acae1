pub mod analysis;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod io;
pub mod numcore;
pub mod sufficiency;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

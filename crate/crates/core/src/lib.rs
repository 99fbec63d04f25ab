pub mod clustering;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod run;
pub mod synth;

pub use error::{Error, Result};

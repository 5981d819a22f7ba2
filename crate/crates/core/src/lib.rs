pub mod align;
pub mod autograd;
pub mod cgae;
pub mod error;
pub mod hfa;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rqvae;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

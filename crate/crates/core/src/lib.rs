pub mod audio;
pub mod autodiff;
pub mod cm;
pub mod datagen;
pub mod distill;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sslcore;
pub mod tensorfile;

pub use error::{Error, Result};

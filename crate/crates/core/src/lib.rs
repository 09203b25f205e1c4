pub mod archive;
pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod latent_model;
pub mod losses;
pub mod metrics;
pub mod motion_transfer;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

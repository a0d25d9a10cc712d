pub mod data;
pub mod baselines;
pub mod config;
pub mod error;
pub mod finetune;
pub mod model;
pub mod pretext;
pub mod rehearsal;
pub mod rng;
pub mod scheduler;
pub mod tokenizers;

pub use error::{Error, Result};

pub mod ablation;
pub mod audio;
pub mod autodiff;
pub mod error;
pub mod fixture;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{MelleError, Result};

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod gradsuite;
pub mod layers;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

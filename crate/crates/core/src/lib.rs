pub mod ablation;
pub mod analysis;
pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod gate;
pub mod metrics;
pub mod models;
pub mod params;
pub mod text;
pub mod train;

pub use error::{Error, Result};

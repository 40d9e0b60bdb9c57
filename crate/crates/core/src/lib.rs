pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod influence;
pub mod kmeans;
pub mod memory;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod stats;
pub mod suite;
pub mod trainer;

pub use error::{Error, Result};

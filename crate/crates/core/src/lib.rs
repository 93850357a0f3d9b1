//! Synthesis of optical and SAR remote-sensing imagery from land-cover maps
//! fused with auxiliary rasters (DEM or SAR), plus the segmentation-based
//! evaluation harness and input editing used to probe the trained generators.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod editing;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod segmentation;
pub mod training;

pub use error::{Error, Result};

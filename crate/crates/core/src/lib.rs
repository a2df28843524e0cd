pub mod augmentation;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod heatmap_head;
pub mod losses;
pub mod networks;
pub mod trainer;

pub use error::{FraError, Result};

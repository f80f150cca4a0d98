pub mod backbone;
pub mod container;
pub mod data;
pub mod error;
pub mod graph;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};

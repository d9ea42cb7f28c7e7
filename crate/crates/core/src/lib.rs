pub mod assets;
pub mod augment;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod generators;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

pub mod bodymodel;
pub mod camera;
pub mod datagen;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numkernel;
pub mod trainer;

pub use error::{Error, Result};

pub mod annotate;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod fuse;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod plan;
pub mod raster;
pub mod sim;

pub use error::{Error, Result};

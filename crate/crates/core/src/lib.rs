//! Learned compression for multispectral image sequences.

pub mod error;
pub mod fmath;
pub mod grad;

pub use error::{Error, Result};
pub mod dataio;
pub mod coder;
pub mod entropy;
pub mod transforms;
pub mod temporal;
pub mod flexrate;
pub mod codec;
pub mod trainer;
pub mod metrics;
pub mod inpaint;

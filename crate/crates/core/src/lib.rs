mod binio;
pub mod cluster;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod proxy;
pub mod rng;
pub mod special;
pub mod spectral;
pub mod vmf;

pub use error::{Error, Result};

pub mod bench;
pub mod bitframe;
pub mod cascade;
pub mod error;
pub mod metrics;
pub mod params;
pub mod paritytree;
pub mod pipeline;
pub mod transport;

pub use error::{Error, Result};

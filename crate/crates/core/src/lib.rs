pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evalbench;
pub mod meta;
pub mod model;
pub mod params;
pub mod seed;
pub mod synth;
pub mod textcodec;
pub mod train;

pub use error::{Error, Result};

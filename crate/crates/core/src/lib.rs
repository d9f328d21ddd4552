pub mod cluster;
pub mod dimred;
pub mod error;
pub mod gam;
pub mod ingest;
pub mod linalg;
pub mod pipeline;
pub mod plume;
pub mod select;
pub mod stats;

pub use error::{Error, Result};

pub mod bloom;
pub mod edge;
pub mod error;
pub mod fog;
pub mod harness;
pub mod net;
pub mod overlay;
pub mod pairs;
pub mod placement;
pub mod stats;
pub mod types;
pub mod wire;

pub use error::{Error, Result};
pub use types::*;

pub mod error;
pub mod eval;
pub mod graph;
pub mod imu;
pub mod io;
pub mod manifold;
pub mod pipeline;
pub mod sim;
pub mod toa;

pub use error::{Error, Result};

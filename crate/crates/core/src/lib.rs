pub mod curriculum;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod latency;
pub mod model;
pub mod optim;
pub mod rl;
pub mod rng;
pub mod tensor;
pub mod thought;

pub use error::{Error, Result};

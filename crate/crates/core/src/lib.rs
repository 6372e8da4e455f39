pub mod benchmark;
pub mod certificates;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod planner;
pub mod riccati;
pub mod simulator;
pub mod system;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};

pub mod error;
pub mod gating;
pub mod fsutil;
pub mod grad;
pub mod grouping;
pub mod harmony;
pub mod harness;
pub mod policy;

pub use error::{Error, Result};
pub mod taskenv;

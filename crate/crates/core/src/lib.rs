//! Secure federated training with pairwise client groups.

pub mod error;
pub mod fss;
pub mod grouping;
pub mod netsim;
pub mod neural;
pub mod protocol;
pub mod ring;
pub mod secure;
pub mod sharing;
pub mod tensor;
pub mod transcript;

pub use error::{Error, Result};

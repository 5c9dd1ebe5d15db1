//! Time-aware social sequential recommendation.
//!
//! The crate combines a social heterogeneous graph embedding, a mutually
//! exciting temporal attention over friends' events, a self-exciting temporal
//! attention over the user's own sequence, and joint training with a pairwise
//! ranking loss plus a point-process likelihood.

pub mod data;
pub mod diffmath;
pub mod error;
pub mod evalcli;
pub mod excitation;
pub mod model;
pub mod socialgraph;
pub mod training;

pub use error::{Error, Result};

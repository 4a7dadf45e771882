//! Federated dynamic ensemble selection.
//!
//! Each client trains local classifiers, exchanges them with every peer,
//! and learns per-sample classifier competence with a heterogeneous graph
//! attention network built over the decision space of the shared pool.

pub mod error;
pub mod basepool;
pub mod datagen;
pub mod ensemble;
pub mod graphbuild;
pub mod harness;
pub mod metalearner;
pub mod numkernel;

pub use error::{Error, Result};

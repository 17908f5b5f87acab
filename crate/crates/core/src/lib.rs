//! Continuous knowledge base for neural-network function knowledge.
//!
//! Trained networks are treated as parameterized functions. A shared set of
//! learnable memory matrices (the knowledge base) stores what they compute:
//! importing trains the base plus a per-model attention interface to
//! reproduce the model's function on real inputs; exporting trains a fresh
//! model to reproduce the frozen interface. Joint import fuses several
//! models into one base. The `ckb` binary drives end-to-end experiments
//! from flat config files.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod interface;
pub mod kb;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{CkbError, Result};
pub use kb::{kb_handle, KbConfig, KbHandle, KnowledgeBase};
pub use rng::SeededRng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

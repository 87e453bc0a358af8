//! Simulation of asynchronous gossip projected-subgradient optimization under
//! insider data-injection attacks, together with the score-based and neural
//! detectors that monitor it.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command line
//! and experiment orchestration live in the `dpsguard` companion crate.
#![no_std]

extern crate alloc;

pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod gossip_train;
pub mod linalg;
pub mod neural;
pub mod protocol;
pub mod rng;
pub mod score;
pub mod topology;

pub use error::{Error, Result};
pub use topology::{AttackerMask, Graph};

//! Deterministic simulator core for prompt-gated open-set federated active
//! learning.
//!
//! Clients hold noisy unlabeled pools mixing in-distribution (ID) classes with
//! out-of-distribution (OOD) contamination. Each round they gate their pool
//! with a prompt-conditioned zero-shot classifier, spend a labeling budget on
//! the gated part via a pluggable acquisition strategy, and locally train both
//! the prompt tokens and a shared linear probe. A server federates the global
//! prompt tokens and the probe with weighted averaging; client-local tokens
//! never leave the client.
//!
//! The crate is `no_std` + `alloc`: all algorithmic state lives in memory and
//! every operation is a pure function of its inputs and an explicit seeded
//! RNG stream, so runs are bit-reproducible regardless of client scheduling.
//! File formats, configuration, and the CLI live in the companion `fedgate`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod acquisition;
pub mod config;
pub mod embedding;
pub mod error;
pub mod federation;
pub mod gate;
pub mod math;
pub mod metrics;
pub mod probe;
pub mod prompt;
pub mod rng;
pub mod wire;

pub use error::{Error, Result};

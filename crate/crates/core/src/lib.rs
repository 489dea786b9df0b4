//! Desk-scale text-to-motion diffusion with preference-based alignment.
//!
//! The crate trains small motion generators on a synthetic skeleton domain,
//! builds a ranked preference dataset from their generations, aligns a
//! generator against a frozen reference with a diffusion preference loss,
//! and evaluates everything with the standard text-to-motion metric suite.

pub mod artifacts;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod domain;
pub mod dpo;
pub mod error;
pub mod hashing;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod opt;
pub mod oracle;
pub mod pam;
pub mod pipeline;
pub mod ranker;
pub mod seeding;
pub mod vae;

pub use error::{Error, Result};

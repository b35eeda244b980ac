//! Stage-aware reward shaping and preference optimization for a small
//! kinematic manipulation benchmark.
//!
//! The crate bundles a deterministic simulator ([`env`]), the stage
//! separator and calculator ([`stare`]), a tiny autodiff MLP stack ([`nn`]),
//! the three training phases ([`imitation`], [`preference`], [`interact`]),
//! a tabular shaping oracle ([`oracle`]) and the run orchestration
//! ([`pipeline`]).

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imitation;
pub mod io;
pub mod interact;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod preference;
pub mod seeding;
pub mod stare;

pub use error::{Error, Result};

//! Simulation and analysis of interactive games with hidden feedback
//! couplings: dialogues, verbalization, comments, tactical games,
//! self-organization, prediction, perception games and multi-system synthesis.

pub mod dialogue;
pub mod engine;
pub mod error;
pub mod expr;
pub mod linalg;
pub mod multisystem;
pub mod perception;
pub mod prediction;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod selforg;
pub mod tactics;
pub mod verbalization;

pub use error::{Error, Result};

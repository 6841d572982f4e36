//! One-shot multi-task architecture search for branched window-attention
//! encoder-decoder networks.

pub mod container;
pub mod error;
pub mod evolution_search;
pub mod numerics;
pub mod optim;
pub mod orchestrator;
pub mod search_space;
pub mod skeleton_search;
pub mod supernet;
pub mod tasks;
pub mod transformer;

pub use error::{Error, Result};

//! Two-view dense depth and relative pose estimation.
//!
//! Given a target/source image pair, the solver maximizes the likelihood of
//! correlation observations looked up in an all-pairs correlation pyramid,
//! under a per-pixel Gaussian-Uniform mixture. Depth (inverse-depth
//! internally) and the 6-parameter pose are refined jointly by
//! disturbance-based likelihood ascent with a backtracking line search.

pub mod correlation;
pub mod error;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod likelihood;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};

//! Hallucination-risk estimation from an LLM's last-token internal state.
//!
//! The pipeline reads activation dumps and their manifest ([`store`]),
//! derives labels from metric scores ([`labeling`]), trains a gated-MLP probe
//! ([`probe`], [`trainer`]) and evaluates it ([`metrics`]) alongside
//! query-only [`baselines`]. [`feature_select`] ranks single neurons by
//! mutual information and [`attribution`] renders token-level heatmaps.

pub mod attribution;
pub mod baselines;
pub mod error;
pub mod feature_select;
pub mod labeling;
pub mod matrix;
pub mod metrics;
pub mod probe;
pub mod store;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;

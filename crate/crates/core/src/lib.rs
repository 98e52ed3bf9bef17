//! Feature attribution and faithfulness evaluation for clinical
//! time-series classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation with standard, DeepLIFT-Rescale
//!   and GIM propagation rules.
//! - [`data`]: patient visit sequences, a synthetic generator with planted
//!   ground truth, and the JSONL interchange format.
//! - [`model`]: transformer, stage-aware recurrent and hybrid classifiers,
//!   training and evaluation metrics.
//! - [`attribution`]: Kernel SHAP, LIME, the random baseline, Integrated
//!   Gradients, DeepLIFT, GIM, Gradient×Input and gradient-weighted
//!   attention rollout.
//! - [`faithfulness`]: comprehensiveness, sufficiency, composite scores,
//!   win matrices and runtime extrapolation.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod faithfulness;
pub mod model;

pub use error::{Error, Result};

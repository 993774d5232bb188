//! Multi-modal training lab.
//!
//! Shapley-based mono-modal attribution ([`shapley`]), adaptive gradient
//! modulation ([`agm`]), mono-modal concepts ([`concept`]) and
//! competition-strength probing ([`probe`]), built on a small reverse-mode
//! autodiff core ([`tensor`]) and exercised on synthetic data ([`data`])
//! through a reproducible experiment harness ([`harness`]).

pub mod agm;
pub mod concept;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod probe;
pub mod rng;
pub mod shapley;
pub mod tensor;

pub use error::{Error, Result};

//! Multi-modal clinical prediction over a per-batch patient graph.
//!
//! EHR time series and timestamped chest X-ray features are encoded, joined
//! into a heterogeneous patient graph (EHR-EHR similarity edges, CXR-EHR
//! temporal edges) and fused per disease with attention queried by
//! label-correlation prototypes. Everything runs on a small f64
//! reverse-mode autodiff tape in [`diffmath`].

pub mod aggregation;
pub mod diffmath;
pub mod disease_corr;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod pgraph;

pub use error::{Error, Result};

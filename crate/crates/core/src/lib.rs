//! Cross-silo federated learning for skeleton-sequence behavior recognition.
//!
//! The crate covers the whole optimization stack: a small frequency-aware
//! classifier ([`model`]), synthetic multi-site data ([`data`]), six
//! federated strategies ([`strategies`]), a deterministic round driver
//! ([`orchestrator`]) and a TCP deployment of the same rounds ([`netproto`]).

pub mod data;
pub mod model;
pub mod netproto;
pub mod orchestrator;
pub mod params;
pub mod strategies;

pub use params::{axpy, dot, filter_merge, zeros_like, Entry, LayerTag, ParamError, ParameterSet};

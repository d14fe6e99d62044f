//! Benchmark toolkit that measures source-level privacy leakage of
//! synthetic network packet traces via a membership-inference attack and
//! mitigates it with a generator-agnostic obfuscation defense.
//!
//! The pipeline, end to end: ingest a trace ([`trace`]), split it by time,
//! cut it into per-source sliding-window chunks ([`chunk`]), train a
//! contrastive traffic encoder ([`encoder`], [`trainer`]), calibrate a
//! distance threshold and run binomial membership inference ([`attack`]),
//! score synthetic traces for fidelity ([`fidelity`]), and obfuscate leaky
//! synthetic data under repair constraints ([`defense`]). [`simgen`] emits
//! controlled traces with known per-source behavior for evaluation, and
//! [`baselines`] holds the flow-classifier comparison attack.

pub mod attack;
pub mod autodiff;
pub mod baselines;
pub mod chunk;
pub mod defense;
pub mod encoder;
pub mod error;
pub mod fidelity;
pub mod pcap;
pub mod simgen;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};

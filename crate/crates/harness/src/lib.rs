//! Experiment harness for the fusion detector: configuration, metrics,
//! experiment drivers, and plotting. The `fusionq` binary is a thin CLI over
//! [`experiments`].

pub mod config;
pub mod experiments;
pub mod metrics;
pub mod plot;

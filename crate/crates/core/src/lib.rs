//! Progressive coarse-to-fine expert pre-alignment with a stochastic
//! residual feature cache, momentum-contrast queues and top-k
//! adapter-reweighted expert fusion feeding a small decoder LM.

pub mod alignment;
pub mod autodiff;
pub mod data;
pub mod experts;
pub mod harness;
pub mod metrics;
pub mod moco;
pub mod moe;
pub mod optim_config;
pub mod params;
pub mod seeds;
pub mod training;

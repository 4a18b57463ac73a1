//! Causal flow forecasting: per-node conditional continuous normalizing flows
//! over a lagged causal DAG, with synthetic SCM ground truth and metrics.

pub mod autodiff;
pub mod data;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod scm;
pub mod tensor;
pub mod encoder;
pub mod flow;
pub mod model;
pub mod trainer;
pub mod forecaster;
pub mod metrics;
pub mod experiment;
pub mod config;
pub mod checkpoint;

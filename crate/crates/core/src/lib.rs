//! Discrete-event model of stream-based offload pipelines on a many-core
//! coprocessor, with the benchmark flows, a configuration tuner and a CLI.

pub mod cli;
pub mod device;
pub mod engine;
pub mod numfmt;
pub mod pipeline;
pub mod tuner;
pub mod workloads;

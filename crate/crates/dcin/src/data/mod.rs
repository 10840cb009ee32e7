//! Data pipelines: impression logs, the synthetic world generator, and the
//! log-to-sample dataset builder.

pub mod dataset;
pub mod log;
pub mod synth;

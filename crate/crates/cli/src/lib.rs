pub mod app;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod synth;

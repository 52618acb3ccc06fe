//! Sequential click prediction for sponsored search with a recurrent network.

pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod experiment;
pub mod inference;
pub mod learning;
pub mod metrics;
pub mod models;
pub mod numkernel;
pub mod synthgen;

//! Feature collection and closed-loop weighting for a simulated layer-4 load
//! balancer.
//!
//! The data plane ([`parser`]) extracts per-flow features from client
//! packets, the partitioner ([`telemetry`]) publishes them per server through
//! a lock-free multi-buffered region, and the processor
//! ([`estimator_loop`]) reads them back, estimates server load and writes
//! new weights into the [`policies`] action registers.

pub mod bench;
pub mod cluster_sim;
pub mod estimator_loop;
pub mod experiment;
pub mod feature_pipeline;
pub mod metrics;
pub mod packet_model;
pub mod parser;
pub mod policies;
pub mod telemetry;

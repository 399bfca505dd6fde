//! Discrete-event simulation of LLM inference served as one microservice
//! per Transformer layer.

pub mod autoscaler;
pub mod balancer;
pub mod cluster;
pub mod commands;
pub mod engine;
pub mod migration;
pub mod pipeline;
pub mod predictor;
pub mod profiler;
pub mod scenario;
pub mod sim;
pub mod workload;

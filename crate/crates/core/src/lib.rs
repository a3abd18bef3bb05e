//! Block-iterative distributed nonconvex optimization over directed networks.
pub mod algorithm;
pub mod baseline;
pub mod block_consensus;
pub mod experiment;
pub mod metrics;
pub mod prox;
pub mod regression;
pub mod seeding;
pub mod surrogates;
pub mod topology;

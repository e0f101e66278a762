//! Meta-learning for low-resource natural language generation.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod generator;
pub mod metrics;
pub mod optim;

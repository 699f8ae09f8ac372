pub mod checkpoint;
pub mod corpus;
pub mod degrade;
pub mod error;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod perception;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

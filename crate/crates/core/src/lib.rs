pub mod classifier;
pub mod detectors;
pub mod elements;
pub mod encoding;
pub mod featurestore;
pub mod merging;
pub mod miner;
pub mod pipeline;
pub mod synth;
pub mod transactions;

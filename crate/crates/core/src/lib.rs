//! Subgraph-based single-image super-resolution: polyphase node sampling,
//! cross-scale k-NN subgraph aggregation, per-subgraph attention, learnable
//! fusion, and the surrounding train/eval/infer machinery.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nss;
pub mod tape;
pub mod train;
pub mod oracles;
pub mod subgraph;
pub mod types;

pub use error::{Error, Result};
pub use types::FeatureMap;

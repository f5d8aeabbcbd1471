//! Multi-domain click-through-rate prediction with hierarchical experts,
//! per-domain expert mask pruning and popularity-based augmentation.

pub mod augment;
pub mod base;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod hei;
pub mod hemp;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::{Ablation, DataSource, RunConfig, TrainConfig};
pub use data::{Dataset, DomainStats, Sample, Schema, SplitTag, Splits};
pub use error::{Error, Result};
pub use hei::{HeiConfig, HierMask};
pub use hemp::HempConfig;
pub use metrics::{MetricsReport, ScoredSet};
pub use tensor::Array2;
pub use train::{Model, Trained};

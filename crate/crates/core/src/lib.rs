//! IDCL: disentangled intent learning on a user-item-concept graph.
//!
//! Behaviors (user-item interactions) are embedded by a LightGCN-style
//! encoder over the joint graph, projected into `K` intent slices conditioned
//! on concept-derived semantic bases, and trained with BPR plus an
//! intent-wise contrastive loss and a coding-rate-reduction regularizer.

pub mod analysis;
pub mod checkpoint;
pub mod coding_rate;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod disentangler;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod ranking;
pub mod sparse;
pub mod tape;
pub mod trainer;

pub use config::{RecallDenominator, TrainConfig, Variant};
pub use error::{Error, Result};
pub use evaluator::{Metrics, MetricsReport};
pub use model::{Embeddings, GraphShape, IdclModel};
pub use trainer::{FitReport, LossBreakdown, Trainer};

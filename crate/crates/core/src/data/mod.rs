//! Interaction ingestion, the user-item-concept graph, splits and sampling.

pub mod dataset;
pub mod graph;
pub mod io;
pub mod sampling;
pub mod split;

pub use dataset::DatasetSource;
pub use graph::{build_graph, normalized_adjacency, normalized_adjacency_masked, GraphOptions, IdMap, InteractionGraph};
pub use io::{load_interactions, load_item_concepts, ConceptFormat, Interaction, InteractionFormat, ItemConcept};
pub use sampling::{edge_dropout, epoch_batches, sample_bpr_batch, AugmentedGraph, BprBatch, NegativeSampler};
pub use split::{read_split_manifest, split, split_holdout, write_split_manifest, DatasetSplit, Fold, SplitMode};

//! Locating and loading a dataset's interaction and concept files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::graph::{build_graph, GraphOptions, InteractionGraph};
use super::io::{load_interactions, load_item_concepts, ConceptFormat, InteractionFormat};

/// Files and parsing options of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSource {
    pub name: String,
    pub interactions: PathBuf,
    pub interaction_format: InteractionFormat,
    pub concepts: PathBuf,
    pub concept_format: ConceptFormat,
    /// Interactions rated below this are dropped.
    pub min_rating: f64,
    /// Concepts left out of the graph.
    pub exclude_concepts: Vec<String>,
}

impl DatasetSource {
    /// MovieLens 100k in `dir`, either the GroupLens layout (`u.data`,
    /// `u.item`) or the atomic layout (`ml-100k.inter`, `ml-100k.item`).
    /// The `unknown` genre is excluded.
    pub fn movielens_100k(dir: &Path) -> Result<Self> {
        let candidates = [
            ("u.data", InteractionFormat::MovielensTsv, "u.item", ConceptFormat::MovielensItem),
            ("ml-100k.inter", InteractionFormat::AtomicTsv, "ml-100k.item", ConceptFormat::AtomicTsv),
        ];
        for (inter, ifmt, items, cfmt) in candidates {
            let (i, c) = (dir.join(inter), dir.join(items));
            if i.is_file() && c.is_file() {
                return Ok(Self {
                    name: "ml-100k".into(),
                    interactions: i,
                    interaction_format: ifmt,
                    concepts: c,
                    concept_format: cfmt,
                    min_rating: 1.0,
                    exclude_concepts: vec!["unknown".into()],
                });
            }
        }
        Err(Error::Config(format!(
            "{} holds neither `u.data` + `u.item` nor `ml-100k.inter` + `ml-100k.item`; \
             run `idcl fetch` or pass the files explicitly",
            dir.display()
        )))
    }

    /// Reads both files and builds the graph. Concept rows for items without
    /// interactions are dropped.
    pub fn load(&self) -> Result<InteractionGraph> {
        if !self.concepts.is_file() {
            return Err(Error::Config(format!(
                "concept file {} does not exist; every item needs its concepts (e.g. genres)",
                self.concepts.display()
            )));
        }
        let interactions = load_interactions(&self.interactions, self.interaction_format, self.min_rating)?;
        let concepts = load_item_concepts(&self.concepts, self.concept_format, &self.exclude_concepts)?;
        let graph = build_graph(
            &interactions,
            &concepts,
            &GraphOptions {
                drop_unknown_items: true,
                concept_vocabulary: None,
            },
        )?;
        graph.validate()?;
        Ok(graph)
    }
}

//! The full IDCL network: graph encoder, semantic bases and intent heads.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::contrastive;
use crate::data::{normalized_adjacency, DatasetSplit, InteractionGraph};
use crate::disentangler::{self, concept_assignment, disentangle_behavior, semantic_bases};
use crate::encoder::{behavior_embedding, init_layer0, propagate, readout};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::sparse::SparseOperator;
use crate::tape::{Tape, Var};

pub const LAYER0: &str = "emb.layer0";

/// Node counts of the joint graph. Node order is users, items, concepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphShape {
    pub users: usize,
    pub items: usize,
    pub concepts: usize,
}

impl GraphShape {
    pub fn of(graph: &InteractionGraph) -> Self {
        Self {
            users: graph.num_users(),
            items: graph.num_items(),
            concepts: graph.num_concepts(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.users + self.items + self.concepts
    }

    fn item_rows(&self, items: &[usize]) -> Vec<usize> {
        items.iter().map(|&i| self.users + i).collect()
    }

    fn concept_rows(&self) -> Vec<usize> {
        (self.users + self.items..self.nodes()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdclModel {
    pub config: TrainConfig,
    pub shape: GraphShape,
    pub params: ParamStore,
}

/// Tape handles produced by one forward pass over a graph view.
#[derive(Debug, Clone, Copy)]
pub struct View {
    /// Readout embeddings of every node.
    pub nodes: Var,
    /// `S`, present when the model disentangles and the graph has concepts.
    pub assignment: Option<Var>,
    /// `Z_B`, `K x Δd`.
    pub bases: Option<Var>,
}

/// Inference-time embeddings on plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub shape: GraphShape,
    pub nodes: Array2<f64>,
    pub assignment: Option<Array2<f64>>,
    pub bases: Option<Array2<f64>>,
}

impl Embeddings {
    pub fn users(&self) -> ArrayView2<'_, f64> {
        self.nodes.slice(s![..self.shape.users, ..])
    }

    pub fn items(&self) -> ArrayView2<'_, f64> {
        self.nodes.slice(s![self.shape.users..self.shape.users + self.shape.items, ..])
    }

    pub fn concepts(&self) -> ArrayView2<'_, f64> {
        self.nodes.slice(s![self.shape.users + self.shape.items.., ..])
    }
}

impl IdclModel {
    /// Fresh parameters for `shape`. The lightgcn variant only gets `emb.layer0`.
    pub fn new(config: TrainConfig, shape: GraphShape, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        params.insert(LAYER0, init_layer0(shape.nodes(), config.dim, seed));
        if config.disentangles() {
            if shape.concepts == 0 {
                return Err(Error::Config("intent disentangling needs at least one concept".into()));
            }
            disentangler::init_params(&config.disentangler(), &mut params, seed.wrapping_add(0x9e37_79b9))?;
        }
        Ok(Self { config, shape, params })
    }

    /// Checks parameter names and shapes against the config.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let layer0 = self
            .params
            .get(LAYER0)
            .ok_or_else(|| Error::Config(format!("missing parameter `{LAYER0}`")))?;
        if layer0.dim() != (self.shape.nodes(), self.config.dim) {
            return Err(Error::Config(format!(
                "`{LAYER0}` is {:?}, expected ({}, {})",
                layer0.dim(),
                self.shape.nodes(),
                self.config.dim
            )));
        }
        if self.config.disentangles() {
            disentangler::check_params(&self.config.disentangler(), &self.params)?;
            let mut reference = ParamStore::new();
            disentangler::init_params(&self.config.disentangler(), &mut reference, 0)?;
            for (name, t) in reference.iter() {
                let got = self.params.get(name).map(Array2::dim);
                if got != Some(t.dim()) {
                    return Err(Error::Config(format!("`{name}` is {got:?}, expected {:?}", t.dim())));
                }
            }
        } else if self.params.names().any(|n| n.starts_with("dis.")) {
            return Err(Error::Config("lightgcn model carries intent parameters".into()));
        }
        Ok(())
    }

    /// Encoder readout plus, for disentangling models, `S` and `Z_B`.
    pub fn view(&self, tape: &mut Tape, params: &BoundParams, adjacency: &Arc<SparseOperator>) -> Result<View> {
        let layers = propagate(tape, adjacency, params.get(LAYER0), self.config.layers)?;
        let nodes = readout(tape, &layers)?;
        if !self.config.disentangles() {
            return Ok(View {
                nodes,
                assignment: None,
                bases: None,
            });
        }
        let concepts = tape.gather_rows(nodes, &self.shape.concept_rows());
        let assignment = concept_assignment(tape, concepts, params.get(disentangler::W1))?;
        let bases = semantic_bases(tape, params, &self.config.disentangler(), assignment, concepts)?;
        Ok(View {
            nodes,
            assignment: Some(assignment),
            bases: Some(bases),
        })
    }

    pub fn user_rows(&self, tape: &mut Tape, view: &View, users: &[usize]) -> Var {
        tape.gather_rows(view.nodes, users)
    }

    pub fn item_rows(&self, tape: &mut Tape, view: &View, items: &[usize]) -> Var {
        tape.gather_rows(view.nodes, &self.shape.item_rows(items))
    }

    /// Intent slices of the behaviors `(users[b], items[b])`.
    pub fn slices(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        view: &View,
        users: &[usize],
        items: &[usize],
    ) -> Result<Vec<Var>> {
        let bases = view
            .bases
            .ok_or_else(|| Error::Config("this model does not disentangle behaviors".into()))?;
        let u = self.user_rows(tape, view, users);
        let i = self.item_rows(tape, view, items);
        let e = behavior_embedding(tape, u, i)?;
        disentangle_behavior(tape, params, &self.config.disentangler(), e, bases)
    }

    /// Symmetric-normalized adjacency of `graph`, checked against the model's shape.
    pub fn adjacency(&self, graph: &InteractionGraph) -> Result<Arc<SparseOperator>> {
        if GraphShape::of(graph) != self.shape {
            return Err(Error::Graph(format!(
                "graph has shape {:?}, model expects {:?}",
                GraphShape::of(graph),
                self.shape
            )));
        }
        Ok(Arc::new(SparseOperator::new(normalized_adjacency(graph))))
    }

    /// Forward pass without gradient tracking.
    pub fn embeddings(&self, adjacency: &Arc<SparseOperator>) -> Result<Embeddings> {
        let mut tape = Tape::new();
        let params = self.params.bind_frozen(&mut tape);
        let view = self.view(&mut tape, &params, adjacency)?;
        Ok(Embeddings {
            shape: self.shape,
            nodes: tape.value(view.nodes).clone(),
            assignment: view.assignment.map(|a| tape.value(a).clone()),
            bases: view.bases.map(|b| tape.value(b).clone()),
        })
    }

    fn frozen_slices(&self, emb: &Embeddings, users: &[usize], items: &[usize]) -> Result<(Tape, Vec<Var>, Var)> {
        let bases = emb
            .bases
            .as_ref()
            .ok_or_else(|| Error::Config("this model does not disentangle behaviors".into()))?;
        self.check_ids(users, items)?;
        let mut tape = Tape::new();
        let params = self.params.bind_frozen(&mut tape);
        let u = tape.constant(emb.users().select(ndarray::Axis(0), users));
        let i = tape.constant(emb.items().select(ndarray::Axis(0), items));
        let b = tape.constant(bases.clone());
        let e = behavior_embedding(&mut tape, u, i)?;
        let slices = disentangle_behavior(&mut tape, &params, &self.config.disentangler(), e, b)?;
        Ok((tape, slices, b))
    }

    fn check_ids(&self, users: &[usize], items: &[usize]) -> Result<()> {
        if users.len() != items.len() {
            return Err(Error::shape("behaviors", format!("{} users vs {} items", users.len(), items.len())));
        }
        if let Some(u) = users.iter().find(|&&u| u >= self.shape.users) {
            return Err(Error::UnknownId(format!("user index {u}")));
        }
        if let Some(i) = items.iter().find(|&&i| i >= self.shape.items) {
            return Err(Error::UnknownId(format!("item index {i}")));
        }
        Ok(())
    }

    /// Per-intent slices (`K` matrices of `B x Δd`) for the given behaviors.
    pub fn behavior_slices(&self, emb: &Embeddings, users: &[usize], items: &[usize]) -> Result<Vec<Array2<f64>>> {
        let (tape, slices, _) = self.frozen_slices(emb, users, items)?;
        Ok(slices.iter().map(|&s| tape.value(s).clone()).collect())
    }

    /// `p(k|e)` rows (`B x K`) for the given behaviors.
    pub fn intent_distribution(&self, emb: &Embeddings, users: &[usize], items: &[usize]) -> Result<Array2<f64>> {
        let (mut tape, slices, bases) = self.frozen_slices(emb, users, items)?;
        let p = contrastive::intent_confidence(&mut tape, &slices, bases, self.config.tau)?;
        Ok(tape.value(p).clone())
    }
}

/// SHA-256 over the node vocabularies, edges and split folds.
pub fn dataset_hash(graph: &InteractionGraph, split: &DatasetSplit) -> String {
    let mut h = Sha256::new();
    for names in [graph.users.names(), graph.items.names(), graph.concepts.names()] {
        h.update((names.len() as u64).to_le_bytes());
        for n in names {
            h.update(n.as_bytes());
            h.update([0]);
        }
    }
    for &(a, b) in graph.user_item_edges.iter().chain(&graph.item_concept_edges) {
        h.update((a as u64).to_le_bytes());
        h.update((b as u64).to_le_bytes());
    }
    for (tag, fold) in [(0u8, &split.train), (1, &split.val), (2, &split.test)] {
        h.update([tag]);
        for &e in fold {
            h.update((e as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

use std::collections::{BTreeSet, HashMap};

use crate::data::io::{Interaction, ItemConcept};
use crate::data::sampling::AugmentedGraph;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Contiguous index assignment for one node class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    /// Assigns indices in sorted raw-id order; ids that all parse as integers
    /// sort numerically.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let unique: BTreeSet<&str> = ids.into_iter().collect();
        let mut names: Vec<String> = unique.into_iter().map(str::to_string).collect();
        if names.iter().all(|n| n.parse::<u64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<u64>().unwrap());
        }
        Self::from_names(names)
    }

    /// Keeps the given order.
    pub fn from_names(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Users, items and concepts with user-item behaviors and item-concept
/// memberships.
///
/// Node ids in the joint adjacency are laid out as users `[0, N)`, items
/// `[N, N+M)`, concepts `[N+M, N+M+R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    pub users: IdMap,
    pub items: IdMap,
    pub concepts: IdMap,
    /// Behaviors `(user, item)`, sorted and unique.
    pub user_item_edges: Vec<(usize, usize)>,
    /// Memberships `(item, concept)`, sorted and unique.
    pub item_concept_edges: Vec<(usize, usize)>,
}

/// Options for [`build_graph`].
#[derive(Debug, Clone, Default)]
pub struct GraphOptions {
    /// Drop concept rows whose item never appears in the interactions
    /// instead of failing.
    pub drop_unknown_items: bool,
    /// Known concept vocabulary. When set, memberships naming any other
    /// concept are rejected, and the concept order follows this list.
    pub concept_vocabulary: Option<Vec<String>>,
}

impl InteractionGraph {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// Number of behaviors `F`.
    pub fn num_behaviors(&self) -> usize {
        self.user_item_edges.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users() + self.num_items() + self.num_concepts()
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users() + item
    }

    pub fn concept_node(&self, concept: usize) -> usize {
        self.num_users() + self.num_items() + concept
    }

    /// The same node set with a different behavior set. Edges are sorted and
    /// deduplicated.
    pub fn with_behaviors(&self, mut edges: Vec<(usize, usize)>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        Self {
            user_item_edges: edges,
            ..self.clone()
        }
    }

    /// All edges as joint node-id pairs: behaviors first, then memberships.
    pub fn joint_edges(&self) -> impl Iterator<Item = (usize, usize)> + Clone + '_ {
        let behaviors = self
            .user_item_edges
            .iter()
            .map(|&(u, i)| (u, self.item_node(i)));
        let memberships = self
            .item_concept_edges
            .iter()
            .map(|&(i, c)| (self.item_node(i), self.concept_node(c)));
        behaviors.chain(memberships)
    }

    /// Total edge count `|O⁺| + |P⁺|`.
    pub fn num_edges(&self) -> usize {
        self.user_item_edges.len() + self.item_concept_edges.len()
    }

    /// Index of behavior `(user, item)` in `user_item_edges`.
    pub fn behavior_index(&self, user: usize, item: usize) -> Option<usize> {
        self.user_item_edges.binary_search(&(user, item)).ok()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, r) = (self.num_users(), self.num_items(), self.num_concepts());
        for w in self.user_item_edges.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Graph(format!("behaviors unsorted or duplicated at {:?}", w[1])));
            }
        }
        for w in self.item_concept_edges.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Graph(format!("memberships unsorted or duplicated at {:?}", w[1])));
            }
        }
        if let Some(&(u, i)) = self.user_item_edges.iter().find(|&&(u, i)| u >= n || i >= m) {
            return Err(Error::Graph(format!("behavior ({u}, {i}) out of range")));
        }
        if let Some(&(i, c)) = self.item_concept_edges.iter().find(|&&(i, c)| i >= m || c >= r) {
            return Err(Error::Graph(format!("membership ({i}, {c}) out of range")));
        }
        let mut covered = vec![false; r];
        for &(_, c) in &self.item_concept_edges {
            covered[c] = true;
        }
        if let Some(c) = covered.iter().position(|&x| !x) {
            return Err(Error::Graph(format!(
                "concept `{}` has no items",
                self.concepts.name(c)
            )));
        }
        Ok(())
    }
}

/// Assigns contiguous ids and assembles the tripartite graph.
pub fn build_graph(
    interactions: &[Interaction],
    item_concepts: &[ItemConcept],
    options: &GraphOptions,
) -> Result<InteractionGraph> {
    if interactions.is_empty() {
        return Err(Error::Graph("no interactions".into()));
    }
    let users = IdMap::from_ids(interactions.iter().map(|r| r.user.as_str()));
    let items = IdMap::from_ids(interactions.iter().map(|r| r.item.as_str()));

    let mut kept = Vec::with_capacity(item_concepts.len());
    for row in item_concepts {
        if items.get(&row.item).is_some() {
            kept.push(row);
        } else if !options.drop_unknown_items {
            return Err(Error::Graph(format!(
                "concept file references item `{}` with no interactions",
                row.item
            )));
        }
    }

    let concepts = match &options.concept_vocabulary {
        Some(vocab) => {
            let map = IdMap::from_names(vocab.clone());
            if let Some(row) = kept.iter().find(|r| map.get(&r.concept).is_none()) {
                return Err(Error::Graph(format!(
                    "item `{}` references unknown concept `{}`",
                    row.item, row.concept
                )));
            }
            map
        }
        None => {
            // Concepts that only appear on dropped items still count, so they
            // surface as empty concepts below.
            let names: BTreeSet<String> = item_concepts.iter().map(|r| r.concept.clone()).collect();
            IdMap::from_names(names.into_iter().collect())
        }
    };

    let user_item_edges: BTreeSet<(usize, usize)> = interactions
        .iter()
        .map(|r| (users.get(&r.user).unwrap(), items.get(&r.item).unwrap()))
        .collect();
    let item_concept_edges: BTreeSet<(usize, usize)> = kept
        .iter()
        .map(|r| (items.get(&r.item).unwrap(), concepts.get(&r.concept).unwrap()))
        .collect();

    let graph = InteractionGraph {
        users,
        items,
        concepts,
        user_item_edges: user_item_edges.into_iter().collect(),
        item_concept_edges: item_concept_edges.into_iter().collect(),
    };
    graph.validate()?;
    Ok(graph)
}

fn symmetric_normalized(num_nodes: usize, edges: impl Iterator<Item = (usize, usize)> + Clone) -> CsrMatrix {
    let mut degree = vec![0usize; num_nodes];
    for (a, b) in edges.clone() {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut triplets = Vec::new();
    for (a, b) in edges {
        let w = 1.0 / ((degree[a] * degree[b]) as f64).sqrt();
        triplets.push((a, b, w));
        triplets.push((b, a, w));
    }
    CsrMatrix::from_triplets(num_nodes, num_nodes, &triplets).expect("edge endpoints are valid node ids")
}

/// Symmetric-normalized adjacency `D^{-1/2} A D^{-1/2}` over all `N+M+R`
/// nodes, without self-loops. Isolated nodes get empty rows.
pub fn normalized_adjacency(graph: &InteractionGraph) -> CsrMatrix {
    symmetric_normalized(graph.num_nodes(), graph.joint_edges())
}

/// [`normalized_adjacency`] restricted to the edges that survived dropout.
/// Degrees are recomputed on the surviving edges.
pub fn normalized_adjacency_masked(graph: &InteractionGraph, augmented: &AugmentedGraph) -> Result<CsrMatrix> {
    if augmented.mask.len() != graph.num_edges() {
        return Err(Error::shape(
            "normalized_adjacency",
            format!("mask covers {} edges, graph has {}", augmented.mask.len(), graph.num_edges()),
        ));
    }
    let edges = graph
        .joint_edges()
        .zip(augmented.mask.iter())
        .filter_map(|(e, &keep)| keep.then_some(e));
    Ok(symmetric_normalized(graph.num_nodes(), edges))
}

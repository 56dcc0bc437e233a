use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::graph::InteractionGraph;
use crate::data::split::DatasetSplit;
use crate::error::{Error, Result};

/// Rejection attempts per negative before giving up.
const MAX_NEGATIVE_ATTEMPTS: usize = 10_000;

/// BPR triples `(user, positive, negative)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BprBatch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
    /// Index of each `(user, positive)` pair in `graph.user_item_edges`.
    pub behaviors: Vec<usize>,
}

impl BprBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Uniform negative sampling with rejection against each user's training
/// items.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    positives: Vec<Vec<usize>>,
    num_items: usize,
}

impl NegativeSampler {
    pub fn new(graph: &InteractionGraph, split: &DatasetSplit) -> Self {
        Self {
            positives: split.train_items(graph),
            num_items: graph.num_items(),
        }
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.positives[user].binary_search(&item).is_ok()
    }

    pub fn sample<R: Rng>(&self, user: usize, rng: &mut R) -> Result<usize> {
        if self.positives[user].len() >= self.num_items {
            return Err(Error::Sampling(format!(
                "user {user} has trained on every item; no negative exists"
            )));
        }
        for _ in 0..MAX_NEGATIVE_ATTEMPTS {
            let j = rng.random_range(0..self.num_items);
            if !self.is_positive(user, j) {
                return Ok(j);
            }
        }
        Err(Error::Sampling(format!(
            "no negative found for user {user} after {MAX_NEGATIVE_ATTEMPTS} draws"
        )))
    }
}

/// Draws `batch_size` training behaviors uniformly with replacement and one
/// uniform negative for each.
pub fn sample_bpr_batch(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
) -> Result<BprBatch> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if split.train.is_empty() {
        return Err(Error::Sampling("split has no training behaviors".into()));
    }
    let sampler = NegativeSampler::new(graph, split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = BprBatch::default();
    for _ in 0..batch_size {
        let e = split.train[rng.random_range(0..split.train.len())];
        push_triple(graph, &sampler, e, &mut batch, &mut rng)?;
    }
    Ok(batch)
}

fn push_triple<R: Rng>(
    graph: &InteractionGraph,
    sampler: &NegativeSampler,
    behavior: usize,
    batch: &mut BprBatch,
    rng: &mut R,
) -> Result<()> {
    let (u, i) = graph.user_item_edges[behavior];
    let j = sampler.sample(u, rng)?;
    batch.users.push(u);
    batch.pos_items.push(i);
    batch.neg_items.push(j);
    batch.behaviors.push(behavior);
    Ok(())
}

/// One pass over a shuffled copy of the training behaviors, chunked into
/// batches of at most `batch_size`, each positive paired with a fresh
/// negative.
pub fn epoch_batches<R: Rng>(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    sampler: &NegativeSampler,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BprBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order = split.train.clone();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = BprBatch::default();
            for &e in chunk {
                push_triple(graph, sampler, e, &mut batch, rng)?;
            }
            Ok(batch)
        })
        .collect()
}

/// Edge-dropout view of a graph: one keep flag per edge, behaviors first
/// then memberships, matching [`InteractionGraph::joint_edges`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGraph {
    pub mask: Vec<bool>,
    pub rho: f64,
    pub seed: u64,
}

impl AugmentedGraph {
    pub fn surviving(&self) -> usize {
        self.mask.iter().filter(|&&k| k).count()
    }
}

/// Keeps every behavior and membership edge independently with probability
/// `1 - rho`.
pub fn edge_dropout(graph: &InteractionGraph, rho: f64, seed: u64) -> Result<AugmentedGraph> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("edge dropout ratio must be in [0, 1), got {rho}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = (0..graph.num_edges())
        .map(|_| rho == 0.0 || rng.random::<f64>() >= rho)
        .collect();
    Ok(AugmentedGraph { mask, rho, seed })
}

//! Concept-aware semantic bases and per-intent behavior projection.
//!
//! Concept embeddings are soft-clustered into `K` groups (`S = softmax(Z_c W₁)`),
//! each cluster is mapped by the semantic head `g_s` to a basis `b_k ∈ R^Δd`,
//! and every behavior is projected into `K` intent slices by separate heads
//! `g_b^(k)(z_e ∥ b_k)`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tape::{Tape, Var};

pub const W1: &str = "dis.W1";
pub const SEMANTIC_HEAD: &str = "dis.gs";

/// Name prefix of the behavior head for intent `k`.
pub fn behavior_head(k: usize) -> String {
    format!("dis.gb.{k}")
}

/// Depth of a projection head. Every layer is affine followed by `tanh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadDepth {
    #[default]
    Single,
    Double,
}

impl HeadDepth {
    pub fn layers(self) -> usize {
        match self {
            HeadDepth::Single => 1,
            HeadDepth::Double => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisentanglerConfig {
    pub dim: usize,
    pub intents: usize,
    pub head_depth: HeadDepth,
    /// Divide each aggregated cluster by its assignment mass before `g_s`.
    pub normalize_aggregation: bool,
}

impl DisentanglerConfig {
    pub fn new(dim: usize, intents: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            intents,
            head_depth: HeadDepth::Single,
            normalize_aggregation: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intents == 0 {
            return Err(Error::Config("number of intents must be positive".into()));
        }
        if self.dim == 0 || self.dim % self.intents != 0 {
            return Err(Error::Config(format!(
                "embedding size {} is not divisible by {} intents",
                self.dim, self.intents
            )));
        }
        Ok(())
    }

    /// `Δd = d / K`.
    pub fn slice_dim(&self) -> usize {
        self.dim / self.intents
    }
}

fn uniform_fan_in<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn init_head<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, input: usize, output: usize, depth: HeadDepth) {
    let mut width = input;
    for layer in 0..depth.layers() {
        store.insert(format!("{prefix}.{layer}.weight"), uniform_fan_in(rng, width, output, width));
        store.insert(format!("{prefix}.{layer}.bias"), uniform_fan_in(rng, 1, output, width));
        width = output;
    }
}

/// Adds `dis.W1`, the semantic head and the `K` behavior heads to `store`.
pub fn init_params(cfg: &DisentanglerConfig, store: &mut ParamStore, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k, dd) = (cfg.dim, cfg.intents, cfg.slice_dim());
    store.insert(W1, uniform_fan_in(&mut rng, d, k, d));
    init_head(store, &mut rng, SEMANTIC_HEAD, d, dd, cfg.head_depth);
    for intent in 0..k {
        init_head(store, &mut rng, &behavior_head(intent), d + dd, dd, cfg.head_depth);
    }
    Ok(())
}

/// Checks that `params` holds exactly the heads `cfg` asks for.
pub fn check_params(cfg: &DisentanglerConfig, params: &ParamStore) -> Result<()> {
    cfg.validate()?;
    let heads = params
        .names()
        .filter_map(|n| n.strip_prefix("dis.gb."))
        .filter_map(|rest| rest.split('.').next()?.parse::<usize>().ok())
        .collect::<std::collections::BTreeSet<_>>();
    if heads.len() != cfg.intents || heads.iter().any(|&h| h >= cfg.intents) {
        return Err(Error::Config(format!(
            "found {} behavior heads, expected {}",
            heads.len(),
            cfg.intents
        )));
    }
    let mut expected = vec![W1.to_string()];
    for prefix in std::iter::once(SEMANTIC_HEAD.to_string()).chain((0..cfg.intents).map(behavior_head)) {
        for layer in 0..cfg.head_depth.layers() {
            expected.push(format!("{prefix}.{layer}.weight"));
            expected.push(format!("{prefix}.{layer}.bias"));
        }
    }
    if let Some(missing) = expected.iter().find(|n| !params.contains(n)) {
        return Err(Error::Config(format!("missing parameter `{missing}`")));
    }
    Ok(())
}

/// Applies the head stored under `prefix` to the rows of `x`.
pub fn apply_head(tape: &mut Tape, params: &BoundParams, prefix: &str, depth: HeadDepth, x: Var) -> Var {
    let mut h = x;
    for layer in 0..depth.layers() {
        let w = params.get(&format!("{prefix}.{layer}.weight"));
        let b = params.get(&format!("{prefix}.{layer}.bias"));
        let affine = tape.matmul(h, w);
        let shifted = tape.add_row(affine, b);
        h = tape.tanh(shifted);
    }
    h
}

/// `S = row-softmax(Z_c W₁)`, an `R x K` row-stochastic matrix.
pub fn concept_assignment(tape: &mut Tape, concepts: Var, w1: Var) -> Result<Var> {
    let (_, d) = tape.shape(concepts);
    let (wd, _) = tape.shape(w1);
    if d != wd {
        return Err(Error::shape("concept_assignment", format!("Z_c has {d} columns, W1 has {wd} rows")));
    }
    let logits = tape.matmul(concepts, w1);
    Ok(tape.softmax_rows(logits))
}

/// Cluster embeddings `Sᵀ Z_c` (`K x d`), optionally divided by the column
/// sums of `S`.
pub fn aggregate_concepts(tape: &mut Tape, assignment: Var, concepts: Var, normalize: bool) -> Result<Var> {
    let (r, _) = tape.shape(assignment);
    let (rc, _) = tape.shape(concepts);
    if r != rc {
        return Err(Error::shape("semantic_bases", format!("S has {r} rows, Z_c has {rc}")));
    }
    let clusters = tape.matmul_tn(assignment, concepts);
    if !normalize {
        return Ok(clusters);
    }
    let ones = tape.constant(Array2::ones((r, 1)));
    let mass = tape.matmul_tn(assignment, ones); // K x 1
    let inv = tape.recip(mass);
    let (_, d) = tape.shape(concepts);
    let ones_row = tape.constant(Array2::ones((1, d)));
    let scale = tape.matmul(inv, ones_row);
    Ok(tape.mul(clusters, scale))
}

/// Semantic bases `Z_B = g_s(Sᵀ Z_c)`, a `K x Δd` matrix.
pub fn semantic_bases(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &DisentanglerConfig,
    assignment: Var,
    concepts: Var,
) -> Result<Var> {
    cfg.validate()?;
    let (_, k) = tape.shape(assignment);
    if k != cfg.intents {
        return Err(Error::shape("semantic_bases", format!("S has {k} columns, expected {}", cfg.intents)));
    }
    let clusters = aggregate_concepts(tape, assignment, concepts, cfg.normalize_aggregation)?;
    Ok(apply_head(tape, params, SEMANTIC_HEAD, cfg.head_depth, clusters))
}

/// Intent slices `z_{e,k} = g_b^(k)(z_e ∥ b_k)`, one `B x Δd` matrix per intent.
pub fn disentangle_behavior(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &DisentanglerConfig,
    behaviors: Var,
    bases: Var,
) -> Result<Vec<Var>> {
    let (batch, d) = tape.shape(behaviors);
    if d != cfg.dim {
        return Err(Error::shape("disentangle_behavior", format!("z_e width {d}, expected {}", cfg.dim)));
    }
    let (k, dd) = tape.shape(bases);
    if k != cfg.intents || dd != cfg.slice_dim() {
        return Err(Error::shape(
            "disentangle_behavior",
            format!("bases are {k}x{dd}, expected {}x{}", cfg.intents, cfg.slice_dim()),
        ));
    }
    let mut slices = Vec::with_capacity(k);
    for intent in 0..k {
        let prefix = behavior_head(intent);
        if params.try_get(&format!("{prefix}.0.weight")).is_none() {
            return Err(Error::Config(format!("missing behavior head {intent} of {k}")));
        }
        let basis = tape.gather_rows(bases, &[intent]);
        let repeated = tape.repeat_row(basis, batch);
        let input = tape.concat_cols(&[behaviors, repeated]);
        slices.push(apply_head(tape, params, &prefix, cfg.head_depth, input));
    }
    Ok(slices)
}

/// `[z_{e,1}; …; z_{e,K}]` as a `B x d` matrix.
pub fn concat_slices(tape: &mut Tape, slices: &[Var]) -> Var {
    tape.concat_cols(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, s};

    fn cfg(d: usize, k: usize) -> DisentanglerConfig {
        DisentanglerConfig::new(d, k).unwrap()
    }

    fn random(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn indivisible_dimension_rejected() {
        assert!(DisentanglerConfig::new(10, 4).is_err());
        assert!(DisentanglerConfig::new(8, 0).is_err());
        assert_eq!(cfg(12, 4).slice_dim(), 3);
    }

    #[test]
    fn zero_w1_gives_uniform_rows() {
        let mut tape = Tape::new();
        let zc = tape.constant(random(1, 5, 4));
        let w = tape.constant(Array2::zeros((4, 3)));
        let s = concept_assignment(&mut tape, zc, w).unwrap();
        assert!(tape.value(s).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn dominant_logit_is_nearly_one_hot() {
        let mut tape = Tape::new();
        let zc = tape.constant(array![[1.0, 0.0]]);
        let w = tape.constant(array![[20.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let s = concept_assignment(&mut tape, zc, w).unwrap();
        assert!(tape.value(s)[[0, 0]] > 0.999);
        let bad = tape.constant(Array2::zeros((3, 3)));
        assert!(concept_assignment(&mut tape, zc, bad).is_err());
    }

    #[test]
    fn uniform_assignment_averages_identically() {
        let mut tape = Tape::new();
        let s = tape.constant(Array2::from_elem((4, 2), 0.5));
        let zc = tape.constant(random(2, 4, 3));
        let agg = aggregate_concepts(&mut tape, s, zc, false).unwrap();
        let v = tape.value(agg);
        assert_eq!(v.row(0), v.row(1));
        let norm = aggregate_concepts(&mut tape, s, zc, true).unwrap();
        let mean = tape.value(zc).mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in tape.value(norm).row(0).iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_assignment_maps_each_concept() {
        let c = cfg(4, 2);
        let mut store = ParamStore::new();
        init_params(&c, &mut store, 3).unwrap();
        let zc_val = random(4, 2, 4);
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let s = tape.constant(Array2::eye(2));
        let zc = tape.constant(zc_val.clone());
        let bases = semantic_bases(&mut tape, &params, &c, s, zc).unwrap();
        let w = store.get("dis.gs.0.weight").unwrap();
        let b = store.get("dis.gs.0.bias").unwrap();
        let expected = (zc_val.dot(w) + b).mapv(f64::tanh);
        assert_eq!(tape.value(bases), &expected);
    }

    #[test]
    fn heads_are_isolated_and_concatenate() {
        let c = cfg(6, 3);
        let mut store = ParamStore::new();
        init_params(&c, &mut store, 5).unwrap();
        let ze = random(6, 4, 6);
        let bases = random(7, 3, 2);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let params = store.bind_frozen(&mut tape);
            let z = tape.constant(ze.clone());
            let b = tape.constant(bases.clone());
            let slices = disentangle_behavior(&mut tape, &params, &c, z, b).unwrap();
            let cat = concat_slices(&mut tape, &slices);
            let parts: Vec<_> = slices.iter().map(|&s| tape.value(s).clone()).collect();
            (parts, tape.value(cat).clone())
        };
        let (before, cat) = run(&store);
        for (k, part) in before.iter().enumerate() {
            assert_eq!(&cat.slice(s![.., 2 * k..2 * k + 2]), part);
        }
        store.get_mut("dis.gb.1.0.weight").unwrap().mapv_inplace(|v| v + 0.3);
        let (after, _) = run(&store);
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
    }

    #[test]
    fn zero_input_gives_bias_image() {
        let c = cfg(4, 2);
        let mut store = ParamStore::new();
        init_params(&c, &mut store, 9).unwrap();
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let z = tape.constant(Array2::zeros((3, 4)));
        let b = tape.constant(Array2::zeros((2, 2)));
        let slices = disentangle_behavior(&mut tape, &params, &c, z, b).unwrap();
        let bias = store.get("dis.gb.0.0.bias").unwrap().mapv(f64::tanh);
        for row in tape.value(slices[0]).rows() {
            assert_eq!(row, bias.row(0));
        }
    }

    #[test]
    fn head_count_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        init_params(&cfg(6, 3), &mut store, 1).unwrap();
        assert!(check_params(&cfg(6, 3), &store).is_ok());
        assert!(matches!(check_params(&cfg(6, 2), &store), Err(Error::Config(_))));
        let wide = DisentanglerConfig {
            head_depth: HeadDepth::Double,
            ..cfg(6, 3)
        };
        assert!(check_params(&wide, &store).is_err());
    }
}

//! Random instances and the checks shared by the integration tests and the
//! acceptance runner. Every check returns a one-line summary on success.
#![allow(dead_code)]

pub mod oracle;

use std::sync::Arc;

use ndarray::Array2;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idcl_core::coding_rate::{coding_rate_value, group_compactness_value, rate_report};
use idcl_core::config::{TrainConfig, Variant};
use idcl_core::contrastive::{icl_loss_value, intent_confidence_values, subtask_logprob_values, IclForm};
use idcl_core::data::{edge_dropout, normalized_adjacency, normalized_adjacency_masked, split_holdout, IdMap, InteractionGraph};
use idcl_core::disentangler::{self, concept_assignment, semantic_bases, DisentanglerConfig, HeadDepth, SEMANTIC_HEAD};
use idcl_core::encoder::encode;
use idcl_core::evaluator::evaluate;
use idcl_core::model::{Embeddings, GraphShape, IdclModel};
use idcl_core::params::ParamStore;
use idcl_core::sparse::SparseOperator;
use idcl_core::tape::Tape;
use idcl_core::trainer::{parameter_gradients, step_loss, StepBatch};
use idcl_core::RecallDenominator;

pub type Check = Result<String, String>;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    // Box-Muller keeps the instance generator independent of the crate's samplers.
    Array2::from_shape_simple_fn((rows, cols), || {
        let u: f64 = rng.random_range(1e-12..1.0);
        let v: f64 = rng.random();
        scale * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

/// Rows on the probability simplex; some rows are one-hot.
pub fn memberships(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Array2<f64> {
    let mut p = Array2::zeros((rows, k));
    for i in 0..rows {
        if rng.random_bool(0.2) {
            p[[i, rng.random_range(0..k)]] = 1.0;
            continue;
        }
        let w: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-9..1.0f64).ln()).collect();
        let s: f64 = w.iter().sum();
        for j in 0..k {
            p[[i, j]] = w[j] / s;
        }
    }
    p
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn max_gap(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

/// A graph over `users`, `items`, `concepts` whose every concept has a member.
pub fn random_graph(rng: &mut ChaCha8Rng, users: usize, items: usize, concepts: usize, density: f64) -> InteractionGraph {
    let mut behaviors = Vec::new();
    for u in 0..users {
        for i in 0..items {
            if rng.random_bool(density) {
                behaviors.push((u, i));
            }
        }
        if !behaviors.iter().any(|b| b.0 == u) {
            behaviors.push((u, rng.random_range(0..items)));
        }
    }
    behaviors.sort_unstable();
    behaviors.dedup();
    let mut members = Vec::new();
    for c in 0..concepts {
        members.push((rng.random_range(0..items), c));
        for i in 0..items {
            if rng.random_bool(0.3) {
                members.push((i, c));
            }
        }
    }
    members.sort_unstable();
    members.dedup();
    let names = |n: usize, p: &str| IdMap::from_names((0..n).map(|i| format!("{p}{i}")).collect());
    InteractionGraph {
        users: names(users, "u"),
        items: names(items, "i"),
        concepts: names(concepts, "c"),
        user_item_edges: behaviors,
        item_concept_edges: members,
    }
}

/// Edges of `graph` in node ids (users, then items, then concepts).
pub fn node_edges(graph: &InteractionGraph) -> Vec<(usize, usize)> {
    let (n, m) = (graph.num_users(), graph.num_items());
    graph
        .user_item_edges
        .iter()
        .map(|&(u, i)| (u, n + i))
        .chain(graph.item_concept_edges.iter().map(|&(i, c)| (n + i, n + m + c)))
        .collect()
}

fn head_layers(store: &ParamStore, prefix: &str, depth: HeadDepth) -> Vec<(Array2<f64>, Array2<f64>)> {
    (0..depth.layers())
        .map(|l| {
            (
                store.get(&format!("{prefix}.{l}.weight")).unwrap().clone(),
                store.get(&format!("{prefix}.{l}.bias")).unwrap().clone(),
            )
        })
        .collect()
}

/// Coding rate, group compactness, the contrastive loss, the propagation
/// readout and the semantic bases against brute force on `cases` random
/// instances each.
pub fn numerical_oracles(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = [0.0f64; 5];
    for case in 0..cases {
        // Coding rate and compactness (determinant based, 1e-8).
        let f = rng.random_range(1..30);
        let d = rng.random_range(1..7);
        let k = rng.random_range(1..5);
        let eps = rng.random_range(0.1..2.0);
        let scale = rng.random_range(0.05..3.0);
        let z = gaussian(&mut rng, f, d, scale);
        let pi = memberships(&mut rng, f, k);
        let got = coding_rate_value(&z, eps).map_err(|e| e.to_string())?;
        let want = oracle::coding_rate(&z, eps);
        worst[0] = worst[0].max((got - want).abs() / want.abs().max(1.0));
        if !close(got, want, 1e-8) {
            return Err(format!("coding_rate case {case}: {got} vs {want}"));
        }
        let got = group_compactness_value(&z, &pi, eps).map_err(|e| e.to_string())?;
        let want = oracle::group_compactness(&z, &pi, eps);
        worst[1] = worst[1].max((got - want).abs() / want.abs().max(1.0));
        if !close(got, want, 1e-8) {
            return Err(format!("group_compactness case {case}: {got} vs {want}"));
        }

        // Contrastive loss (1e-6).
        let b = rng.random_range(2..12);
        let k = rng.random_range(1..5);
        let dd = rng.random_range(1..6);
        let tau = rng.random_range(0.1..1.0);
        let strict = rng.random_bool(0.5);
        let exact = rng.random_bool(0.5);
        let anchors: Vec<_> = (0..k).map(|_| gaussian(&mut rng, b, dd, 1.0)).collect();
        let positives: Vec<_> = anchors.iter().map(|a| a + &gaussian(&mut rng, b, dd, 0.3)).collect();
        let bases = gaussian(&mut rng, k, dd, 1.0);
        let probs = intent_confidence_values(&anchors, &bases, tau).map_err(|e| e.to_string())?;
        let mut logprobs = Array2::zeros((b, k));
        for j in 0..k {
            let col = subtask_logprob_values(&anchors[j], &positives[j], tau, strict).map_err(|e| e.to_string())?;
            for e in 0..b {
                logprobs[[e, j]] = col[e];
            }
        }
        let form = if exact { IclForm::ExactLogExpectation } else { IclForm::Expectation };
        let got = icl_loss_value(&probs, &logprobs, form).map_err(|e| e.to_string())?;
        let want = oracle::icl_loss(&anchors, &positives, &bases, tau, strict, exact);
        worst[2] = worst[2].max((got - want).abs() / want.abs().max(1.0));
        if !close(got, want, 1e-6) {
            return Err(format!("icl_loss case {case}: {got} vs {want}"));
        }

        // Readout (1e-6).
        let (n, m, r) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..4));
        let g = random_graph(&mut rng, n, m, r, 0.4);
        let layers = rng.random_range(1..4);
        let width = rng.random_range(1..5);
        let x = gaussian(&mut rng, g.num_nodes(), width, 1.0);
        let op = Arc::new(SparseOperator::new(normalized_adjacency(&g)));
        let got = encode(&op, &x, layers).map_err(|e| e.to_string())?;
        let want = oracle::readout(&oracle::normalized_adjacency(g.num_nodes(), &node_edges(&g)), &x, layers);
        let gap = max_gap(&got, &want);
        worst[3] = worst[3].max(gap);
        if gap > 1e-6 {
            return Err(format!("readout case {case}: gap {gap:e}"));
        }

        // Semantic bases (1e-6).
        let k = rng.random_range(1..5);
        let dim = k * rng.random_range(1..4);
        let r = rng.random_range(1..8);
        let mut cfg = DisentanglerConfig::new(dim, k).map_err(|e| e.to_string())?;
        cfg.head_depth = if rng.random_bool(0.5) { HeadDepth::Double } else { HeadDepth::Single };
        cfg.normalize_aggregation = rng.random_bool(0.5);
        let mut store = ParamStore::new();
        disentangler::init_params(&cfg, &mut store, rng.random()).map_err(|e| e.to_string())?;
        let zc = gaussian(&mut rng, r, dim, 1.0);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let zv = tape.constant(zc.clone());
        let s = concept_assignment(&mut tape, zv, params.get(disentangler::W1)).map_err(|e| e.to_string())?;
        let out = semantic_bases(&mut tape, &params, &cfg, s, zv).map_err(|e| e.to_string())?;
        let want = oracle::semantic_bases(
            &zc,
            store.get(disentangler::W1).unwrap(),
            &head_layers(&store, SEMANTIC_HEAD, cfg.head_depth),
            cfg.normalize_aggregation,
        );
        let gap = max_gap(tape.value(out), &want);
        worst[4] = worst[4].max(gap);
        if gap > 1e-6 {
            return Err(format!("semantic_bases case {case}: gap {gap:e}"));
        }
    }
    Ok(format!(
        "{cases} cases each; worst rel. error coding_rate {:.1e}, group_compactness {:.1e}, icl_loss {:.1e}, readout {:.1e}, semantic_bases {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    ))
}

/// Which loss a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Bpr,
    Icl,
    RateReduction,
    Total,
}

pub const ALL_TERMS: [LossTerm; 4] = [LossTerm::Bpr, LossTerm::Icl, LossTerm::RateReduction, LossTerm::Total];

/// A model small enough for finite differences, with a fixed batch and
/// augmented view.
pub struct TinySetup {
    pub graph: InteractionGraph,
    pub model: IdclModel,
    pub adjacency: Arc<SparseOperator>,
    pub augmented: Arc<SparseOperator>,
    pub users: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl TinySetup {
    /// 5 users, 8 items, 3 concepts (16 nodes), `d = 8`, `K = 2`.
    pub fn new(seed: u64, depth: HeadDepth, normalize: bool, exact: bool, strict: bool, unit_rows: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_graph(&mut rng, 5, 8, 3, 0.45);
        let mut cfg = TrainConfig::for_variant(Variant::Idcl);
        cfg.dim = 8;
        cfg.intents = 2;
        cfg.layers = 2;
        cfg.head_depth = depth;
        cfg.normalize_aggregation = normalize;
        cfg.exact_log_expectation = exact;
        cfg.strict_contrast = strict;
        cfg.cr_unit_rows = unit_rows;
        cfg.icl_batch = 5;
        cfg.tau = 0.5;
        cfg.lambda_icl = 0.3;
        cfg.lambda_cr = 0.2;
        cfg.lambda_l2 = 1e-2;
        let mut model = IdclModel::new(cfg, GraphShape::of(&graph), seed).unwrap();
        // Larger parameters keep every loss term well away from flat regions.
        for (name, value) in model.params.iter_mut() {
            let factor = if name == "emb.layer0" { 5.0 } else { 2.5 };
            value.mapv_inplace(|v| v * factor);
        }
        let adjacency = Arc::new(SparseOperator::new(normalized_adjacency(&graph)));
        let aug = edge_dropout(&graph, 0.3, seed + 1).unwrap();
        let augmented = Arc::new(SparseOperator::new(normalized_adjacency_masked(&graph, &aug).unwrap()));
        let mut users = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for b in 0..6 {
            let (u, i) = graph.user_item_edges[(b * 7 + seed as usize) % graph.num_behaviors()];
            let j = (0..graph.num_items())
                .cycle()
                .skip(rng.random_range(0..graph.num_items()))
                .take(graph.num_items())
                .find(|&j| graph.behavior_index(u, j).is_none())
                .unwrap_or((i + 1) % graph.num_items());
            users.push(u);
            pos.push(i);
            neg.push(j);
        }
        Self {
            graph,
            model,
            adjacency,
            augmented,
            users,
            pos,
            neg,
        }
    }

    /// The four loss values and, when `grads` is set, their gradients.
    fn evaluate(&self, params: &ParamStore, grads: bool) -> ([f64; 4], Vec<std::collections::BTreeMap<String, Array2<f64>>>) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let batch = StepBatch {
            users: &self.users,
            pos_items: &self.pos,
            neg_items: &self.neg,
        };
        let step = step_loss(&mut tape, &self.model, &bound, &self.adjacency, Some(&self.augmented), batch).unwrap();
        let vars = [
            step.terms.bpr,
            step.terms.icl.expect("icl term"),
            step.terms.rate_reduction.expect("rate-reduction term"),
            step.total,
        ];
        let values = vars.map(|v| tape.scalar_value(v));
        let g = if grads {
            vars.iter().map(|&v| parameter_gradients(&tape, &bound, v)).collect()
        } else {
            Vec::new()
        };
        (values, g)
    }

    /// Worst per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the
    /// tape gradient and a five-point central difference, for each loss term.
    pub fn gradient_errors(&self) -> [f64; 4] {
        let (_, analytic) = self.evaluate(&self.model.params, true);
        let h = 1e-3;
        let mut worst = [0.0f64; 4];
        let names: Vec<String> = self.model.params.names().map(str::to_string).collect();
        for name in &names {
            let shape = self.model.params.get(name).unwrap().dim();
            let mut numeric = vec![Array2::<f64>::zeros(shape); 4];
            let mut params = self.model.params.clone();
            for idx in 0..shape.0 * shape.1 {
                let at = (idx / shape.1, idx % shape.1);
                let x0 = params.get(name).unwrap()[at];
                let mut at_offset = |step: f64| {
                    params.get_mut(name).unwrap()[at] = x0 + step;
                    self.evaluate(&params, false).0
                };
                let (p2, p1, m1, m2) = (at_offset(2.0 * h), at_offset(h), at_offset(-h), at_offset(-2.0 * h));
                params.get_mut(name).unwrap()[at] = x0;
                for t in 0..4 {
                    numeric[t][at] = (-p2[t] + 8.0 * p1[t] - 8.0 * m1[t] + m2[t]) / (12.0 * h);
                }
            }
            for t in 0..4 {
                let a = analytic[t].get(name).cloned().unwrap_or_else(|| Array2::zeros(shape));
                let n = &numeric[t];
                let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = norm(&a).max(norm(n));
                if scale < 1e-9 {
                    continue;
                }
                worst[t] = worst[t].max(norm(&(&a - n)) / scale);
            }
        }
        worst
    }
}

/// Finite-difference checks of every loss term through the full tiny model
/// under several head and contrastive settings.
pub fn gradient_suite() -> Check {
    let settings = [
        (1, HeadDepth::Single, false, false, false, false),
        (2, HeadDepth::Double, true, false, true, false),
        (3, HeadDepth::Single, true, true, false, true),
        (4, HeadDepth::Double, false, true, true, true),
    ];
    let mut worst = [0.0f64; 4];
    for (seed, depth, normalize, exact, strict, unit_rows) in settings {
        let setup = TinySetup::new(seed, depth, normalize, exact, strict, unit_rows);
        let errs = setup.gradient_errors();
        for t in 0..4 {
            worst[t] = worst[t].max(errs[t]);
        }
    }
    let line = format!(
        "worst rel. error bpr {:.1e}, icl {:.1e}, rate_reduction {:.1e}, total {:.1e} over {} settings",
        worst[0],
        worst[1],
        worst[2],
        worst[3],
        settings.len()
    );
    if worst.iter().all(|&e| e < 1e-4) {
        Ok(line)
    } else {
        Err(line)
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    })
}

fn row_sums_ok(m: &Array2<f64>, what: &str) -> Result<(), TestCaseError> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(*v >= 0.0)) {
            return Err(TestCaseError::fail(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `S` rows, `p(k|e)` rows and the intent proportions sum to one.
pub fn normalization(cases: u32) -> Check {
    let strategy = (
        proptest::num::u64::ANY,
        1usize..16,
        1usize..8,
        1usize..7,
        -3.0f64..3.0,
        0.02f64..2.0,
    );
    runner(cases)
        .run(&strategy, |(seed, rows, width, k, log_scale, tau)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 10f64.powf(log_scale);
            let zc = gaussian(&mut rng, rows, width, scale);
            let w1 = gaussian(&mut rng, width, k, scale);
            let mut tape = Tape::new();
            let (z, w) = (tape.constant(zc), tape.constant(w1));
            let s = concept_assignment(&mut tape, z, w).unwrap();
            row_sums_ok(tape.value(s), "S")?;

            let slices: Vec<_> = (0..k).map(|_| gaussian(&mut rng, rows, width, scale)).collect();
            let bases = gaussian(&mut rng, k, width, scale);
            let p = intent_confidence_values(&slices, &bases, tau).unwrap();
            row_sums_ok(&p, "p(k|e)")?;

            let props = idcl_core::analysis::intent_proportions(p.view()).unwrap();
            let total: f64 = props.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(TestCaseError::fail(format!("proportions sum to {total}")));
            }
            Ok(())
        })
        .map(|()| format!("{cases} randomized cases for S, p(k|e) and intent proportions"))
        .map_err(|e| e.to_string())
}

/// `L_ΔR ≤ 1e-9` on random draws, and exactly zero for one group holding
/// every row.
pub fn rate_reduction_sign(cases: u32) -> Check {
    let strategy = (proptest::num::u64::ANY, 1usize..40, 1usize..10, 1usize..7, 0.05f64..3.0, -2.0f64..1.5);
    let mut worst = f64::NEG_INFINITY;
    let worst_ref = std::cell::Cell::new(worst);
    runner(cases)
        .run(&strategy, |(seed, f, d, k, eps, log_scale)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = gaussian(&mut rng, f, d, 10f64.powf(log_scale));
            let pi = memberships(&mut rng, f, k);
            let loss = -rate_report(&z, &pi, eps).unwrap().reduction();
            worst_ref.set(worst_ref.get().max(loss));
            if loss > 1e-9 {
                return Err(TestCaseError::fail(format!("L_dR = {loss:e}")));
            }
            let full = Array2::ones((f, 1));
            let single = -rate_report(&z, &full, eps).unwrap().reduction();
            if single != 0.0 {
                return Err(TestCaseError::fail(format!("single full group gives L_dR = {single:e}")));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    worst = worst_ref.get();
    Ok(format!("{cases} draws, max L_dR {worst:.2e}; K=1 full membership gives exactly 0"))
}

/// `evaluate()` against per-user enumeration on random small instances.
pub fn metric_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ks = [1, 3, 5, 10, 20];
    for case in 0..instances {
        let users = rng.random_range(2..=10);
        let items = rng.random_range(4..=20);
        let g = random_graph(&mut rng, users, items, 1, 0.5);
        let split = split_holdout(&g, 0.2, 0.3, rng.random()).map_err(|e| e.to_string())?;
        let shape = GraphShape::of(&g);
        let d = rng.random_range(1..4);
        // Small integers make scores exact and ties common.
        let nodes = Array2::from_shape_simple_fn((shape.nodes(), d), || rng.random_range(-2..=2) as f64);
        let emb = Embeddings {
            shape,
            nodes,
            assignment: None,
            bases: None,
        };
        let scores = emb.users().dot(&emb.items().t());
        for fold in [idcl_core::data::Fold::Val, idcl_core::data::Fold::Test] {
            let (masked, relevant) = idcl_core::evaluator::fold_lists(&g, &split, fold).map_err(|e| e.to_string())?;
            if relevant.iter().all(Vec::is_empty) {
                continue;
            }
            let own_masked: Vec<Vec<usize>> = {
                let train = split.train_items(&g);
                let val = split.val_items(&g);
                (0..users)
                    .map(|u| {
                        let mut m = train[u].clone();
                        if fold == idcl_core::data::Fold::Test {
                            m.extend(&val[u]);
                        }
                        m
                    })
                    .collect()
            };
            if own_masked.iter().zip(&masked).any(|(a, b)| {
                let mut a = a.clone();
                a.sort_unstable();
                &a != b
            }) {
                return Err(format!("case {case}: masked lists differ for {fold:?}"));
            }
            for (denom, truncated) in [(RecallDenominator::Truncated, true), (RecallDenominator::Relevant, false)] {
                let got = evaluate(&emb, &g, &split, fold, &ks, denom).map_err(|e| e.to_string())?;
                let (n, want) = oracle::ranking_metrics(&scores, &own_masked, &relevant, &ks, truncated);
                if got.users != n {
                    return Err(format!("case {case}: {} vs {n} users", got.users));
                }
                for (k, r, g) in want {
                    if got.recall(k) != Some(r) || got.ndcg(k) != Some(g) {
                        return Err(format!(
                            "case {case} {fold:?} @{k}: recall {:?} vs {r}, ndcg {:?} vs {g}",
                            got.recall(k),
                            got.ndcg(k)
                        ));
                    }
                }
            }
        }
    }
    Ok(format!("{instances} instances, recall and ndcg at {ks:?} identical to enumeration"))
}

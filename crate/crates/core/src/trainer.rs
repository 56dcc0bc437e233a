//! Multi-task loss, epochs and early stopping.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coding_rate::{rate_reduction_loss, RateReport};
use crate::config::TrainConfig;
use crate::contrastive::{icl_loss, intent_confidence, subtask_logprob, COSINE_EPS};
use crate::data::{edge_dropout, epoch_batches, normalized_adjacency_masked, DatasetSplit, Fold, InteractionGraph, NegativeSampler};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_embeddings, fold_lists, Metrics};
use crate::model::IdclModel;
use crate::optim::Adam;
use crate::params::{BoundParams, ParamStore};
use crate::ranking::{bpr_loss, paired_scores};
use crate::sparse::SparseOperator;
use crate::tape::{Tape, Var};

/// Cutoff used for model selection.
pub const SELECTION_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub icl: f64,
    pub cr: f64,
    pub l2: f64,
}

impl LossWeights {
    pub fn of(cfg: &TrainConfig) -> Self {
        Self {
            icl: cfg.lambda_icl,
            cr: cfg.lambda_cr,
            l2: cfg.lambda_l2,
        }
    }
}

/// Loss components of one step. `rate_reduction` is `L_ΔR = R_c − R`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub icl: f64,
    pub rate_reduction: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = bpr + λ₁ icl + λ₂ L_ΔR + λ₃ l2`, refusing non-finite parts.
    pub fn combine(bpr: f64, icl: f64, rate_reduction: f64, l2: f64, w: LossWeights) -> Result<Self> {
        for (name, v) in [("bpr", bpr), ("icl", icl), ("rate_reduction", rate_reduction), ("l2", l2)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component `{name}` is {v}")));
            }
        }
        Ok(Self {
            bpr,
            icl,
            rate_reduction,
            l2,
            total: bpr + w.icl * icl + w.cr * rate_reduction + w.l2 * l2,
        })
    }

    fn accumulate(&mut self, other: &Self) {
        self.bpr += other.bpr;
        self.icl += other.icl;
        self.rate_reduction += other.rate_reduction;
        self.l2 += other.l2;
        self.total += other.total;
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            bpr: self.bpr * f,
            icl: self.icl * f,
            rate_reduction: self.rate_reduction * f,
            l2: self.l2 * f,
            total: self.total * f,
        }
    }
}

/// Tape handles of the loss components. Missing terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub bpr: Var,
    pub icl: Option<Var>,
    pub rate_reduction: Option<Var>,
    pub l2: Var,
}

/// Weighted sum of the terms on the tape, with the numeric breakdown.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
    let breakdown = LossBreakdown::combine(
        tape.scalar_value(terms.bpr),
        value(tape, terms.icl),
        value(tape, terms.rate_reduction),
        tape.scalar_value(terms.l2),
        w,
    )?;
    let mut total = terms.bpr;
    for (term, weight) in [(terms.icl, w.icl), (terms.rate_reduction, w.cr), (Some(terms.l2), w.l2)] {
        if let Some(t) = term {
            if weight != 0.0 {
                let scaled = tape.scale(t, weight);
                total = tape.add(total, scaled);
            }
        }
    }
    Ok((total, breakdown))
}

/// Sum of squared entries of every bound parameter.
pub fn l2_penalty(tape: &mut Tape, params: &BoundParams) -> Var {
    let mut total = tape.scalar(0.0);
    for (_, v) in params.iter() {
        let sq = tape.squared_norm(v);
        total = tape.add(total, sq);
    }
    total
}

/// One training triple batch in node-local indices.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub users: &'a [usize],
    pub pos_items: &'a [usize],
    pub neg_items: &'a [usize],
}

/// Output of [`step_loss`].
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
    pub rates: Option<RateReport>,
}

/// Builds every loss term of one step on `tape`.
///
/// `augmented` is the edge-dropout adjacency used for the contrastive
/// positives; it is only needed when `λ₁ > 0`.
pub fn step_loss(
    tape: &mut Tape,
    model: &IdclModel,
    params: &BoundParams,
    adjacency: &Arc<SparseOperator>,
    augmented: Option<&Arc<SparseOperator>>,
    batch: StepBatch<'_>,
) -> Result<StepLoss> {
    let cfg = &model.config;
    let weights = LossWeights::of(cfg);
    let n = batch.users.len();
    if n == 0 || batch.pos_items.len() != n || batch.neg_items.len() != n {
        return Err(Error::shape(
            "step_loss",
            format!("{n} users, {} positives, {} negatives", batch.pos_items.len(), batch.neg_items.len()),
        ));
    }
    let view = model.view(tape, params, adjacency)?;
    let u = model.user_rows(tape, &view, batch.users);
    let i = model.item_rows(tape, &view, batch.pos_items);
    let j = model.item_rows(tape, &view, batch.neg_items);
    let pos = paired_scores(tape, u, i)?;
    let neg = paired_scores(tape, u, j)?;
    let bpr = bpr_loss(tape, pos, neg)?;

    let wants_icl = weights.icl > 0.0;
    let wants_cr = weights.cr > 0.0;
    let mut icl = None;
    let mut rate_reduction = None;
    let mut rates = None;
    if wants_icl || wants_cr {
        let slices = model.slices(tape, params, &view, batch.users, batch.pos_items)?;
        let bases = view.bases.expect("disentangling view has bases");
        let probs = intent_confidence(tape, &slices, bases, cfg.tau)?;
        if wants_cr {
            let z = tape.concat_cols(&slices);
            let z = if cfg.cr_unit_rows { tape.normalize_rows(z, COSINE_EPS) } else { z };
            let pi = if cfg.stop_grad_pi { tape.detach(probs) } else { probs };
            let (loss, report) = rate_reduction_loss(tape, z, pi, cfg.epsilon)?;
            rate_reduction = Some(loss);
            rates = Some(report);
        }
        if wants_icl {
            let aug = augmented.ok_or_else(|| Error::Config("contrastive loss needs an augmented view".into()))?;
            let m = cfg.icl_batch.min(n);
            if m < 2 {
                return Err(Error::Sampling("contrastive loss needs at least two behaviors per batch".into()));
            }
            let rows: Vec<usize> = (0..m).collect();
            let aug_view = model.view(tape, params, aug)?;
            let positives = model.slices(tape, params, &aug_view, &batch.users[..m], &batch.pos_items[..m])?;
            let mut columns = Vec::with_capacity(slices.len());
            for (anchor, &positive) in slices.iter().zip(&positives) {
                let anchor = tape.gather_rows(*anchor, &rows);
                columns.push(subtask_logprob(tape, anchor, positive, cfg.tau, cfg.strict_contrast)?);
            }
            let logprobs = tape.concat_cols(&columns);
            let p = tape.gather_rows(probs, &rows);
            let p = if cfg.stop_grad_p { tape.detach(p) } else { p };
            icl = Some(icl_loss(tape, p, logprobs, cfg.icl_form())?);
        }
    }
    let l2 = l2_penalty(tape, params);
    let terms = LossTerms {
        bpr,
        icl,
        rate_reduction,
        l2,
    };
    let (total, breakdown) = total_loss(tape, terms, weights)?;
    Ok(StepLoss {
        total,
        terms,
        breakdown,
        rates,
    })
}

/// Gradients of `output` for every bound parameter that received one.
pub fn parameter_gradients(tape: &Tape, params: &BoundParams, output: Var) -> BTreeMap<String, Array2<f64>> {
    let mut grads = tape.backward(output);
    params
        .iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name.to_string(), g)))
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_recall: Option<f64>,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch,bpr,icl,dR,total,val_recall@20";

    pub fn log_line(&self) -> String {
        let val = self.val_recall.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{val}",
            self.epoch, self.loss.bpr, self.loss.icl, self.loss.rate_reduction, self.loss.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub evaluations: usize,
    /// Set when a step produced a non-finite loss; the best parameters seen
    /// so far are kept.
    pub aborted: Option<String>,
}

/// Owns the model, optimizer and sampling state of one run.
pub struct Trainer<'g> {
    graph: &'g InteractionGraph,
    split: &'g DatasetSplit,
    train_graph: InteractionGraph,
    adjacency: Arc<SparseOperator>,
    sampler: NegativeSampler,
    val_masked: Vec<Vec<usize>>,
    val_relevant: Vec<Vec<usize>>,
    pub model: IdclModel,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'g> Trainer<'g> {
    pub fn new(model: IdclModel, graph: &'g InteractionGraph, split: &'g DatasetSplit) -> Result<Self> {
        model.check()?;
        split.validate(graph)?;
        let train_graph = split.train_graph(graph);
        let adjacency = model.adjacency(&train_graph)?;
        let (val_masked, val_relevant) = fold_lists(graph, split, Fold::Val)?;
        Ok(Self {
            graph,
            split,
            sampler: NegativeSampler::new(graph, split),
            train_graph,
            adjacency,
            val_masked,
            val_relevant,
            optimizer: Adam::new(model.config.lr),
            rng: ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_1dc1),
            model,
            epoch: 0,
        })
    }

    /// Normalized adjacency of the training graph.
    pub fn adjacency(&self) -> &Arc<SparseOperator> {
        &self.adjacency
    }

    pub fn train_graph(&self) -> &InteractionGraph {
        &self.train_graph
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// One pass over the training behaviors; returns the mean breakdown.
    pub fn train_epoch(&mut self) -> Result<LossBreakdown> {
        self.epoch += 1;
        let cfg = &self.model.config;
        let augmented = if cfg.lambda_icl > 0.0 {
            let mask = edge_dropout(&self.train_graph, cfg.rho, self.rng.next_u64())?;
            Some(Arc::new(SparseOperator::new(normalized_adjacency_masked(&self.train_graph, &mask)?)))
        } else {
            None
        };
        let batches = epoch_batches(self.graph, self.split, &self.sampler, cfg.batch_size, &mut self.rng)?;
        let mut sum = LossBreakdown::default();
        for batch in &batches {
            let mut tape = Tape::new();
            let params = self.model.params.bind(&mut tape);
            let step = step_loss(
                &mut tape,
                &self.model,
                &params,
                &self.adjacency,
                augmented.as_ref(),
                StepBatch {
                    users: &batch.users,
                    pos_items: &batch.pos_items,
                    neg_items: &batch.neg_items,
                },
            )?;
            let grads = parameter_gradients(&tape, &params, step.total);
            if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at epoch {}", self.epoch)));
            }
            self.optimizer.step(&mut self.model.params, &grads)?;
            sum.accumulate(&step.breakdown);
        }
        Ok(sum.scaled(1.0 / batches.len().max(1) as f64))
    }

    /// Validation metrics of the current parameters.
    pub fn validate(&self) -> Result<Metrics> {
        let emb = self.model.embeddings(&self.adjacency)?;
        evaluate_embeddings(
            emb.users(),
            emb.items(),
            &self.val_masked,
            &self.val_relevant,
            &[SELECTION_K],
            self.model.config.recall_denominator,
        )
    }

    /// Trains until validation Recall@20 stops improving for `patience`
    /// evaluations or `max_epochs` is reached, then restores the best
    /// parameters. `on_epoch` sees every record as it is produced.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitReport> {
        let cfg = self.model.config.clone();
        if self.val_relevant.iter().all(Vec::is_empty) {
            return Err(Error::Evaluation("validation fold is empty".into()));
        }
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut stale = 0;
        let mut history = Vec::new();
        let mut evaluations = 0;
        let mut aborted = None;
        for _ in 0..cfg.max_epochs {
            let loss = match self.train_epoch() {
                Ok(loss) => loss,
                Err(Error::NonFinite(msg)) => {
                    log::warn!("stopping: {msg}");
                    aborted = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            };
            let epoch = self.epoch;
            let due = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
            let val_recall = if due {
                evaluations += 1;
                let r = self.validate()?.recall(SELECTION_K).expect("selection cutoff evaluated");
                Some(r)
            } else {
                None
            };
            let record = EpochRecord { epoch, loss, val_recall };
            log::info!("{}", record.log_line());
            on_epoch(&record);
            history.push(record);
            if let Some(r) = val_recall {
                if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                    best = Some((r, epoch, self.model.params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience.max(1) {
                        break;
                    }
                }
            }
        }
        let (best_val_recall, best_epoch) = match best {
            Some((r, e, params)) => {
                self.model.params = params;
                (r, e)
            }
            None => {
                let r = self.validate()?.recall(SELECTION_K).unwrap_or(0.0);
                (r, self.epoch)
            }
        };
        Ok(FitReport {
            history,
            best_epoch,
            best_val_recall,
            evaluations,
            aborted,
        })
    }
}

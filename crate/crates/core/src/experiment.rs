//! One training run end to end, and the analyses of a trained model.

use std::path::{Path, PathBuf};

use crate::analysis::{
    self, distribution_table, embedding_table, entropy, intent_block_similarity, intent_proportions, matrix_table,
    proportions_table, user_block_similarity, BlockSimilarity,
};
use crate::config::TrainConfig;
use crate::data::{split, split_holdout, DatasetSplit, Fold, InteractionGraph, SplitMode};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, Metrics};
use crate::model::{dataset_hash, GraphShape, IdclModel};
use crate::trainer::{EpochRecord, FitReport, Trainer};

/// The interaction-holdout split a config asks for.
pub fn config_split(graph: &InteractionGraph, config: &TrainConfig) -> Result<DatasetSplit> {
    if config.heldout_users > 0 {
        let mode = SplitMode::HeldoutUsers {
            val_users: config.heldout_users,
            test_users: config.heldout_users,
            eval_frac: config.heldout_frac,
        };
        return split(graph, mode, config.seed);
    }
    split_holdout(graph, config.val_frac, config.test_frac, config.seed)
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: IdclModel,
    pub fit: FitReport,
    pub val: Metrics,
    pub test: Metrics,
    pub dataset_hash: String,
}

/// Initializes from `config.seed`, fits with early stopping and evaluates
/// the restored parameters on both held-out folds.
pub fn train_run(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedRun> {
    let model = IdclModel::new(config.clone(), GraphShape::of(graph), config.seed)?;
    let mut trainer = Trainer::new(model, graph, split)?;
    let fit = trainer.fit(on_epoch)?;
    let model = trainer.model;
    let val = evaluate_model(&model, graph, split, Fold::Val)?;
    let test = evaluate_model(&model, graph, split, Fold::Test)?;
    Ok(TrainedRun {
        model,
        fit,
        val,
        test,
        dataset_hash: dataset_hash(graph, split),
    })
}

/// Metrics of `model` on `fold`, propagating over the training graph.
pub fn evaluate_model(model: &IdclModel, graph: &InteractionGraph, split: &DatasetSplit, fold: Fold) -> Result<Metrics> {
    let adj = model.adjacency(&split.train_graph(graph))?;
    let emb = model.embeddings(&adj)?;
    let cfg = &model.config;
    evaluate(&emb, graph, split, fold, &cfg.eval_ks, cfg.recall_denominator)
}

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    /// Behavior slices grouped by argmax intent.
    pub behavior: BlockSimilarity,
    /// User readouts cut into `K` blocks.
    pub user: BlockSimilarity,
    /// Share of training behaviors per argmax intent.
    pub proportions: Vec<f64>,
    pub entropy: f64,
    /// `p(k|e)` for every training behavior, in split order.
    pub distributions: ndarray::Array2<f64>,
    pub behaviors: Vec<(usize, usize)>,
}

/// Runs every analysis on the training behaviors of `split`.
pub fn analyze_model(
    model: &IdclModel,
    graph: &InteractionGraph,
    split: &DatasetSplit,
    n_samples: usize,
    seed: u64,
) -> Result<AnalysisReport> {
    if !model.config.disentangles() {
        return Err(Error::Config("the lightgcn variant has no intents to analyze".into()));
    }
    let adj = model.adjacency(&split.train_graph(graph))?;
    let emb = model.embeddings(&adj)?;
    let behaviors: Vec<(usize, usize)> = split.train.iter().map(|&e| graph.user_item_edges[e]).collect();
    let users: Vec<usize> = behaviors.iter().map(|b| b.0).collect();
    let items: Vec<usize> = behaviors.iter().map(|b| b.1).collect();
    let distributions = model.intent_distribution(&emb, &users, &items)?;
    let proportions = intent_proportions(distributions.view())?;
    Ok(AnalysisReport {
        behavior: intent_block_similarity(model, &emb, &users, &items, n_samples, seed)?,
        user: user_block_similarity(emb.users(), model.config.intents, n_samples, seed)?,
        entropy: entropy(&proportions),
        proportions,
        distributions,
        behaviors,
    })
}

fn str_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Writes the analysis tables and the embedding exports into `dir`; returns
/// the written paths. Slice exports cover the first `slice_rows` training
/// behaviors.
pub fn write_analysis(
    dir: &Path,
    report: &AnalysisReport,
    model: &IdclModel,
    graph: &InteractionGraph,
    split: &DatasetSplit,
    top_m: usize,
    slice_rows: usize,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        analysis::write_table(&path, &text)?;
        written.push(path);
        Ok(())
    };
    put("behavior_block_similarity.csv", matrix_table(report.behavior.matrix.view(), "s"))?;
    put("behavior_block_means.csv", matrix_table(report.behavior.block_means.view(), "k"))?;
    put("user_block_means.csv", matrix_table(report.user.block_means.view(), "k"))?;
    put("intent_proportions.csv", proportions_table(&report.proportions))?;
    let user_ids: Vec<&str> = report.behaviors.iter().map(|b| graph.users.name(b.0)).collect();
    let item_ids: Vec<&str> = report.behaviors.iter().map(|b| graph.items.name(b.1)).collect();
    put(
        "behavior_distributions.csv",
        distribution_table(&user_ids, &item_ids, report.distributions.view(), top_m)?,
    )?;

    let adj = model.adjacency(&split.train_graph(graph))?;
    let emb = model.embeddings(&adj)?;
    put("user_embeddings.csv", embedding_table(&str_refs(graph.users.names()), emb.users())?)?;
    put("item_embeddings.csv", embedding_table(&str_refs(graph.items.names()), emb.items())?)?;
    let sample = &report.behaviors[..slice_rows.min(report.behaviors.len())];
    let users: Vec<usize> = sample.iter().map(|b| b.0).collect();
    let items: Vec<usize> = sample.iter().map(|b| b.1).collect();
    let ids: Vec<String> = user_ids.iter().zip(&item_ids).take(sample.len()).map(|(u, i)| format!("{u}:{i}")).collect();
    for (k, slice) in model.behavior_slices(&emb, &users, &items)?.iter().enumerate() {
        put(&format!("behavior_slice_{k}.csv"), embedding_table(&str_refs(&ids), slice.view())?)?;
    }
    Ok(written)
}

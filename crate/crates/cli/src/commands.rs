use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use idcl_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use idcl_core::data::{read_split_manifest, write_split_manifest, DatasetSource, DatasetSplit, Fold, InteractionGraph};
use idcl_core::experiment::{analyze_model, config_split, evaluate_model, train_run, write_analysis};
use idcl_core::model::dataset_hash;
use idcl_core::trainer::EpochRecord;
use idcl_core::{Error, Metrics, MetricsReport, Result, TrainConfig, Variant};

use crate::fetch::{download, unpack_ml100k, verify};
use crate::manifest::{code_version, sha256_hex, RunManifest};
use crate::{DatasetArgs, RunArgs};

const CHECKPOINT: &str = "checkpoint.bin";
const LOG: &str = "log.csv";
const TEST_METRICS: &str = "metrics.tsv";
const VAL_METRICS: &str = "val_metrics.tsv";
const LAYOUT: &str = "<out>/<dataset>/<variant>/<seed>";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn fetch(out: &Path, url: &str, sha256: Option<&str>) -> Result<()> {
    let bytes = download(url)?;
    let sum = match sha256 {
        Some(expected) => verify(&bytes, expected)?,
        None => {
            let sum = sha256_hex(&bytes);
            eprintln!("warning: no --sha256 given; archive sha256 is {sum}");
            sum
        }
    };
    let files = unpack_ml100k(&bytes, out)?;
    println!("fetched {url} (sha256 {sum})");
    for f in files {
        println!("  {}", f.display());
    }
    Ok(())
}

fn source(args: &DatasetArgs) -> Result<DatasetSource> {
    let mut src = match (&args.interactions, &args.concepts) {
        (Some(inter), Some(concepts)) => DatasetSource {
            name: args.dataset.clone(),
            interactions: inter.clone(),
            interaction_format: args.interaction_format.parse()?,
            concepts: concepts.clone(),
            concept_format: args.concept_format.parse()?,
            min_rating: 1.0,
            exclude_concepts: Vec::new(),
        },
        _ if args.dataset == "ml-100k" => {
            let dir = args.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/ml-100k"));
            DatasetSource::movielens_100k(&dir)?
        }
        _ => {
            return Err(Error::Config(format!(
                "dataset `{}` needs --interactions and --concepts",
                args.dataset
            )))
        }
    };
    if let Some(r) = args.min_rating {
        src.min_rating = r;
    }
    Ok(src)
}

fn base_config(run: &RunArgs) -> Result<TrainConfig> {
    let cfg = match &run.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let mut cfg = cfg.with_variant(run.variant);
    if let Some(n) = run.heldout_users {
        cfg.heldout_users = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(run: &RunArgs, cfg: &TrainConfig) -> Vec<u64> {
    match (run.seed, run.seeds.is_empty()) {
        (Some(s), _) => vec![s],
        (None, false) => run.seeds.clone(),
        (None, true) => vec![cfg.seed],
    }
}

fn run_dir(out: &Path, dataset: &str, variant: Variant, seed: u64) -> PathBuf {
    out.join(dataset).join(variant.as_str()).join(seed.to_string())
}

fn split_path(out: &Path, dataset: &str, seed: u64) -> PathBuf {
    out.join(dataset).join("prepared").join(format!("split_{seed}.tsv"))
}

/// The split for `cfg`, written on first use and checked against the
/// manifest afterwards.
fn prepared_split(out: &Path, dataset: &str, graph: &InteractionGraph, cfg: &TrainConfig) -> Result<DatasetSplit> {
    let split = config_split(graph, cfg)?;
    let path = split_path(out, dataset, cfg.seed);
    if path.is_file() {
        let stored = read_split_manifest(&path, graph)?;
        if stored.train != split.train || stored.val != split.val || stored.test != split.test {
            return Err(Error::Config(format!(
                "{} was written with other split settings; move it away or keep the split.* settings",
                path.display()
            )));
        }
    } else {
        let dir = path.parent().expect("split path has a parent");
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_split_manifest(&path, graph, &split)?;
    }
    Ok(split)
}

pub fn prepare(run: &RunArgs) -> Result<()> {
    let src = source(&run.data)?;
    let graph = src.load()?;
    let cfg = base_config(run)?;
    println!(
        "{}: {} users, {} items, {} concepts, {} interactions, {} memberships",
        src.name,
        graph.num_users(),
        graph.num_items(),
        graph.num_concepts(),
        graph.num_behaviors(),
        graph.item_concept_edges.len()
    );
    let dir = run.out.join(&src.name).join("prepared");
    let mut manifest = RunManifest::read(&dir)?.unwrap_or(RunManifest {
        code_version: code_version(),
        dataset: src.name.clone(),
        dataset_hash: String::new(),
        variant: "-".into(),
        seeds: Vec::new(),
        config_hash: String::new(),
        config: String::new(),
        deterministic: true,
        layout: format!("{}/prepared", "<out>/<dataset>"),
        files: Vec::new(),
    });
    for seed in seeds(run, &cfg) {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let split = prepared_split(&run.out, &src.name, &graph, &cfg)?;
        println!(
            "seed {seed}: {} train / {} val / {} test -> {}",
            split.train.len(),
            split.val.len(),
            split.test.len(),
            split_path(&run.out, &src.name, seed).display()
        );
        if !manifest.seeds.contains(&seed) {
            manifest.seeds.push(seed);
            manifest.seeds.sort_unstable();
        }
        manifest.list(format!("split_{seed}.tsv"));
    }
    let concepts: Vec<_> = graph.concepts.names().to_vec();
    let summary = format!(
        "users\t{}\nitems\t{}\nconcepts\t{}\ninteractions\t{}\nmemberships\t{}\nconcept_names\t{}\n",
        graph.num_users(),
        graph.num_items(),
        graph.num_concepts(),
        graph.num_behaviors(),
        graph.item_concept_edges.len(),
        concepts.join(",")
    );
    let path = dir.join("graph.tsv");
    std::fs::write(&path, summary).map_err(io_err(&path))?;
    manifest.list("graph.tsv");
    manifest.write(&dir)
}

fn write_metrics(path: &Path, m: &Metrics) -> Result<()> {
    std::fs::write(path, m.to_text()).map_err(io_err(path))
}

pub fn train(run: &RunArgs, deterministic: bool, force: bool) -> Result<()> {
    let src = source(&run.data)?;
    let graph = src.load()?;
    let base = base_config(run)?;
    for seed in seeds(run, &base) {
        let cfg = TrainConfig { seed, ..base.clone() };
        let dir = run_dir(&run.out, &src.name, cfg.variant, seed);
        let config_text = cfg.to_text();
        let config_hash = sha256_hex(config_text.as_bytes());
        if let Some(existing) = RunManifest::read(&dir)? {
            if existing.config_hash == config_hash && dir.join(CHECKPOINT).is_file() && !force {
                println!("{}: already trained with this config, skipping", dir.display());
                continue;
            }
            if !force {
                return Err(Error::Config(format!(
                    "{} holds a run with a different config; pass --force to replace it",
                    dir.display()
                )));
            }
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let split = prepared_split(&run.out, &src.name, &graph, &cfg)?;
        let log_path = dir.join(LOG);
        let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
        writeln!(log, "{}", EpochRecord::HEADER).map_err(io_err(&log_path))?;
        let mut log_failure = None;
        let trained = train_run(&graph, &split, &cfg, |record| {
            if let Err(e) = writeln!(log, "{}", record.log_line()) {
                log_failure.get_or_insert(e);
            }
        })?;
        log.flush().map_err(io_err(&log_path))?;
        if let Some(e) = log_failure {
            return Err(Error::io(&log_path, e));
        }
        let meta = CheckpointMeta {
            config: cfg.clone(),
            shape: trained.model.shape,
            dataset_hash: trained.dataset_hash.clone(),
            best_epoch: Some(trained.fit.best_epoch),
            best_val_recall: Some(trained.fit.best_val_recall),
        };
        save_checkpoint(&dir.join(CHECKPOINT), &trained.model, &meta)?;
        write_metrics(&dir.join(TEST_METRICS), &trained.test)?;
        write_metrics(&dir.join(VAL_METRICS), &trained.val)?;
        let mut manifest = RunManifest {
            code_version: code_version(),
            dataset: src.name.clone(),
            dataset_hash: trained.dataset_hash.clone(),
            variant: cfg.variant.to_string(),
            seeds: vec![seed],
            config_hash,
            config: config_text,
            deterministic,
            layout: LAYOUT.into(),
            files: Vec::new(),
        };
        for f in [CHECKPOINT, LOG, TEST_METRICS, VAL_METRICS] {
            manifest.list(f);
        }
        manifest.write(&dir)?;
        if let Some(reason) = &trained.fit.aborted {
            eprintln!("warning: seed {seed} stopped early: {reason}");
        }
        println!(
            "{} seed {seed}: best epoch {} of {}, val recall@20 {:.4}, test recall@20 {:.4} -> {}",
            cfg.variant,
            trained.fit.best_epoch,
            trained.fit.history.len(),
            trained.val.recall(20).unwrap_or(f64::NAN),
            trained.test.recall(20).unwrap_or(f64::NAN),
            dir.display()
        );
    }
    Ok(())
}

/// Loads the checkpoint of one run and the graph and split it was trained on.
fn load_run(
    out: &Path,
    dataset: &str,
    variant: Variant,
    seed: u64,
    graph: &InteractionGraph,
) -> Result<(idcl_core::IdclModel, DatasetSplit, PathBuf)> {
    let dir = run_dir(out, dataset, variant, seed);
    let (model, meta) = load_checkpoint(&dir.join(CHECKPOINT))?;
    let split = config_split(graph, &model.config)?;
    let hash = dataset_hash(graph, &split);
    if hash != meta.dataset_hash {
        return Err(Error::Checkpoint(format!(
            "{} was trained on different data (dataset hash {} vs {hash})",
            dir.display(),
            meta.dataset_hash
        )));
    }
    Ok((model, split, dir))
}

fn parse_fold(fold: &str) -> Result<Fold> {
    match fold {
        "val" => Ok(Fold::Val),
        "test" => Ok(Fold::Test),
        _ => Err(Error::Config(format!("fold must be `val` or `test`, got `{fold}`"))),
    }
}

pub fn evaluate(run: &RunArgs, fold: &str) -> Result<()> {
    let fold = parse_fold(fold)?;
    let src = source(&run.data)?;
    let graph = src.load()?;
    let cfg = base_config(run)?;
    let seeds = seeds(run, &cfg);
    let mut runs = Vec::new();
    let mut table = String::from("seed");
    for seed in &seeds {
        let (model, split, _) = load_run(&run.out, &src.name, run.variant, *seed, &graph)?;
        let m = evaluate_model(&model, &graph, &split, fold)?;
        if runs.is_empty() {
            for k in m.values.keys() {
                let _ = write!(table, "\t{k}");
            }
            table.push('\n');
        }
        let _ = write!(table, "{seed}");
        for v in m.values.values() {
            let _ = write!(table, "\t{v:.6}");
        }
        table.push('\n');
        runs.push(m);
    }
    let report = MetricsReport::aggregate(runs)?;
    for (label, map) in [("mean", &report.mean), ("std", &report.std)] {
        let _ = write!(table, "{label}");
        for v in map.values() {
            let _ = write!(table, "\t{v:.6}");
        }
        table.push('\n');
    }
    let path = run
        .out
        .join(&src.name)
        .join(run.variant.as_str())
        .join(format!("evaluation_{}.tsv", fold.as_str()));
    std::fs::write(&path, &table).map_err(io_err(&path))?;
    print!("{}", report.to_text());
    println!("-> {}", path.display());
    Ok(())
}

pub fn analyze(run: &RunArgs, samples: usize, top: usize, slice_rows: usize) -> Result<()> {
    let src = source(&run.data)?;
    let graph = src.load()?;
    let cfg = base_config(run)?;
    for seed in seeds(run, &cfg) {
        let (model, split, dir) = load_run(&run.out, &src.name, run.variant, seed, &graph)?;
        let report = analyze_model(&model, &graph, &split, samples, seed)?;
        let adir = dir.join("analysis");
        let files = write_analysis(&adir, &report, &model, &graph, &split, top, slice_rows)?;
        let (within, cross) = report.behavior.within_and_cross();
        let (uw, uc) = report.user.within_and_cross();
        let summary = format!(
            "behavior_within\t{within:.6}\nbehavior_cross\t{cross:.6}\nuser_within\t{uw:.6}\nuser_cross\t{uc:.6}\n\
             proportion_entropy\t{:.6}\nomitted_groups\t{:?}\n",
            report.entropy, report.behavior.omitted
        );
        let spath = adir.join("summary.tsv");
        std::fs::write(&spath, &summary).map_err(io_err(&spath))?;
        let mut manifest = RunManifest::read(&dir)?
            .ok_or_else(|| Error::Config(format!("{} has no manifest", dir.display())))?;
        for f in files.iter().chain(std::iter::once(&spath)) {
            let rel = f.strip_prefix(&dir).unwrap_or(f);
            manifest.list(rel.to_string_lossy().into_owned());
        }
        manifest.write(&dir)?;
        println!(
            "{} seed {seed}: within {within:.4}, cross {cross:.4}, entropy {:.4} -> {}",
            run.variant,
            report.entropy,
            adir.display()
        );
    }
    Ok(())
}

pub fn compare(data: &DatasetArgs, variants: &[Variant], seeds: &[u64], out: &Path) -> Result<()> {
    let name = &data.dataset;
    let columns = ["recall@20", "recall@50", "recall@100", "ndcg@100"];
    let mut grid = format!("method\t{}\n", columns.join("\t"));
    let mut ablation = format!(
        "method\t{}\tmean\n",
        seeds.iter().map(|s| format!("seed{s}")).collect::<Vec<_>>().join("\t")
    );
    let mut hashes: Vec<Option<String>> = vec![None; seeds.len()];
    for &variant in variants {
        let mut runs = Vec::new();
        for (slot, &seed) in seeds.iter().enumerate() {
            let dir = run_dir(out, name, variant, seed);
            let manifest = RunManifest::read(&dir)?
                .ok_or_else(|| Error::Config(format!("{} has no trained run", dir.display())))?;
            match &hashes[slot] {
                Some(h) if *h != manifest.dataset_hash => {
                    return Err(Error::Config(format!(
                        "{} used a different dataset or split than the other variants for seed {seed}",
                        dir.display()
                    )))
                }
                Some(_) => {}
                None => hashes[slot] = Some(manifest.dataset_hash.clone()),
            }
            let path = dir.join(TEST_METRICS);
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            runs.push(Metrics::parse(&text)?);
        }
        let per_seed: Vec<f64> = runs.iter().map(|m| m.recall(20).unwrap_or(f64::NAN)).collect();
        let report = MetricsReport::aggregate(runs)?;
        let _ = write!(grid, "{variant}");
        for c in columns {
            match (report.mean.get(c), report.std.get(c)) {
                (Some(m), Some(s)) => {
                    let _ = write!(grid, "\t{m:.4}±{s:.4}");
                }
                _ => grid.push_str("\t-"),
            }
        }
        grid.push('\n');
        let _ = write!(ablation, "{variant}");
        for v in &per_seed {
            let _ = write!(ablation, "\t{v:.4}");
        }
        let _ = writeln!(ablation, "\t{:.4}", per_seed.iter().sum::<f64>() / per_seed.len() as f64);
    }
    let text = format!("# test metrics, mean±std over seeds\n{grid}\n# recall@20 per seed\n{ablation}");
    let path = out.join(name).join("compare.tsv");
    std::fs::write(&path, &text).map_err(io_err(&path))?;
    print!("{text}");
    println!("-> {}", path.display());
    Ok(())
}

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::graph::InteractionGraph;
use crate::error::{Error, Result};

/// Which fold a behavior belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl Fold {
    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        }
    }
}

/// How held-out behaviors are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Every user keeps most behaviors in train and holds out a fraction for
    /// validation and test.
    Interactions { val_frac: f64, test_frac: f64 },
    /// A sample of users is held out; for each held-out user, `eval_frac` of
    /// their behaviors is reported on and the rest stay in the graph.
    HeldoutUsers {
        val_users: usize,
        test_users: usize,
        eval_frac: f64,
    },
}

/// Partition of the behaviors of an [`InteractionGraph`] into folds. Entries
/// index `graph.user_item_edges`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

fn by_user(graph: &InteractionGraph) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); graph.num_users()];
    for (idx, &(u, _)) in graph.user_item_edges.iter().enumerate() {
        out[u].push(idx);
    }
    out
}

fn round_count(n: usize, frac: f64) -> usize {
    (n as f64 * frac).round() as usize
}

/// Splits each user's behaviors into train/val/test.
///
/// A user keeps at least one training behavior; with a single behavior
/// nothing is held out.
pub fn split_holdout(graph: &InteractionGraph, val_frac: f64, test_frac: f64, seed: u64) -> Result<DatasetSplit> {
    split(graph, SplitMode::Interactions { val_frac, test_frac }, seed)
}

pub fn split(graph: &InteractionGraph, mode: SplitMode, seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    let groups = by_user(graph);
    match mode {
        SplitMode::Interactions { val_frac, test_frac } => {
            check_fraction(val_frac, "val_frac")?;
            check_fraction(test_frac, "test_frac")?;
            if val_frac + test_frac >= 1.0 {
                return Err(Error::Config(format!(
                    "val_frac + test_frac must be < 1, got {}",
                    val_frac + test_frac
                )));
            }
            for mut edges in groups {
                edges.shuffle(&mut rng);
                let n = edges.len();
                let mut n_test = round_count(n, test_frac);
                let mut n_val = round_count(n, val_frac);
                while n_test + n_val >= n && n_test + n_val > 0 {
                    if n_test >= n_val && n_test > 0 {
                        n_test -= 1;
                    } else {
                        n_val -= 1;
                    }
                }
                out.test.extend_from_slice(&edges[..n_test]);
                out.val.extend_from_slice(&edges[n_test..n_test + n_val]);
                out.train.extend_from_slice(&edges[n_test + n_val..]);
            }
        }
        SplitMode::HeldoutUsers {
            val_users,
            test_users,
            eval_frac,
        } => {
            check_fraction(eval_frac, "eval_frac")?;
            // Only users with at least two behaviors can be held out.
            let mut eligible: Vec<usize> = (0..graph.num_users()).filter(|&u| groups[u].len() >= 2).collect();
            if val_users + test_users > eligible.len() {
                return Err(Error::Config(format!(
                    "asked for {} held-out users, only {} have two or more behaviors",
                    val_users + test_users,
                    eligible.len()
                )));
            }
            eligible.shuffle(&mut rng);
            let mut role = vec![None; graph.num_users()];
            for &u in &eligible[..val_users] {
                role[u] = Some(Fold::Val);
            }
            for &u in &eligible[val_users..val_users + test_users] {
                role[u] = Some(Fold::Test);
            }
            for (u, mut edges) in groups.into_iter().enumerate() {
                let Some(fold) = role[u] else {
                    out.train.extend(edges);
                    continue;
                };
                edges.shuffle(&mut rng);
                let n_eval = round_count(edges.len(), eval_frac).clamp(1, edges.len() - 1);
                let target = if fold == Fold::Val { &mut out.val } else { &mut out.test };
                target.extend_from_slice(&edges[..n_eval]);
                out.train.extend_from_slice(&edges[n_eval..]);
            }
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

fn check_fraction(v: f64, name: &str) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
    }
    Ok(())
}

impl DatasetSplit {
    /// Fold of every behavior, indexed like `graph.user_item_edges`.
    pub fn folds(&self, num_behaviors: usize) -> Vec<Option<Fold>> {
        let mut out = vec![None; num_behaviors];
        for (list, fold) in [(&self.train, Fold::Train), (&self.val, Fold::Val), (&self.test, Fold::Test)] {
            for &e in list {
                out[e] = Some(fold);
            }
        }
        out
    }

    /// Checks that the folds partition the behaviors of `graph`.
    pub fn validate(&self, graph: &InteractionGraph) -> Result<()> {
        let mut seen = vec![false; graph.num_behaviors()];
        for &e in self.train.iter().chain(&self.val).chain(&self.test) {
            if e >= seen.len() {
                return Err(Error::Graph(format!("split references behavior {e} outside the graph")));
            }
            if std::mem::replace(&mut seen[e], true) {
                return Err(Error::Graph(format!("behavior {e} appears in two folds")));
            }
        }
        if let Some(e) = seen.iter().position(|s| !s) {
            return Err(Error::Graph(format!("behavior {e} is in no fold")));
        }
        Ok(())
    }

    /// The graph restricted to training behaviors; the node set is unchanged.
    pub fn train_graph(&self, graph: &InteractionGraph) -> InteractionGraph {
        graph.with_behaviors(self.train.iter().map(|&e| graph.user_item_edges[e]).collect())
    }

    fn items_by_user(&self, graph: &InteractionGraph, list: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); graph.num_users()];
        for &e in list {
            let (u, i) = graph.user_item_edges[e];
            out[u].push(i);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    pub fn train_items(&self, graph: &InteractionGraph) -> Vec<Vec<usize>> {
        self.items_by_user(graph, &self.train)
    }

    pub fn val_items(&self, graph: &InteractionGraph) -> Vec<Vec<usize>> {
        self.items_by_user(graph, &self.val)
    }

    pub fn test_items(&self, graph: &InteractionGraph) -> Vec<Vec<usize>> {
        self.items_by_user(graph, &self.test)
    }
}

/// Writes `user \t item \t fold` rows with raw ids, in behavior order.
pub fn write_split_manifest(path: &Path, graph: &InteractionGraph, split: &DatasetSplit) -> Result<()> {
    split.validate(graph)?;
    let folds = split.folds(graph.num_behaviors());
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "# seed={}", split.seed).map_err(io)?;
    for (&(u, i), fold) in graph.user_item_edges.iter().zip(folds) {
        writeln!(
            w,
            "{}\t{}\t{}",
            graph.users.name(u),
            graph.items.name(i),
            fold.expect("validated").as_str()
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a manifest written by [`write_split_manifest`] against the same graph.
pub fn read_split_manifest(path: &Path, graph: &InteractionGraph) -> Result<DatasetSplit> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed: 0,
    };
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = idx + 1;
        if let Some(rest) = line.strip_prefix("# seed=") {
            split.seed = rest.trim().parse().map_err(|_| parse(line_no, format!("bad seed `{rest}`")))?;
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse(line_no, "expected `user \\t item \\t fold`".into()));
        }
        let u = graph
            .users
            .get(fields[0])
            .ok_or_else(|| parse(line_no, format!("unknown user `{}`", fields[0])))?;
        let i = graph
            .items
            .get(fields[1])
            .ok_or_else(|| parse(line_no, format!("unknown item `{}`", fields[1])))?;
        let e = graph
            .behavior_index(u, i)
            .ok_or_else(|| parse(line_no, format!("({}, {}) is not a behavior", fields[0], fields[1])))?;
        match fields[2] {
            "train" => split.train.push(e),
            "val" => split.val.push(e),
            "test" => split.test.push(e),
            other => return Err(parse(line_no, format!("unknown fold `{other}`"))),
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split.validate(graph)?;
    Ok(split)
}

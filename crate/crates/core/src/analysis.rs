//! Interpretability exports: intent block similarity, per-behavior intent
//! distributions, intent proportions and embedding tables.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Embeddings, IdclModel};

/// Pairwise cosine similarities over slices grouped by intent.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSimilarity {
    /// Square matrix over all sampled slices, group by group.
    pub matrix: Array2<f64>,
    /// `K x K` mean of each block; `NaN` rows and columns for omitted groups.
    pub block_means: Array2<f64>,
    /// Samples taken per group.
    pub sizes: Vec<usize>,
    /// Groups with no samples.
    pub omitted: Vec<usize>,
}

impl BlockSimilarity {
    /// Mean of the diagonal blocks and mean of the off-diagonal blocks, over
    /// the groups that were sampled.
    pub fn within_and_cross(&self) -> (f64, f64) {
        let k = self.sizes.len();
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for a in 0..k {
            for b in 0..k {
                let v = self.block_means[[a, b]];
                if v.is_nan() {
                    continue;
                }
                if a == b {
                    within += v;
                    nw += 1;
                } else {
                    cross += v;
                    nc += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        (mean(within, nw), mean(cross, nc))
    }
}

fn unit_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(crate::contrastive::COSINE_EPS);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Cosine similarity blocks over `groups[k]` (`n_k x w` each, equal widths).
pub fn block_similarity(groups: &[Array2<f64>]) -> Result<BlockSimilarity> {
    let k = groups.len();
    if k == 0 {
        return Err(Error::shape("block_similarity", "no groups"));
    }
    let width = groups[0].ncols();
    if groups.iter().any(|g| g.ncols() != width) {
        return Err(Error::shape("block_similarity", "groups have different widths"));
    }
    let sizes: Vec<usize> = groups.iter().map(Array2::nrows).collect();
    let omitted: Vec<usize> = (0..k).filter(|&g| sizes[g] == 0).collect();
    let views: Vec<_> = groups.iter().map(|g| g.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape("block_similarity", e.to_string()))?;
    let unit = unit_rows(all.view());
    let matrix = unit.dot(&unit.t());
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();
    let block_means = Array2::from_shape_fn((k, k), |(a, b)| {
        if sizes[a] == 0 || sizes[b] == 0 {
            return f64::NAN;
        }
        matrix
            .slice(s![offsets[a]..offsets[a] + sizes[a], offsets[b]..offsets[b] + sizes[b]])
            .mean()
            .unwrap_or(f64::NAN)
    });
    Ok(BlockSimilarity {
        matrix,
        block_means,
        sizes,
        omitted,
    })
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(probs: ArrayView2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax intent is `k`, for every `k`.
pub fn intent_proportions(probs: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (n, k) = probs.dim();
    if n == 0 || k == 0 {
        return Err(Error::shape("intent_proportions", format!("{n}x{k} distribution matrix")));
    }
    let mut counts = vec![0usize; k];
    for a in argmax_rows(probs) {
        counts[a] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Samples up to `n_samples` behaviors per argmax intent and compares each
/// behavior's own-intent slice.
pub fn intent_block_similarity(
    model: &IdclModel,
    emb: &Embeddings,
    users: &[usize],
    items: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<BlockSimilarity> {
    let probs = model.intent_distribution(emb, users, items)?;
    let slices = model.behavior_slices(emb, users, items)?;
    let k = slices.len();
    let mut members = vec![Vec::new(); k];
    for (e, a) in argmax_rows(probs.view()).into_iter().enumerate() {
        members[a].push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Array2<f64>> = members
        .iter_mut()
        .enumerate()
        .map(|(g, m)| {
            m.shuffle(&mut rng);
            m.truncate(n_samples);
            m.sort_unstable();
            slices[g].select(Axis(0), m)
        })
        .collect();
    let report = block_similarity(&groups)?;
    if !report.omitted.is_empty() {
        log::info!("intent groups with no behaviors: {:?}", report.omitted);
    }
    Ok(report)
}

/// The same comparison over user readouts cut into `k` contiguous blocks.
pub fn user_block_similarity(users: ArrayView2<f64>, k: usize, n_samples: usize, seed: u64) -> Result<BlockSimilarity> {
    let d = users.ncols();
    if k == 0 || d % k != 0 {
        return Err(Error::Config(format!("cannot cut width {d} into {k} blocks")));
    }
    let mut rows: Vec<usize> = (0..users.nrows()).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rows.truncate(n_samples);
    rows.sort_unstable();
    let sampled = users.select(Axis(0), &rows);
    let w = d / k;
    let groups: Vec<_> = (0..k).map(|b| sampled.slice(s![.., b * w..(b + 1) * w]).to_owned()).collect();
    block_similarity(&groups)
}

/// Indices of the `m` largest entries of `row`, largest first.
pub fn top_intents(row: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `user,item,p0..p{K-1},top` rows; `top` lists the `top_m` strongest
/// intents separated by `;`.
pub fn distribution_table(user_ids: &[&str], item_ids: &[&str], probs: ArrayView2<f64>, top_m: usize) -> Result<String> {
    if user_ids.len() != probs.nrows() || item_ids.len() != probs.nrows() {
        return Err(Error::shape("distribution_table", "one id pair per row is required"));
    }
    let mut out = String::from("user,item");
    for k in 0..probs.ncols() {
        let _ = write!(out, ",p{k}");
    }
    out.push_str(",top\n");
    for (r, row) in probs.rows().into_iter().enumerate() {
        let _ = write!(out, "{},{}", user_ids[r], item_ids[r]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        let top: Vec<String> = top_intents(&row.to_vec(), top_m)
            .iter()
            .map(usize::to_string)
            .collect();
        let _ = writeln!(out, ",{}", top.join(";"));
    }
    Ok(out)
}

/// `id,v0,..` rows.
pub fn embedding_table(ids: &[&str], rows: ArrayView2<f64>) -> Result<String> {
    if ids.len() != rows.nrows() {
        return Err(Error::shape("embedding_table", format!("{} ids for {} rows", ids.len(), rows.nrows())));
    }
    let mut out = String::from("id");
    for c in 0..rows.ncols() {
        let _ = write!(out, ",v{c}");
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(rows.rows()) {
        out.push_str(id);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, ids: &[&str], rows: ArrayView2<f64>) -> Result<()> {
    write_text(path, &embedding_table(ids, rows)?)
}

/// Parses a table written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::EmptyInput(path.to_path_buf()))?;
    let width = header.split(',').count() - 1;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (n, line) in lines.enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 2,
            message,
        };
        let mut fields = line.split(',');
        ids.push(fields.next().unwrap_or_default().to_string());
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != width {
            return Err(parse_err(format!("{} values, header has {width}", values.len())));
        }
        data.extend(values);
    }
    let rows = Array2::from_shape_vec((ids.len(), width), data).map_err(|e| Error::shape("read_embeddings", e.to_string()))?;
    Ok((ids, rows))
}

/// A square matrix as CSV with `label{i}` headers.
pub fn matrix_table(m: ArrayView2<f64>, label: &str) -> String {
    let mut out = String::from("row");
    for c in 0..m.ncols() {
        let _ = write!(out, ",{label}{c}");
    }
    out.push('\n');
    for (r, row) in m.rows().into_iter().enumerate() {
        let _ = write!(out, "{label}{r}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_table(path: &Path, text: &str) -> Result<()> {
    write_text(path, text)
}

/// `intent,proportion` rows.
pub fn proportions_table(p: &[f64]) -> String {
    let mut out = String::from("intent,proportion\n");
    for (k, v) in p.iter().enumerate() {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

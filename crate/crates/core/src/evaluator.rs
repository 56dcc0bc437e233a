//! All-ranking top-K evaluation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{s, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::RecallDenominator;
use crate::data::{DatasetSplit, Fold, InteractionGraph};
use crate::error::{Error, Result};
use crate::model::Embeddings;

/// Users scored per dense block.
const USER_BLOCK: usize = 256;

/// Top-`k` unmasked items by descending score, ties by ascending id. The
/// flag is set when fewer than `k` items were available.
pub fn rank_items(scores: ArrayView1<f64>, masked: &[bool], k: usize) -> Result<(Vec<usize>, bool)> {
    if masked.len() != scores.len() {
        return Err(Error::shape("rank_items", format!("{} scores vs {} mask entries", scores.len(), masked.len())));
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    let truncated = candidates.len() < k;
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if candidates.len() > k && k > 0 {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates.truncate(k);
    Ok((candidates, truncated))
}

/// `|topk ∩ relevant| / denominator`. `relevant` must be sorted.
pub fn recall_at_k(topk: &[usize], relevant: &[usize], k: usize, denominator: RecallDenominator) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = topk.iter().take(k).filter(|i| relevant.binary_search(i).is_ok()).count();
    let denom = match denominator {
        RecallDenominator::Truncated => k.min(relevant.len()),
        RecallDenominator::Relevant => relevant.len(),
    };
    hits as f64 / denom as f64
}

/// Binary-gain NDCG with a `1/log₂(rank+1)` discount. `relevant` must be sorted.
pub fn ndcg_at_k(topk: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    dcg / ideal
}

/// Mean metrics over the evaluable users of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub users: usize,
    /// `recall@K` and `ndcg@K` for every requested cutoff.
    pub values: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.get(&format!("recall@{k}"))
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.get(&format!("ndcg@{k}"))
    }

    /// `key<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("users\t{}\n", self.users);
        for (k, v) in &self.values {
            out.push_str(&format!("{k}\t{v:.6}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut users = None;
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Evaluation(format!("metrics line {}: expected `key<TAB>value`", n + 1)))?;
            let bad = || Error::Evaluation(format!("metrics line {}: bad value `{v}`", n + 1));
            if k == "users" {
                users = Some(v.parse().map_err(|_| bad())?);
            } else {
                values.insert(k.to_string(), v.parse().map_err(|_| bad())?);
            }
        }
        Ok(Self {
            users: users.ok_or_else(|| Error::Evaluation("metrics file has no `users` line".into()))?,
            values,
        })
    }
}

struct Accumulator<'a> {
    ks: &'a [usize],
    max_k: usize,
    denominator: RecallDenominator,
    sums: Vec<(f64, f64)>,
    users: usize,
}

impl<'a> Accumulator<'a> {
    fn new(ks: &'a [usize], denominator: RecallDenominator) -> Result<Self> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Evaluation("cutoffs must be positive".into()));
        }
        Ok(Self {
            ks,
            max_k: *ks.iter().max().unwrap(),
            denominator,
            sums: vec![(0.0, 0.0); ks.len()],
            users: 0,
        })
    }

    fn add(&mut self, scores: ArrayView1<f64>, masked: &[bool], relevant: &[usize]) -> Result<()> {
        let (top, _) = rank_items(scores, masked, self.max_k)?;
        for (slot, &k) in self.sums.iter_mut().zip(self.ks) {
            slot.0 += recall_at_k(&top, relevant, k, self.denominator);
            slot.1 += ndcg_at_k(&top, relevant, k);
        }
        self.users += 1;
        Ok(())
    }

    fn finish(self) -> Result<Metrics> {
        if self.users == 0 {
            return Err(Error::Evaluation("no user has held-out items".into()));
        }
        let n = self.users as f64;
        let mut values = BTreeMap::new();
        for (&(r, g), &k) in self.sums.iter().zip(self.ks) {
            values.insert(format!("recall@{k}"), r / n);
            values.insert(format!("ndcg@{k}"), g / n);
        }
        Ok(Metrics {
            users: self.users,
            values,
        })
    }
}

fn check_lists(what: &str, lists: &[Vec<usize>], users: usize, items: usize) -> Result<()> {
    if lists.len() != users {
        return Err(Error::shape("evaluate", format!("{} {what} lists for {users} users", lists.len())));
    }
    if let Some(bad) = lists.iter().flatten().find(|&&i| i >= items) {
        return Err(Error::UnknownId(format!("{what} item {bad} of {items}")));
    }
    if lists.iter().any(|l| l.windows(2).any(|w| w[0] >= w[1])) {
        return Err(Error::Evaluation(format!("{what} lists must be sorted and unique")));
    }
    Ok(())
}

/// Metrics from a dense `users x items` score matrix. Users with no relevant
/// items are skipped; `masked[u]` items are never ranked.
pub fn evaluate_scores(
    scores: ArrayView2<f64>,
    masked: &[Vec<usize>],
    relevant: &[Vec<usize>],
    ks: &[usize],
    denominator: RecallDenominator,
) -> Result<Metrics> {
    let (users, items) = scores.dim();
    check_lists("masked", masked, users, items)?;
    check_lists("relevant", relevant, users, items)?;
    let mut acc = Accumulator::new(ks, denominator)?;
    let mut mask = vec![false; items];
    for u in 0..users {
        if relevant[u].is_empty() {
            continue;
        }
        mask.iter_mut().for_each(|m| *m = false);
        masked[u].iter().for_each(|&i| mask[i] = true);
        acc.add(scores.row(u), &mask, &relevant[u])?;
    }
    acc.finish()
}

/// Same as [`evaluate_scores`] with scores `Z_U Z_Iᵀ` computed in user blocks.
pub fn evaluate_embeddings(
    users: ArrayView2<f64>,
    items: ArrayView2<f64>,
    masked: &[Vec<usize>],
    relevant: &[Vec<usize>],
    ks: &[usize],
    denominator: RecallDenominator,
) -> Result<Metrics> {
    if users.ncols() != items.ncols() {
        return Err(Error::shape("evaluate", format!("{} vs {} columns", users.ncols(), items.ncols())));
    }
    let (n, m) = (users.nrows(), items.nrows());
    check_lists("masked", masked, n, m)?;
    check_lists("relevant", relevant, n, m)?;
    let mut acc = Accumulator::new(ks, denominator)?;
    let mut mask = vec![false; m];
    for start in (0..n).step_by(USER_BLOCK) {
        let end = (start + USER_BLOCK).min(n);
        let block = users.slice(s![start..end, ..]).dot(&items.t());
        for (offset, row) in block.rows().into_iter().enumerate() {
            let u = start + offset;
            if relevant[u].is_empty() {
                continue;
            }
            mask.iter_mut().for_each(|x| *x = false);
            masked[u].iter().for_each(|&i| mask[i] = true);
            acc.add(row, &mask, &relevant[u])?;
        }
    }
    acc.finish()
}

/// Masked and relevant item lists for evaluating `fold`. Validation masks
/// training items; test masks training and validation items.
pub fn fold_lists(graph: &InteractionGraph, split: &DatasetSplit, fold: Fold) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let train = split.train_items(graph);
    match fold {
        Fold::Train => Err(Error::Evaluation("cannot evaluate on the training fold".into())),
        Fold::Val => Ok((train, split.val_items(graph))),
        Fold::Test => {
            let val = split.val_items(graph);
            let masked = train
                .into_iter()
                .zip(val)
                .map(|(mut t, v)| {
                    t.extend(v);
                    t.sort_unstable();
                    t.dedup();
                    t
                })
                .collect();
            Ok((masked, split.test_items(graph)))
        }
    }
}

/// Evaluates readout embeddings on one fold.
pub fn evaluate(
    emb: &Embeddings,
    graph: &InteractionGraph,
    split: &DatasetSplit,
    fold: Fold,
    ks: &[usize],
    denominator: RecallDenominator,
) -> Result<Metrics> {
    let (masked, relevant) = fold_lists(graph, split, fold)?;
    evaluate_embeddings(emb.users(), emb.items(), &masked, &relevant, ks, denominator)
}

/// Per-run metrics with their mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub runs: Vec<Metrics>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation; zero for a single run.
    pub std: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn aggregate(runs: Vec<Metrics>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Evaluation("no runs to aggregate".into()))?;
        let keys: Vec<String> = first.values.keys().cloned().collect();
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        for key in keys {
            let xs = runs
                .iter()
                .map(|r| {
                    r.get(&key)
                        .ok_or_else(|| Error::Evaluation(format!("run is missing `{key}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = xs.len() as f64;
            let mu = xs.iter().sum::<f64>() / n;
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            mean.insert(key.clone(), mu);
            std.insert(key, sd);
        }
        Ok(Self { runs, mean, std })
    }

    /// `metric  mean±std` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("runs\t{}\n", self.runs.len());
        for (k, m) in &self.mean {
            out.push_str(&format!("{k}\t{m:.4}±{:.4}\n", self.std[k]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn hand_sorted_ranking() {
        let s = array![0.1, 0.9, 0.5];
        assert_eq!(rank_items(s.view(), &[false; 3], 2).unwrap().0, vec![1, 2]);
        assert_eq!(rank_items(s.view(), &[false, true, false], 2).unwrap().0, vec![2, 0]);
        let flat = array![0.3, 0.3, 0.3];
        assert_eq!(rank_items(flat.view(), &[false; 3], 2).unwrap().0, vec![0, 1]);
        let (all, truncated) = rank_items(s.view(), &[true, false, false], 5).unwrap();
        assert_eq!((all, truncated), (vec![1, 2], true));
        assert!(rank_items(s.view(), &[false; 2], 1).is_err());
    }

    #[test]
    fn recall_and_ndcg_examples() {
        let d = RecallDenominator::Truncated;
        assert_eq!(recall_at_k(&[4, 7], &[4, 9], 2, d), 0.5);
        assert_eq!(recall_at_k(&[1, 2], &[1, 2], 2, d), 1.0);
        assert_eq!(recall_at_k(&[1, 2], &[3], 2, d), 0.0);
        assert_eq!(recall_at_k(&[1], &[1, 2, 3], 1, d), 1.0);
        assert_abs_diff_eq!(recall_at_k(&[1], &[1, 2, 3], 1, RecallDenominator::Relevant), 1.0 / 3.0);
        assert_eq!(ndcg_at_k(&[5, 6], &[5], 2), 1.0);
        assert_abs_diff_eq!(ndcg_at_k(&[6, 5], &[5], 2), 1.0 / 3f64.log2(), epsilon = 1e-15);
        assert_abs_diff_eq!(ndcg_at_k(&[6, 5], &[5], 2), 0.6309, epsilon = 1e-4);
        assert_eq!(ndcg_at_k(&[6, 7], &[5], 2), 0.0);
    }

    #[test]
    fn single_run_has_zero_std() {
        let m = Metrics {
            users: 3,
            values: BTreeMap::from([("recall@20".to_string(), 0.3)]),
        };
        let r = MetricsReport::aggregate(vec![m.clone()]).unwrap();
        assert_eq!(r.std["recall@20"], 0.0);
        assert_eq!(Metrics::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn no_evaluable_users_is_an_error() {
        let scores = array![[1.0, 2.0]];
        let r = evaluate_scores(scores.view(), &[vec![]], &[vec![]], &[1], RecallDenominator::Truncated);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}

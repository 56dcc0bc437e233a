//! Brute-force reference implementations written without the crate's tape,
//! sparse kernels or evaluator.

use nalgebra::DMatrix;
use ndarray::Array2;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn coding_rate(z: &Array2<f64>, eps: f64) -> f64 {
    let (f, d) = z.dim();
    let zm = to_dmatrix(z);
    let a = DMatrix::identity(d, d) + (zm.transpose() * &zm) * (d as f64 / (f as f64 * eps * eps));
    0.5 * a.determinant().ln()
}

pub fn group_compactness(z: &Array2<f64>, pi: &Array2<f64>, eps: f64) -> f64 {
    let (f, d) = z.dim();
    let mut total = 0.0;
    for k in 0..pi.ncols() {
        let tr: f64 = (0..f).map(|i| pi[[i, k]]).sum();
        if tr < 1e-8 {
            continue;
        }
        let mut gram = DMatrix::<f64>::zeros(d, d);
        for i in 0..f {
            for a in 0..d {
                for b in 0..d {
                    gram[(a, b)] += pi[[i, k]] * z[[i, a]] * z[[i, b]];
                }
            }
        }
        let m = DMatrix::identity(d, d) + gram * (d as f64 / (tr * eps * eps));
        total += tr / (2.0 * f as f64) * m.determinant().ln();
    }
    total
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt().max(1e-12);
    let nb = dot(b, b).sqrt().max(1e-12);
    dot(a, b) / (na * nb)
}

fn row(a: &Array2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}

/// `p(k|e)` from the slices of each intent and the bases.
pub fn intent_confidence(slices: &[Array2<f64>], bases: &Array2<f64>, tau: f64) -> Array2<f64> {
    let b = slices[0].nrows();
    let k = slices.len();
    let mut out = Array2::zeros((b, k));
    for e in 0..b {
        let logits: Vec<f64> = (0..k).map(|j| cosine(&row(&slices[j], e), &row(bases, j)) / tau).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..k {
            out[[e, j]] = logits[j].exp() / z;
        }
    }
    out
}

/// `log p(e'|e,k)` for one intent.
pub fn subtask_logprob(anchors: &Array2<f64>, positives: &Array2<f64>, tau: f64, strict: bool) -> Vec<f64> {
    let b = anchors.nrows();
    (0..b)
        .map(|e| {
            let a = row(anchors, e);
            let pos = cosine(&a, &row(positives, e)) / tau;
            let denom: f64 = (0..b)
                .filter(|&j| !strict || j != e)
                .map(|j| (cosine(&a, &row(positives, j)) / tau).exp())
                .sum();
            pos - denom.ln()
        })
        .collect()
}

/// The combined contrastive loss from raw slices.
pub fn icl_loss(
    anchors: &[Array2<f64>],
    positives: &[Array2<f64>],
    bases: &Array2<f64>,
    tau: f64,
    strict: bool,
    exact: bool,
) -> f64 {
    let p = intent_confidence(anchors, bases, tau);
    let q: Vec<Vec<f64>> = anchors
        .iter()
        .zip(positives)
        .map(|(a, s)| subtask_logprob(a, s, tau, strict))
        .collect();
    let b = anchors[0].nrows();
    let mut total = 0.0;
    for e in 0..b {
        if exact {
            let mix: f64 = (0..anchors.len()).map(|k| p[[e, k]] * q[k][e].exp()).sum();
            total -= mix.ln();
        } else {
            total -= (0..anchors.len()).map(|k| p[[e, k]] * q[k][e]).sum::<f64>();
        }
    }
    total / b as f64
}

/// Dense symmetric-normalized adjacency over `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(x, y) in edges {
        a[(x, y)] = 1.0;
        a[(y, x)] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if a[(i, j)] == 0.0 {
            0.0
        } else {
            a[(i, j)] / (deg[i] * deg[j]).sqrt()
        }
    })
}

/// Mean of `Â^l X` over `l = 0..=layers`.
pub fn readout(adjacency: &DMatrix<f64>, x: &Array2<f64>, layers: usize) -> Array2<f64> {
    let mut cur = to_dmatrix(x);
    let mut sum = cur.clone();
    for _ in 0..layers {
        cur = adjacency * &cur;
        sum += &cur;
    }
    sum /= (layers + 1) as f64;
    Array2::from_shape_fn(x.dim(), |(i, j)| sum[(i, j)])
}

/// `tanh(x W + b)` applied once per `(W, b)` layer.
pub fn head(x: &Array2<f64>, layers: &[(Array2<f64>, Array2<f64>)]) -> Array2<f64> {
    let mut h = x.clone();
    for (w, b) in layers {
        let (n, m) = (h.nrows(), w.ncols());
        let mut next = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut acc = b[[0, j]];
                for t in 0..w.nrows() {
                    acc += h[[i, t]] * w[[t, j]];
                }
                next[[i, j]] = acc.tanh();
            }
        }
        h = next;
    }
    h
}

/// Row softmax of `Z_c W₁`.
pub fn concept_assignment(zc: &Array2<f64>, w1: &Array2<f64>) -> Array2<f64> {
    let (r, d) = zc.dim();
    let k = w1.ncols();
    let mut s = Array2::zeros((r, k));
    for i in 0..r {
        let logits: Vec<f64> = (0..k).map(|j| (0..d).map(|t| zc[[i, t]] * w1[[t, j]]).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..k {
            s[[i, j]] = (logits[j] - m).exp() / z;
        }
    }
    s
}

/// `g_s(Sᵀ Z_c)`, optionally dividing each cluster by its assignment mass.
pub fn semantic_bases(
    zc: &Array2<f64>,
    w1: &Array2<f64>,
    layers: &[(Array2<f64>, Array2<f64>)],
    normalize: bool,
) -> Array2<f64> {
    let s = concept_assignment(zc, w1);
    let (r, d) = zc.dim();
    let k = s.ncols();
    let mut clusters = Array2::zeros((k, d));
    for j in 0..k {
        let mass: f64 = (0..r).map(|i| s[[i, j]]).sum();
        for t in 0..d {
            let v: f64 = (0..r).map(|i| s[[i, j]] * zc[[i, t]]).sum();
            clusters[[j, t]] = if normalize { v / mass } else { v };
        }
    }
    head(&clusters, layers)
}

/// Per-user enumeration of recall and NDCG at every cutoff, averaged over
/// users with relevant items. Returns `(users, [(k, recall, ndcg)])`.
pub fn ranking_metrics(
    scores: &Array2<f64>,
    masked: &[Vec<usize>],
    relevant: &[Vec<usize>],
    ks: &[usize],
    truncated_denominator: bool,
) -> (usize, Vec<(usize, f64, f64)>) {
    let (n, m) = scores.dim();
    let mut sums = vec![(0.0, 0.0); ks.len()];
    let mut users = 0;
    for u in 0..n {
        if relevant[u].is_empty() {
            continue;
        }
        users += 1;
        let mut order: Vec<usize> = (0..m).filter(|i| !masked[u].contains(i)).collect();
        // Insertion sort: descending score, ascending id on ties.
        for a in 1..order.len() {
            let mut b = a;
            while b > 0 {
                let (x, y) = (order[b - 1], order[b]);
                let before = scores[[u, y]] > scores[[u, x]] || (scores[[u, y]] == scores[[u, x]] && y < x);
                if !before {
                    break;
                }
                order.swap(b - 1, b);
                b -= 1;
            }
        }
        for (slot, &k) in sums.iter_mut().zip(ks) {
            let top = &order[..k.min(order.len())];
            let hits = top.iter().filter(|i| relevant[u].contains(i)).count();
            let denom = if truncated_denominator { k.min(relevant[u].len()) } else { relevant[u].len() };
            slot.0 += hits as f64 / denom as f64;
            let mut dcg = 0.0;
            for (rank, i) in top.iter().enumerate() {
                if relevant[u].contains(i) {
                    dcg += 1.0 / ((rank + 2) as f64).log2();
                }
            }
            let ideal: f64 = (0..k.min(relevant[u].len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
            slot.1 += dcg / ideal;
        }
    }
    let out = sums
        .into_iter()
        .zip(ks)
        .map(|((r, g), &k)| (k, r / users as f64, g / users as f64))
        .collect();
    (users, out)
}

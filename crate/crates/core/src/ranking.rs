//! Inner-product preference scores and the BPR objective.

use ndarray::{Array1, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::tape::{softplus, Tape, Var};

/// Row-wise inner products of paired user and item embeddings, as `B x 1`.
pub fn paired_scores(tape: &mut Tape, users: Var, items: Var) -> Result<Var> {
    if tape.shape(users) != tape.shape(items) {
        return Err(Error::shape(
            "paired_scores",
            format!("{:?} vs {:?}", tape.shape(users), tape.shape(items)),
        ));
    }
    let product = tape.mul(users, items);
    Ok(tape.row_sum(product))
}

/// `mean softplus(neg − pos)`, i.e. the mean of `−log σ(ŷ_ui − ŷ_uj)`.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    if tape.shape(pos) != tape.shape(neg) {
        return Err(Error::shape("bpr_loss", format!("{:?} vs {:?}", tape.shape(pos), tape.shape(neg))));
    }
    let margin = tape.sub(neg, pos);
    let loss = tape.softplus(margin);
    Ok(tape.mean(loss))
}

/// Dense `users x items` score matrix `Z_U Z_Iᵀ`.
pub fn predict_scores(users: ArrayView2<f64>, items: ArrayView2<f64>) -> Result<Array2<f64>> {
    if users.ncols() != items.ncols() {
        return Err(Error::shape(
            "predict_scores",
            format!("user width {} vs item width {}", users.ncols(), items.ncols()),
        ));
    }
    Ok(users.dot(&items.t()))
}

/// Inner products of paired rows.
pub fn predict_paired(users: ArrayView2<f64>, items: ArrayView2<f64>) -> Result<Array1<f64>> {
    if users.dim() != items.dim() {
        return Err(Error::shape("predict_paired", format!("{:?} vs {:?}", users.dim(), items.dim())));
    }
    let mut out = Array1::zeros(users.nrows());
    Zip::from(&mut out)
        .and(users.rows())
        .and(items.rows())
        .for_each(|o, u, i| *o = u.dot(&i));
    Ok(out)
}

/// BPR loss on plain score vectors.
pub fn bpr_loss_value(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(Error::shape("bpr_loss", format!("{} positives vs {} negatives", pos.len(), neg.len())));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum::<f64>() / pos.len() as f64)
}

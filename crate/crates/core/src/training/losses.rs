use crate::ckt::RoutingRecord;
use crate::error::{CktError, Result};
use crate::tensor::{Tape, Var};

/// Fraction of the `k·B` top-k slots that went to each adapter.
pub fn selection_frequency(rec: &RoutingRecord) -> Vec<f64> {
    let slots: usize = rec.selected.iter().map(Vec::len).sum();
    rec.selected_counts()
        .into_iter()
        .map(|c| c as f64 / slots.max(1) as f64)
        .collect()
}

/// `M Σ_m f_m P_m` where `P_m` is the batch-mean routing probability and
/// `f_m` the top-k selection frequency.
pub fn load_balance_value(rec: &RoutingRecord) -> f64 {
    let m = rec.experts;
    let f = selection_frequency(rec);
    (0..m)
        .map(|j| {
            let p: f64 = (0..rec.batch).map(|b| rec.prob(b, j)).sum::<f64>() / rec.batch as f64;
            f[j] * p
        })
        .sum::<f64>()
        * m as f64
}

/// Differentiable load-balancing loss. Gradients reach the router only
/// through the mean probabilities; selection frequencies are constants.
pub fn load_balance(tape: &mut Tape, probs: Var, rec: &RoutingRecord) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s != [rec.batch, rec.experts] {
        return Err(CktError::shape("load_balance", &s, &[rec.batch, rec.experts]));
    }
    let mean = tape.mean_pool(probs, 0)?;
    let f = tape.constant(&[rec.experts], selection_frequency(rec))?;
    let fp = tape.mul(mean, f)?;
    let total = tape.sum(fp);
    Ok(tape.scale(total, rec.experts as f64))
}

/// Per-instance `Σ_t mask · ||pred - target||²` from plain values.
pub fn instance_errors(pred: &[f64], target: &[f64], mask: &[f64], batch: usize) -> Vec<f64> {
    let per = pred.len() / batch.max(1);
    let tokens = mask.len() / batch.max(1);
    let width = per / tokens.max(1);
    (0..batch)
        .map(|b| {
            (0..tokens)
                .map(|t| {
                    let row = (b * tokens + t) * width;
                    let e: f64 = (row..row + width).map(|i| (pred[i] - target[i]).powi(2)).sum();
                    mask[b * tokens + t] * e
                })
                .sum()
        })
        .collect()
}

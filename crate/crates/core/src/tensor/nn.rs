use std::sync::Arc;

use super::Tape;
use super::Var;
use crate::error::{CktError, Result};

/// `x W + b` over the last axis.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Projection weights of one multi-head attention block, `[d, d]` matrices
/// with `[d]` biases.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Rotation tables for queries and keys, each `[L, d_head/2]`.
#[derive(Clone, Debug)]
pub struct Rotary {
    pub q_cos: Arc<Vec<f64>>,
    pub q_sin: Arc<Vec<f64>>,
    pub k_cos: Arc<Vec<f64>>,
    pub k_sin: Arc<Vec<f64>>,
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[B, H, Lq, Lk]` attention weights.
    pub weights: Var,
}

/// `[B, L, d]` -> `[B, H, L, d/H]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(CktError::config(format!(
            "width {:?} not divisible into {heads} heads",
            s.last()
        )));
    }
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, H, L, dh]` -> `[B, L, H*dh]`.
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(CktError::shape("merge_heads", &s, &[]));
    }
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// softmax(q kᵀ / sqrt(dh)) v over the last two axes.
pub fn scaled_dot_product(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = *tape.shape(q).last().unwrap_or(&1);
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let last = tape.shape(scores).len() - 1;
    let weights = tape.softmax(scores, last)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention of `q` (`[B, Lq, d]`) over `k`/`v` (`[B, Lk, d]`).
/// No positional encoding is applied unless `rotary` is given, in which case
/// the per-head queries and keys are rotated after projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    p: &AttnVars,
    heads: usize,
    rotary: Option<&Rotary>,
) -> Result<AttentionOutput> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(CktError::config(format!("width {d} not divisible by {heads} heads")));
    }
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sk != tape.shape(v) || sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(CktError::shape("multi_head_attention", &sq, &sk));
    }
    let qp = linear(tape, q, p.wq, Some(p.bq))?;
    let kp = linear(tape, k, p.wk, Some(p.bk))?;
    let vp = linear(tape, v, p.wv, Some(p.bv))?;
    let mut qh = split_heads(tape, qp, heads)?;
    let mut kh = split_heads(tape, kp, heads)?;
    let vh = split_heads(tape, vp, heads)?;
    if let Some(r) = rotary {
        qh = tape.rope(qh, Arc::clone(&r.q_cos), Arc::clone(&r.q_sin))?;
        kh = tape.rope(kh, Arc::clone(&r.k_cos), Arc::clone(&r.k_sin))?;
    }
    let (ctx, weights) = scaled_dot_product(tape, qh, kh, vh)?;
    let merged = merge_heads(tape, ctx)?;
    let out = linear(tape, merged, p.wo, Some(p.bo))?;
    Ok(AttentionOutput { out, weights })
}

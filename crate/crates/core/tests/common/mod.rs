//! Plain-loop reference implementations shared by integration tests.
#![allow(dead_code)]

use cktwam_core::tensor::ParamSet;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(data: &[f64], width: usize) -> Mat {
    data.chunks(width).map(<[f64]>::to_vec).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// `x [n, k] · w [k, m] + b`.
pub fn affine(x: &Mat, w: &[f64], b: Option<&[f64]>) -> Mat {
    let k = x.first().map_or(0, Vec::len);
    let m = w.len() / k.max(1);
    x.iter()
        .map(|row| {
            (0..m)
                .map(|j| {
                    let mut acc = b.map_or(0.0, |b| b[j]);
                    for i in 0..k {
                        acc += row[i] * w[i * m + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

impl<'a> AttnWeights<'a> {
    pub fn from_set(set: &'a ParamSet, prefix: &str) -> Self {
        let g = |s: &str| set.get(set.find(&format!("{prefix}.{s}")).unwrap()).data();
        AttnWeights {
            wq: g("q.weight"),
            bq: g("q.bias"),
            wk: g("k.weight"),
            bk: g("k.bias"),
            wv: g("v.weight"),
            bv: g("v.bias"),
            wo: g("o.weight"),
            bo: g("o.bias"),
        }
    }
}

/// Multi-head attention with the attention weights formed one head, one
/// query and one key at a time.
pub fn attention(q: &Mat, kv: &Mat, w: &AttnWeights, heads: usize) -> Mat {
    let qp = affine(q, w.wq, Some(w.bq));
    let kp = affine(kv, w.wk, Some(w.bk));
    let vp = affine(kv, w.wv, Some(w.bv));
    let d = qp[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let alpha = softmax(&scores);
            for (j, vj) in vp.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i][c] += alpha[j] * vj[c];
                }
            }
        }
    }
    affine(&ctx, w.wo, Some(w.bo))
}

/// Central-difference check of `loss` against the analytic gradients it
/// returns, over every entry of the listed parameters. Entries agreeing to
/// 1e-9 absolute count as exact.
pub fn fd_params(
    set: &ParamSet,
    names: &[&str],
    loss: impl Fn(&ParamSet) -> (f64, Vec<Option<Vec<f64>>>),
) -> (f64, String) {
    let (_, analytic) = loss(set);
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for name in names {
        let id = set.find(name).unwrap_or_else(|| panic!("no param {name}"));
        for j in 0..set.get(id).numel() {
            let mut p = set.clone();
            p.get_mut(id).data_mut()[j] += h;
            let mut m = set.clone();
            m.get_mut(id).data_mut()[j] -= h;
            let num = (loss(&p).0 - loss(&m).0) / (2.0 * h);
            let ana = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
            let diff = (num - ana).abs();
            let rel = if diff < 1e-9 {
                0.0
            } else {
                diff / (num.abs() + ana.abs())
            };
            if rel > worst.0 {
                worst = (rel, format!("{name}[{j}]: fd {num} vs {ana}"));
            }
        }
    }
    worst
}

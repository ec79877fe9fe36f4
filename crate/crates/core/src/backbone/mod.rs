//! Synthetic frozen teacher and student world-action models.
//!
//! Weights are drawn once from a seed and never updated. The teacher exposes
//! hidden states at an intermediate layer; the student is a small DiT-style
//! x0 denoiser over video-latent and action tokens, conditioned through
//! cross-attention.

mod rope;
mod student;
mod teacher;

pub use rope::{axis_pairs, rope_phases, RotaryPhases, RotaryTable};
pub use student::{AttentionKind, AttentionRecord, DenoiseOutput, Student, StudentConfig};
pub use teacher::{Teacher, TeacherConfig, TeacherContext};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{AttnVars, Bound, ParamId, ParamSet, Tape, Tensor, Var};

/// Weight `[d_in, d_out]` drawn with std `1/sqrt(d_in)` (or `std` when given)
/// plus a zero bias.
pub(crate) fn add_linear<R: Rng>(
    set: &mut ParamSet,
    name: &str,
    d_in: usize,
    d_out: usize,
    std: Option<f64>,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let std = std.unwrap_or(1.0 / (d_in as f64).sqrt());
    let w = set.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng));
    let b = set.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    (w, b)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
}

impl AttnIds {
    pub fn new<R: Rng>(set: &mut ParamSet, name: &str, d: usize, std: Option<f64>, rng: &mut R) -> Self {
        AttnIds {
            q: add_linear(set, &format!("{name}.q"), d, d, std, rng),
            k: add_linear(set, &format!("{name}.k"), d, d, std, rng),
            v: add_linear(set, &format!("{name}.v"), d, d, std, rng),
            o: add_linear(set, &format!("{name}.o"), d, d, std, rng),
        }
    }

    pub fn vars(&self, b: &Bound) -> AttnVars {
        AttnVars {
            wq: b[self.q.0],
            bq: b[self.q.1],
            wk: b[self.k.0],
            bk: b[self.k.1],
            wv: b[self.v.0],
            bv: b[self.v.1],
            wo: b[self.o.0],
            bo: b[self.o.1],
        }
    }
}

/// Two-layer GELU MLP.
pub(crate) fn mlp(tape: &mut Tape, b: &Bound, x: Var, fc1: (ParamId, ParamId), fc2: (ParamId, ParamId)) -> Result<Var> {
    let h = crate::tensor::linear(tape, x, b[fc1.0], Some(b[fc1.1]))?;
    let h = tape.gelu(h);
    crate::tensor::linear(tape, h, b[fc2.0], Some(b[fc2.1]))
}

/// `[cos(x f_i); sin(x f_i)]` with geometric frequencies, `dim` values per row.
pub(crate) fn sinusoidal(xs: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(xs.len() * dim);
    for &x in xs {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| x * f).collect();
        out.extend(args.iter().map(|a| a.cos()));
        out.extend(args.iter().map(|a| a.sin()));
    }
    out
}

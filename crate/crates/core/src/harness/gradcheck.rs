//! Central finite-difference check of the full training objective with
//! respect to every transfer-module tensor.
//!
//! Dropout is forced to zero and the router noise is replayed from a fixed
//! seed, so each evaluation of the loss is a deterministic function of the
//! weights. Work runs at 64-bit regardless of the configured precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Experiment, RunConfig};
use crate::ckt::CktModule;
use crate::error::Result;
use crate::injection::{wrap_text_projection, ContextCache, WrappedStudent};
use crate::tensor::{Faults, ParamSet, Precision, Tape};
use crate::training::{step_losses, Batch};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-4;
/// Multiple of the rounding error of one central difference below which a
/// disagreement counts as exact.
const ROUNDOFF_MULT: f64 = 8.0;
const BATCH: usize = 2;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    /// Absolute disagreement treated as finite-difference rounding noise.
    pub abs_floor: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub worst: String,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            s.push_str(&format!(
                "  {:<32} {:>5}/{:<5} max rel err {:.3e}\n",
                t.name, t.checked, t.numel, t.max_rel_err
            ));
        }
        s.push_str(&format!(
            "{} max relative error {:.3e} at {} (tolerance {GRADCHECK_TOLERANCE:e})\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst
        ));
        s
    }
}

struct Objective<'a> {
    wrapped: WrappedStudent<'a>,
    batch: Batch,
    cfg: RunConfig,
    faults: Faults,
}

impl Objective<'_> {
    fn eval(&self, ckt: &CktModule, grads: bool) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let t = &self.cfg.training;
        let mut tape = Tape::new(Precision::F64).with_faults(self.faults);
        let cb = ckt.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let l = step_losses(
            &mut tape,
            &self.wrapped,
            ckt,
            &cb,
            &self.batch,
            &t.schedule(),
            t.lambda_vid,
            t.lambda_bal,
            true,
            &mut rng,
        )?;
        let value = tape.value(l.total)[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(l.total)?;
        Ok((
            value,
            cb.vars().iter().map(|&v| g.get(v).map(<[f64]>::to_vec)).collect(),
        ))
    }
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < floor {
        0.0
    } else {
        diff / (analytic.abs() + numeric.abs())
    }
}

/// Checks `d L_total / d θ` for every transfer tensor. At most
/// `max_entries` randomly chosen entries of each tensor are perturbed;
/// `None` checks them all.
pub fn gradcheck(cfg: &RunConfig, faults: Faults, max_entries: Option<usize>) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.precision = Precision::F64;
    cfg.ckt.dropout = 0.0;
    let mut exp = Experiment::build(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Leave the zero-initialized adapter outputs and the noise scale away
    // from their special starting points so every path carries gradient.
    for t in exp.ckt.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += 0.05 * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
        }
    }
    let batch = exp.task.batch(0, BATCH)?;
    let obj = Objective {
        wrapped: wrap_text_projection(
            &exp.student,
            &exp.teacher,
            &exp.ckt,
            ContextCache::default(),
            Precision::F64,
        )?,
        batch,
        cfg: cfg.clone(),
        faults,
    };
    let (loss, analytic) = obj.eval(&exp.ckt, true)?;
    let floor = ROUNDOFF_MULT * f64::EPSILON * loss.abs().max(1.0) / STEP;
    let base: ParamSet = exp.ckt.params().clone();
    let mut probe = CktModule::new(cfg.ckt.clone())?;

    let mut tensors = Vec::new();
    for (ti, id) in base.ids().enumerate() {
        let numel = base.get(id).numel();
        let idx: Vec<usize> = match max_entries {
            Some(n) if n < numel => {
                let mut v = sample(&mut rng, numel, n).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        let mut tc = TensorCheck {
            name: base.name(id).to_string(),
            checked: idx.len(),
            numel,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in idx {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let p = probe.params_mut();
                *p = base.clone();
                p.get_mut(id).data_mut()[j] += delta;
                Ok(obj.eval(&probe, false)?.0)
            };
            let numeric = (eval_at(STEP)? - eval_at(-STEP)?) / (2.0 * STEP);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g[j]);
            let r = rel_err(a, numeric, floor);
            if r > tc.max_rel_err || (tc.max_rel_err == 0.0 && j == 0) {
                tc.max_rel_err = r;
                tc.worst_index = j;
                tc.analytic = a;
                tc.numeric = numeric;
            }
        }
        tensors.push(tc);
    }
    let worst = tensors
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("transfer module has tensors");
    let max_rel_err = worst.max_rel_err;
    Ok(GradcheckReport {
        loss,
        abs_floor: floor,
        worst: format!(
            "{}[{}] (analytic {:.6e}, numeric {:.6e})",
            worst.name, worst.worst_index, worst.analytic, worst.numeric
        ),
        passed: max_rel_err < GRADCHECK_TOLERANCE,
        max_rel_err,
        tensors,
    })
}

//! Diffusion-style objective and the optimization loop over the transfer
//! module. Backbones are read-only throughout.

mod losses;
mod optim;
mod schedule;

pub use losses::{instance_errors, load_balance, load_balance_value, selection_frequency};
pub use optim::{AdamW, OptState};
pub use schedule::{add_scaled_noise, lr_at, make_noisy, NoiseSchedule};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Student, Teacher};
use crate::ckt::{CktModule, RoutingRecord};
use crate::error::{CktError, Result};
use crate::injection::{wrap_text_projection, ContextCache, Observation, WrappedStudent};
use crate::tensor::{Bound, ParamId, Precision, Tape, Tensor, Var};

/// One batch of the synthetic task.
#[derive(Clone, Debug)]
pub struct Batch {
    pub observations: Vec<Observation>,
    /// `[B, T_v, d_v]`.
    pub video: Tensor,
    /// `[B, T_a, d_a]`.
    pub action: Tensor,
    /// `[B * T_v]` binary.
    pub video_mask: Vec<f64>,
    /// `[B * T_a]` binary.
    pub action_mask: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.len();
        let (sv, sa) = (self.video.shape(), self.action.shape());
        if sv.len() != 3 || sa.len() != 3 || sv[0] != b || sa[0] != b {
            return Err(CktError::shape("batch", sv, sa));
        }
        if self.video_mask.len() != b * sv[1] || self.action_mask.len() != b * sa[1] {
            return Err(CktError::shape(
                "batch masks",
                &[self.video_mask.len(), self.action_mask.len()],
                &[b * sv[1], b * sa[1]],
            ));
        }
        if self
            .video_mask
            .iter()
            .chain(&self.action_mask)
            .any(|&m| m != 0.0 && m != 1.0)
        {
            return Err(CktError::config("masks must be binary"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Horizon of the cosine decay; defaults to `steps`.
    #[serde(default)]
    pub total_steps: Option<u64>,
    pub p_mean: f64,
    pub p_std: f64,
    pub lambda_vid: f64,
    pub lambda_bal: f64,
    #[serde(default)]
    pub adam: AdamW,
    pub checkpoint_every: u64,
    pub cache_capacity: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            warmup: 1000,
            total_steps: None,
            p_mean: 1.39,
            p_std: 1.2,
            lambda_vid: 1.0,
            lambda_bal: 0.01,
            adam: AdamW::default(),
            checkpoint_every: 500,
            cache_capacity: 64,
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            p_mean: self.p_mean,
            p_std: self.p_std,
            ..NoiseSchedule::default()
        }
    }

    pub fn horizon(&self) -> u64 {
        self.total_steps.unwrap_or(self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(CktError::config("training.batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.lambda_vid >= 0.0) || !(self.lambda_bal >= 0.0) {
            return Err(CktError::config(
                "training.lr, lambda_vid and lambda_bal must be non-negative",
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || a.weight_decay < 0.0 {
            return Err(CktError::config("training.adam hyperparameters out of range"));
        }
        if self.checkpoint_every == 0 {
            return Err(CktError::config("training.checkpoint_every must be positive"));
        }
        Ok(())
    }
}

pub struct StepLosses {
    pub total: Var,
    pub act: Var,
    pub vid: Var,
    pub bal: Var,
    pub sigma: Vec<f64>,
    pub routing: RoutingRecord,
    /// Weighted action error of the instance with the smallest σ.
    pub act_min_sigma: f64,
}

/// Samples shared noise levels, corrupts both streams, runs the wrapped
/// student and assembles the objective on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn step_losses<R: Rng + ?Sized>(
    tape: &mut Tape,
    wrapped: &WrappedStudent<'_>,
    ckt: &CktModule,
    cb: &Bound,
    batch: &Batch,
    schedule: &NoiseSchedule,
    lambda_vid: f64,
    lambda_bal: f64,
    train: bool,
    rng: &mut R,
) -> Result<StepLosses> {
    batch.validate()?;
    let b = batch.len();
    let sigma = schedule.sample_sigma(b, rng);
    let (noisy_v, _) = make_noisy(&batch.video, &sigma, rng)?;
    let (noisy_a, _) = make_noisy(&batch.action, &sigma, rng)?;
    let v = tape.leaf(&noisy_v);
    let a = tape.leaf(&noisy_a);
    let obs: Vec<&Observation> = batch.observations.iter().collect();
    let f = wrapped.forward(tape, ckt, cb, &obs, v, a, &sigma, train, rng)?;
    let w = schedule.weights(&sigma);
    let a0 = tape.leaf(&batch.action);
    let v0 = tape.leaf(&batch.video);
    let act = tape.mse_masked(f.out.action, a0, &batch.action_mask, &w)?;
    let vid = tape.mse_masked(f.out.video, v0, &batch.video_mask, &w)?;
    let bal = load_balance(tape, f.context.probs, &f.context.routing)?;
    let sv = tape.scale(vid, lambda_vid);
    let sb = tape.scale(bal, lambda_bal);
    let t = tape.add(act, sv)?;
    let total = tape.add(t, sb)?;

    let errs = instance_errors(tape.value(f.out.action), batch.action.data(), &batch.action_mask, b);
    let last = (0..b)
        .min_by(|&i, &j| sigma[i].total_cmp(&sigma[j]))
        .map_or(0.0, |i| w[i] * errs[i]);
    Ok(StepLosses {
        total,
        act,
        vid,
        bal,
        sigma,
        routing: f.context.routing,
        act_min_sigma: last,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_act_avg")]
    pub l_act_avg: f64,
    /// Action loss of the least-noisy instance in the batch.
    #[serde(rename = "L_act_last")]
    pub l_act_last: f64,
    #[serde(rename = "L_vid")]
    pub l_vid: f64,
    #[serde(rename = "L_bal")]
    pub l_bal: f64,
    pub lr: f64,
    pub selected_counts: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    /// Losses on the first batch before any update.
    pub initial: StepMetrics,
    pub metrics: Vec<StepMetrics>,
    pub steps_run: u64,
    pub frozen_hash_start: u64,
    pub frozen_hash_end: u64,
    pub teacher_forwards: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// Callbacks fired during [`train`].
pub trait TrainObserver {
    fn on_metrics(&mut self, _m: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: u64, _ckt: &CktModule) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Hash over every frozen backbone parameter.
pub fn frozen_hash(teacher: &Teacher, student: &Student) -> u64 {
    crate::tensor::fnv1a64(
        teacher
            .params()
            .content_hash()
            .to_le_bytes()
            .into_iter()
            .chain(student.params().content_hash().to_le_bytes()),
    )
}

/// Tensors that must receive a gradient this step: everything except the
/// specialized adapters the router skipped.
fn required_ids(ckt: &CktModule, rec: &RoutingRecord) -> Vec<ParamId> {
    let cfg = ckt.config();
    if cfg.k_g == 0 || cfg.k_s == 0 {
        return Vec::new();
    }
    let mut skip = Vec::new();
    for m in 0..cfg.experts {
        if !rec.selected.iter().any(|s| s.contains(&m)) {
            skip.extend(ckt.expert_ids(m));
        }
    }
    ckt.params().ids().filter(|id| !skip.contains(id)).collect()
}

/// Metrics, per-tensor gradients and the routing decision of one step.
type StepOutcome = (StepMetrics, Vec<Option<Vec<f64>>>, RoutingRecord);

#[allow(clippy::too_many_arguments)]
fn run_step(
    wrapped: &WrappedStudent<'_>,
    ckt: &CktModule,
    cfg: &TrainConfig,
    precision: Precision,
    seed: u64,
    step: u64,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let mut tape = Tape::new(precision).with_stream(seed, step);
    let cb = ckt.bind(&mut tape);
    let schedule = cfg.schedule();
    let l = step_losses(
        &mut tape,
        wrapped,
        ckt,
        &cb,
        batch,
        &schedule,
        cfg.lambda_vid,
        cfg.lambda_bal,
        true,
        rng,
    )?;
    let val = |v: Var| tape.value(v)[0];
    let metrics = StepMetrics {
        step,
        l_total: val(l.total),
        l_act_avg: val(l.act),
        l_act_last: l.act_min_sigma,
        l_vid: val(l.vid),
        l_bal: val(l.bal),
        lr: lr_at(step, cfg.lr, cfg.warmup, cfg.horizon()),
        selected_counts: l.routing.selected_counts(),
    };
    if !metrics.l_total.is_finite() {
        return Err(CktError::Numeric(format!(
            "non-finite loss at step {step}: L_total={} L_act={} L_vid={} L_bal={} sigma={:?}",
            metrics.l_total, metrics.l_act_avg, metrics.l_vid, metrics.l_bal, l.sigma
        )));
    }
    let grads = tape.backward(l.total)?;
    let g = cb.vars().iter().map(|&v| grads.get(v).map(<[f64]>::to_vec)).collect();
    Ok((metrics, g, l.routing))
}

/// Runs `cfg.steps` optimizer steps on batches drawn from `data`. Only
/// `ckt` changes; the backbone hash is verified at every checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train(
    teacher: &Teacher,
    student: &Student,
    ckt: &mut CktModule,
    cfg: &TrainConfig,
    precision: Precision,
    seed: u64,
    data: &mut dyn FnMut(u64) -> Result<Batch>,
    observer: &mut dyn TrainObserver,
) -> Result<RunReport> {
    cfg.validate()?;
    let start_hash = frozen_hash(teacher, student);
    let wrapped = wrap_text_projection(student, teacher, ckt, ContextCache::new(cfg.cache_capacity), precision)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptState::new(cfg.adam.clone(), ckt.params());

    let first = data(0)?;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (initial, _, _) = run_step(&wrapped, ckt, cfg, precision, seed, 0, &first, &mut probe_rng)?;
    observer.on_checkpoint(0, ckt)?;

    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = if step == 0 { first.clone() } else { data(step)? };
        let (m, grads, rec) = run_step(&wrapped, ckt, cfg, precision, seed, step, &batch, &mut rng)?;
        let required = required_ids(ckt, &rec);
        let params = ckt.params_mut();
        opt.step(params, &grads, m.lr, &required)?;
        for t in params.tensors_mut() {
            precision.round_slice(t.data_mut());
        }
        observer.on_metrics(&m)?;
        metrics.push(m);
        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            let h = frozen_hash(teacher, student);
            if h != start_hash {
                return Err(CktError::Integrity(format!(
                    "backbone weights changed by step {done} (hash {start_hash:016x} -> {h:016x})"
                )));
            }
            observer.on_checkpoint(done, ckt)?;
        }
    }
    Ok(RunReport {
        initial,
        metrics,
        steps_run: cfg.steps,
        frozen_hash_start: start_hash,
        frozen_hash_end: frozen_hash(teacher, student),
        teacher_forwards: teacher.forward_passes(),
        cache_hits: wrapped.cache().hits(),
        cache_misses: wrapped.cache().misses(),
    })
}

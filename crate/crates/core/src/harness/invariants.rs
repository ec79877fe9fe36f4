//! Structural checks on the wrapped student, run on a freshly built model
//! with randomized transfer weights. Everything runs at 64-bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Experiment, RunConfig};
use crate::backbone::{AttentionKind, AttentionRecord, Student};
use crate::ckt::CktModule;
use crate::error::Result;
use crate::injection::{augment, wrap_text_projection, ContextCache, Observation, WrappedStudent};
use crate::tensor::{max_abs_diff, Precision, Tape, Tensor};
use crate::training::{frozen_hash, NoObserver};

/// Noise levels at which the rotary tables are compared.
const RAY_SIGMAS: [f64; 5] = [0.02, 0.3, 1.0, 4.0, 80.0];
const PERMUTATIONS: usize = 100;
const ORDER_TOL: f64 = 1e-10;
const DENOISE_STEPS: usize = 10;
const HASH_STEPS: u64 = 3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantReport {
    pub checks: Vec<CheckResult>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<20} {}\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                )
            })
            .collect()
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn random_observation(exp: &Experiment, rng: &mut ChaCha8Rng) -> Observation {
    let (t, s) = (exp.teacher.config(), exp.student.config());
    Observation::new(
        Tensor::randn(&[1, t.n_img, t.d_model], 1.0, rng),
        Tensor::randn(&[1, t.n_text, t.d_model], 1.0, rng),
        Tensor::randn(&[1, s.text_len, s.text_dim], 1.0, rng),
        None,
    )
}

fn noisy(s: &Student, b: usize, sigma: f64, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let c = s.config();
    (
        Tensor::randn(&[b, c.video_tokens(), c.d_video], sigma.max(1.0), rng),
        Tensor::randn(&[b, c.action_tokens(), c.d_action], sigma.max(1.0), rng),
    )
}

fn self_attn_bits(recs: &[AttentionRecord]) -> Vec<Vec<u64>> {
    recs.iter()
        .filter(|r| r.kind == AttentionKind::SelfAttn)
        .map(|r| match &r.rotary {
            Some(rot) => [&rot.q_cos, &rot.q_sin, &rot.k_cos, &rot.k_sin]
                .iter()
                .flat_map(|t| t.iter().map(|v| v.to_bits()))
                .collect(),
            None => Vec::new(),
        })
        .collect()
}

fn rope_bitwise(
    exp: &Experiment,
    w: &WrappedStudent<'_>,
    obs: &Observation,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let s = &exp.student;
    let mut compared = 0;
    let mut mismatch = Vec::new();
    for &sigma in &RAY_SIGMAS {
        let (v, a) = noisy(s, 1, sigma, rng);
        s.start_probe();
        s.denoise_tensors(&obs.text, &v, &a, &[sigma], Precision::F64)?;
        let plain = self_attn_bits(&s.take_probe());
        s.start_probe();
        w.conditioned_denoise(&exp.ckt, &[obs], &v, &a, &[sigma])?;
        let with = self_attn_bits(&s.take_probe());
        if plain.len() != s.config().blocks || plain.iter().any(Vec::is_empty) || plain != with {
            mismatch.push(sigma);
        }
        compared += plain.len();
    }
    Ok(check(
        "rope_bitwise",
        mismatch.is_empty(),
        if mismatch.is_empty() {
            format!(
                "{compared} self-attention tables identical across {} noise levels",
                RAY_SIGMAS.len()
            )
        } else {
            format!("tables differ at sigma {mismatch:?}")
        },
    ))
}

/// Augmented conditioning for `obs`, as the wrapped student would build it.
fn augmented_cond(exp: &Experiment, w: &WrappedStudent<'_>, obs: &[&Observation]) -> Result<Tensor> {
    let mut contexts = Vec::new();
    for o in obs {
        contexts.push(w.cached_context(&exp.ckt, o)?.0);
    }
    let c_a = Tensor::stack(&contexts)?;
    let sh = c_a.shape().to_vec();
    let c_a = c_a.reshape(&[sh[0] * sh[1], sh[2], sh[3]])?;
    let texts = Tensor::stack(&obs.iter().map(|o| o.text.clone()).collect::<Vec<_>>())?;
    let st = texts.shape().to_vec();
    let texts = texts.reshape(&[st[0] * st[1], st[2], st[3]])?;
    let mut tape = Tape::new(Precision::F64);
    let sb = exp.student.bind(&mut tape);
    let t = tape.leaf(&texts);
    let e_t = exp.student.project_text(&mut tape, &sb, t)?;
    let sep = tape.leaf(exp.ckt.params().get(exp.ckt.sep_id()));
    let c = tape.leaf(&c_a);
    let cond = augment(&mut tape, e_t, sep, c)?;
    Ok(tape.to_tensor(cond))
}

fn denoise_with(student: &Student, cond: &Tensor, v: &Tensor, a: &Tensor, sigma: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(Precision::F64);
    let sb = student.bind(&mut tape);
    let c = tape.leaf(cond);
    let (vv, av) = (tape.leaf(v), tape.leaf(a));
    let out = student.denoise(&mut tape, &sb, vv, av, sigma, c)?;
    Ok([tape.value(out.video), tape.value(out.action)].concat())
}

fn permute_rows(t: &Tensor, perms: &[Vec<usize>]) -> Result<Tensor> {
    let (b, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(t.numel());
    for (bi, perm) in perms.iter().enumerate().take(b) {
        for &r in perm {
            let at = (bi * l + r) * d;
            data.extend_from_slice(&t.data()[at..at + d]);
        }
    }
    Tensor::new(vec![b, l, d], data)
}

fn order_invariance(
    exp: &Experiment,
    w: &WrappedStudent<'_>,
    obs: &[&Observation],
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let cond = augmented_cond(exp, w, obs)?;
    let (b, l) = (cond.shape()[0], cond.shape()[1]);
    let sigma: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..10.0)).collect();
    let (v, a) = noisy(&exp.student, b, 2.0, rng);
    let base = denoise_with(&exp.student, &cond, &v, &a, &sigma)?;
    let mut worst = 0.0f64;
    for _ in 0..PERMUTATIONS {
        let perms: Vec<Vec<usize>> = (0..b)
            .map(|_| {
                let mut p: Vec<usize> = (0..l).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        let out = denoise_with(&exp.student, &permute_rows(&cond, &perms)?, &v, &a, &sigma)?;
        worst = worst.max(max_abs_diff(&base, &out));
    }
    Ok(check(
        "order_invariance",
        worst < ORDER_TOL,
        format!("max |diff| {worst:.3e} over {PERMUTATIONS} permutations of {l} rows (tol {ORDER_TOL:e})"),
    ))
}

fn one_directional(
    exp: &Experiment,
    w: &WrappedStudent<'_>,
    obs: &[&Observation],
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let s = &exp.student;
    let before = w.teacher_context(obs[0])?.hidden.clone();
    // The wrapped forward, spelled out so the backbone bindings are visible.
    let b = obs.len();
    let (v, a) = noisy(s, b, 2.0, rng);
    let sigma = vec![1.5; b];
    let mut tape = Tape::new(Precision::F64);
    let cb = exp.ckt.bind(&mut tape);
    let sb = s.bind(&mut tape);
    let hidden: Vec<Tensor> = obs
        .iter()
        .map(|o| w.teacher_context(o).map(|t| t.hidden.index0(0)).and_then(|r| r))
        .collect::<Result<_>>()?;
    let passes = exp.teacher.forward_passes();
    let h = tape.leaf(&Tensor::stack(&hidden)?);
    let ctx = exp.ckt.build_context(&mut tape, &cb, h, true, rng)?;
    let texts: Vec<Tensor> = obs.iter().map(|o| o.text.index0(0)).collect::<Result<_>>()?;
    let text = tape.leaf(&Tensor::stack(&texts)?);
    let e_t = s.project_text(&mut tape, &sb, text)?;
    let cond = augment(&mut tape, e_t, cb[exp.ckt.sep_id()], ctx.c_a)?;
    let (vv, av) = (tape.leaf(&v), tape.leaf(&a));
    s.start_probe();
    let out = s.denoise(&mut tape, &sb, vv, av, &sigma, cond)?;
    let recs = s.take_probe();
    let l1 = tape.sum(out.video);
    let l2 = tape.sum(out.action);
    let loss = tape.add(l1, l2)?;
    let grads = tape.backward(loss)?;

    let mut problems = Vec::new();
    let leaked: Vec<&str> = s
        .params()
        .ids()
        .filter(|&id| grads.get(sb[id]).is_some())
        .map(|id| s.params().name(id))
        .collect();
    if !leaked.is_empty() {
        problems.push(format!("student weights received gradients: {leaked:?}"));
    }
    if grads.get(h).is_some() {
        problems.push("gradient flowed back into teacher states".into());
    }
    if grads.get(cb[exp.ckt.sep_id()]).is_none() {
        problems.push("separator received no gradient".into());
    }
    let cond_len = tape.shape(cond)[1];
    for r in recs.iter().filter(|r| r.kind == AttentionKind::CrossAttn) {
        if !r.query_from_visual || r.key_rows != cond_len {
            problems.push(format!(
                "block {} cross-attention does not read context as keys only",
                r.block
            ));
        }
    }
    if exp.teacher.forward_passes() != passes {
        problems.push("student pass re-ran the teacher".into());
    }
    let after = exp.teacher.forward_extract(
        &obs[0].x_img,
        &obs[0].x_text,
        exp.teacher.config().extract_layer,
        obs[0].id,
        Precision::F64,
    )?;
    if after.hidden.data() != before.data() {
        problems.push("teacher states depend on student activity".into());
    }
    Ok(check(
        "one_directional",
        problems.is_empty(),
        if problems.is_empty() {
            format!("no backbone gradients; context read only as cross-attention keys/values ({cond_len} rows)")
        } else {
            problems.join("; ")
        },
    ))
}

fn single_teacher_pass(
    exp: &Experiment,
    w: &WrappedStudent<'_>,
    obs: &Observation,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let passes = exp.teacher.forward_passes();
    let (hits, misses) = (w.cache().hits(), w.cache().misses());
    let (mut v, mut a) = noisy(&exp.student, 1, 80.0, rng);
    for i in 0..DENOISE_STEPS {
        let sigma = 80.0 * (0.002f64 / 80.0).powf(i as f64 / (DENOISE_STEPS - 1) as f64);
        (v, a) = w.conditioned_denoise(&exp.ckt, &[obs], &v, &a, &[sigma])?;
    }
    let t = exp.teacher.forward_passes() - passes;
    let h = w.cache().hits() - hits;
    let m = w.cache().misses() - misses;
    Ok(check(
        "single_teacher_pass",
        t == 1 && h == DENOISE_STEPS as u64 - 1 && m == 1,
        format!("{DENOISE_STEPS}-step denoise: {t} teacher forward(s), {h} cache hits, {m} miss(es)"),
    ))
}

fn frozen(cfg: &RunConfig) -> Result<CheckResult> {
    let mut c = cfg.clone();
    c.training.steps = HASH_STEPS;
    c.training.warmup = 0;
    let mut exp = Experiment::build(c)?;
    let start = frozen_hash(&exp.teacher, &exp.student);
    let ckt_start = exp.ckt.params().content_hash();
    let report = exp.train(&mut NoObserver)?;
    let end = frozen_hash(&exp.teacher, &exp.student);
    let moved = exp.ckt.params().content_hash() != ckt_start;
    Ok(check(
        "frozen_hash",
        start == end && report.frozen_hash_end == start,
        format!(
            "backbone hash {start:016x} -> {end:016x} over {HASH_STEPS} steps; transfer weights {}",
            if moved { "updated" } else { "unchanged" }
        ),
    ))
}

fn randomize(ckt: &mut CktModule, rng: &mut ChaCha8Rng) {
    for t in ckt.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// Runs every check on the models described by `cfg`.
pub fn eval_invariants(cfg: &RunConfig) -> Result<InvariantReport> {
    let mut cfg = cfg.clone();
    cfg.precision = Precision::F64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut exp = Experiment::build(cfg.clone())?;
    randomize(&mut exp.ckt, &mut rng);
    let o1 = random_observation(&exp, &mut rng);
    let o2 = random_observation(&exp, &mut rng);

    let mut checks = Vec::new();
    {
        let w = wrap_text_projection(
            &exp.student,
            &exp.teacher,
            &exp.ckt,
            ContextCache::default(),
            Precision::F64,
        )?;
        checks.push(rope_bitwise(&exp, &w, &o1, &mut rng)?);
        checks.push(order_invariance(&exp, &w, &[&o1, &o2], &mut rng)?);
        checks.push(one_directional(&exp, &w, &[&o1, &o2], &mut rng)?);
    }
    {
        let w = wrap_text_projection(
            &exp.student,
            &exp.teacher,
            &exp.ckt,
            ContextCache::default(),
            Precision::F64,
        )?;
        let o3 = random_observation(&exp, &mut rng);
        checks.push(single_teacher_pass(&exp, &w, &o3, &mut rng)?);
    }
    checks.push(frozen(&cfg)?);
    Ok(InvariantReport { checks })
}

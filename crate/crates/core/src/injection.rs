//! Student-side context injection.
//!
//! The student's text projection is wrapped so that its conditioning becomes
//! `[E_t; sep; C_A]`. Nothing inside the student blocks changes; the extra
//! tokens reach the visual stream only as cross-attention keys and values.
//! Teacher states and inference-time contexts are cached per observation.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use rand::Rng;

use crate::backbone::{DenoiseOutput, Student, Teacher, TeacherContext};
use crate::ckt::{CktModule, RoutingRecord, TransferredContext};
use crate::error::{CktError, Result};
use crate::tensor::{fnv1a64, Bound, Precision, Tape, Tensor, Var};

/// One observation as seen by the teacher and the student's text encoder.
/// Tensors carry a leading batch axis of 1.
#[derive(Clone, Debug)]
pub struct Observation {
    pub id: u64,
    /// `[1, N_img, d_tea]`.
    pub x_img: Tensor,
    /// `[1, N_text, d_tea]`.
    pub x_text: Tensor,
    /// `[1, L_t, text_dim]` raw instruction tokens for the student.
    pub text: Tensor,
    pub stage: Option<usize>,
}

impl Observation {
    /// Builds an observation keyed by a hash of its raw bytes.
    pub fn new(x_img: Tensor, x_text: Tensor, text: Tensor, stage: Option<usize>) -> Self {
        let id = observation_id(&[&x_img, &x_text, &text]);
        Observation {
            id,
            x_img,
            x_text,
            text,
            stage,
        }
    }
}

pub fn observation_id(parts: &[&Tensor]) -> u64 {
    fnv1a64(parts.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())))
}

/// `[E_t; sep; C_A]` along the token axis. `sep` is `[1, 1, d]` and is
/// broadcast over the batch.
pub fn augment(tape: &mut Tape, e_t: Var, sep: Var, c_a: Var) -> Result<Var> {
    let (se, sc, ss) = (
        tape.shape(e_t).to_vec(),
        tape.shape(c_a).to_vec(),
        tape.shape(sep).to_vec(),
    );
    if se.len() != 3 || sc.len() != 3 || se[0] != sc[0] || se[2] != sc[2] {
        return Err(CktError::shape("augment", &se, &sc));
    }
    if ss != [1, 1, se[2]] {
        return Err(CktError::shape("augment", &ss, &[1, 1, se[2]]));
    }
    let sep = tape.broadcast_to(sep, &[se[0], 1, se[2]])?;
    tape.concat(&[e_t, sep, c_a], 1)
}

#[derive(Clone, Debug)]
struct CachedContext {
    version: u64,
    c_a: Tensor,
    routing: RoutingRecord,
}

#[derive(Clone, Debug)]
struct Entry {
    teacher: Arc<TeacherContext>,
    context: Option<CachedContext>,
}

/// LRU map from observation id to teacher states and, for inference, the
/// transferred context built from them.
pub struct ContextCache {
    map: Mutex<LruCache<u64, Entry>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

pub const DEFAULT_CACHE_CAPACITY: usize = 64;

impl Default for ContextCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl ContextCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("nonzero");
        ContextCache {
            map: Mutex::new(LruCache::new(cap)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.lock().clear();
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LruCache<u64, Entry>> {
        self.map.lock().expect("context cache lock poisoned")
    }

    fn hit(&self, hit: bool) {
        let c = if hit { &self.hits } else { &self.misses };
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// Output of a training-mode forward through the wrapped student.
pub struct WrappedForward {
    pub out: DenoiseOutput,
    pub context: TransferredContext,
    pub cond: Var,
}

/// A student whose conditioning producer has been replaced by
/// `g(x) -> [g(x); sep; C_A]`. Dropping the wrapper restores the original.
pub struct WrappedStudent<'a> {
    student: &'a Student,
    teacher: &'a Teacher,
    cache: ContextCache,
    precision: Precision,
}

impl Drop for WrappedStudent<'_> {
    fn drop(&mut self) {
        self.student.release_conditioning_hook();
    }
}

/// Installs the context hook on `student`. Fails if one is already present.
pub fn wrap_text_projection<'a>(
    student: &'a Student,
    teacher: &'a Teacher,
    ckt: &CktModule,
    cache: ContextCache,
    precision: Precision,
) -> Result<WrappedStudent<'a>> {
    let (sc, cc, tc) = (student.config(), ckt.config(), teacher.config());
    if cc.d_stu != sc.d_model || cc.d_tea != tc.d_model {
        return Err(CktError::config(format!(
            "ckt widths (d_tea={}, d_stu={}) do not match backbones ({}, {})",
            cc.d_tea, cc.d_stu, tc.d_model, sc.d_model
        )));
    }
    student.claim_conditioning_hook()?;
    Ok(WrappedStudent {
        student,
        teacher,
        cache,
        precision,
    })
}

fn cat_batch(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| CktError::config("empty observation batch"))?;
    let inner = &first.shape()[1..];
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
    let mut rows = 0;
    for t in parts {
        if &t.shape()[1..] != inner {
            return Err(CktError::shape("observation batch", first.shape(), t.shape()));
        }
        rows += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(inner);
    Tensor::new(shape, data)
}

impl<'a> WrappedStudent<'a> {
    pub fn student(&self) -> &Student {
        self.student
    }

    pub fn teacher(&self) -> &Teacher {
        self.teacher
    }

    pub fn cache(&self) -> &ContextCache {
        &self.cache
    }

    fn extract(&self, obs: &Observation) -> Result<Arc<TeacherContext>> {
        let layer = self.teacher.config().extract_layer;
        let ctx = self
            .teacher
            .forward_extract(&obs.x_img, &obs.x_text, layer, obs.id, self.precision)?;
        Ok(Arc::new(ctx))
    }

    /// Teacher states for `obs`, computed at most once while cached.
    pub fn teacher_context(&self, obs: &Observation) -> Result<Arc<TeacherContext>> {
        if let Some(e) = self.cache.lock().get(&obs.id) {
            self.cache.hit(true);
            return Ok(Arc::clone(&e.teacher));
        }
        self.cache.hit(false);
        let t = self.extract(obs)?;
        self.cache.lock().put(
            obs.id,
            Entry {
                teacher: Arc::clone(&t),
                context: None,
            },
        );
        Ok(t)
    }

    /// Inference-time `C_A` for one observation, rebuilt only when the
    /// transfer weights have changed since it was cached.
    pub fn cached_context(&self, ckt: &CktModule, obs: &Observation) -> Result<(Tensor, RoutingRecord)> {
        let existing = self.cache.lock().get(&obs.id).cloned();
        if let Some(Entry { context: Some(c), .. }) = &existing {
            if c.version == ckt.version() {
                self.cache.hit(true);
                return Ok((c.c_a.clone(), c.routing.clone()));
            }
        }
        self.cache.hit(false);
        let teacher = match existing {
            Some(e) => e.teacher,
            None => self.extract(obs)?,
        };
        let mut tape = Tape::new(self.precision);
        let b = ckt.bind(&mut tape);
        let h = tape.leaf(&teacher.hidden);
        // Eval mode draws no noise, so the generator is never consulted.
        let ctx = ckt.build_context(&mut tape, &b, h, false, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let cached = CachedContext {
            version: ckt.version(),
            c_a: tape.to_tensor(ctx.c_a),
            routing: ctx.routing,
        };
        self.cache.lock().put(
            obs.id,
            Entry {
                teacher,
                context: Some(cached.clone()),
            },
        );
        Ok((cached.c_a, cached.routing))
    }

    fn text_batch(&self, tape: &mut Tape, sb: &Bound, obs: &[&Observation]) -> Result<Var> {
        let texts: Vec<&Tensor> = obs.iter().map(|o| &o.text).collect();
        let text = tape.leaf(&cat_batch(&texts)?);
        self.student.project_text(tape, sb, text)
    }

    /// Denoise with cached contexts. One entry of `sigma` per observation.
    pub fn conditioned_denoise(
        &self,
        ckt: &CktModule,
        obs: &[&Observation],
        noisy_video: &Tensor,
        noisy_action: &Tensor,
        sigma: &[f64],
    ) -> Result<(Tensor, Tensor)> {
        let mut contexts = Vec::with_capacity(obs.len());
        for o in obs {
            contexts.push(self.cached_context(ckt, o)?.0);
        }
        let c_a = cat_batch(&contexts.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new(self.precision);
        let sb = self.student.bind(&mut tape);
        let e_t = self.text_batch(&mut tape, &sb, obs)?;
        let sep = tape.leaf(&ckt.params().get(ckt.sep_id()).clone());
        let c_a = tape.leaf(&c_a);
        let cond = augment(&mut tape, e_t, sep, c_a)?;
        let v = tape.leaf(noisy_video);
        let a = tape.leaf(noisy_action);
        let out = self.student.denoise(&mut tape, &sb, v, a, sigma, cond)?;
        Ok((tape.to_tensor(out.video), tape.to_tensor(out.action)))
    }

    /// Differentiable forward used for training: teacher states come from
    /// the cache, `C_A` is rebuilt on `tape` from the bound transfer weights.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ckt: &CktModule,
        cb: &Bound,
        obs: &[&Observation],
        noisy_video: Var,
        noisy_action: Var,
        sigma: &[f64],
        train: bool,
        rng: &mut R,
    ) -> Result<WrappedForward> {
        let teachers = obs
            .iter()
            .map(|o| self.teacher_context(o))
            .collect::<Result<Vec<_>>>()?;
        let hidden = cat_batch(&teachers.iter().map(|t| &t.hidden).collect::<Vec<_>>())?;
        let sb = self.student.bind(tape);
        let h = tape.leaf(&hidden);
        let context = ckt.build_context(tape, cb, h, train, rng)?;
        let e_t = self.text_batch(tape, &sb, obs)?;
        let cond = augment(tape, e_t, cb[ckt.sep_id()], context.c_a)?;
        let out = self
            .student
            .denoise(tape, &sb, noisy_video, noisy_action, sigma, cond)?;
        Ok(WrappedForward { out, context, cond })
    }
}

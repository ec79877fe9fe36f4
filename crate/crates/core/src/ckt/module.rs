use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::CktConfig;
use crate::backbone::{add_linear, AttnIds};
use crate::error::{CktError, Result};
use crate::tensor::{linear, multi_head_attention, Bound, ParamId, ParamSet, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    General,
    Specialized,
}

/// Plain-number view of one routing decision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingRecord {
    pub batch: usize,
    pub experts: usize,
    /// `[B, M]` routing probabilities.
    pub probs: Vec<f64>,
    /// Per instance, the top-k adapters in descending probability.
    pub selected: Vec<Vec<usize>>,
    /// Per instance, probabilities renormalized over `selected`.
    pub renorm: Vec<Vec<f64>>,
    /// `[B, d_tea]` mean-pooled teacher states.
    pub pooled: Vec<f64>,
}

impl RoutingRecord {
    pub fn prob(&self, b: usize, m: usize) -> f64 {
        self.probs[b * self.experts + m]
    }

    /// Number of instances that picked each adapter.
    pub fn selected_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.experts];
        for s in &self.selected {
            for &m in s {
                c[m] += 1;
            }
        }
        c
    }
}

/// Routing decision together with its differentiable pieces.
pub struct Routing {
    pub record: RoutingRecord,
    /// `[B, M]`.
    pub probs: Var,
    /// `[B, k]`, aligned with `record.selected`.
    pub renorm: Var,
}

pub struct TransferredContext {
    pub c_g: Var,
    pub c_s: Var,
    /// `[B, K_g + K_s, d_stu]`.
    pub c_a: Var,
    pub probs: Var,
    pub routing: RoutingRecord,
    /// Specialized adapters evaluated for each instance.
    pub executed_per_instance: Vec<usize>,
    /// Distinct specialized adapters evaluated for the batch.
    pub executed_adapter_count: usize,
}

#[derive(Clone, Debug)]
struct Ids {
    down: (ParamId, ParamId),
    up: (ParamId, ParamId),
    norm: (ParamId, ParamId),
    q_g: ParamId,
    q_s: ParamId,
    attn: AttnIds,
    post_norm: (ParamId, ParamId),
    general: (ParamId, ParamId),
    experts: Vec<(ParamId, ParamId)>,
    w1: (ParamId, ParamId),
    w2: (ParamId, ParamId),
    noise_scale: ParamId,
    sep: ParamId,
}

#[derive(Default)]
struct Counters {
    project: AtomicU64,
    compress_g: AtomicU64,
    compress_s: AtomicU64,
    general: AtomicU64,
    route: AtomicU64,
    experts: Vec<AtomicU64>,
}

pub struct CktModule {
    cfg: CktConfig,
    params: ParamSet,
    ids: Ids,
    counters: Counters,
    version: u64,
}

fn add_norm(set: &mut ParamSet, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        set.add(format!("{name}.gamma"), Tensor::ones(&[d])),
        set.add(format!("{name}.beta"), Tensor::zeros(&[d])),
    )
}

fn add_bottleneck<R: Rng>(set: &mut ParamSet, name: &str, d: usize, r: usize, rng: &mut R) -> (ParamId, ParamId) {
    (
        set.add(format!("{name}.down"), Tensor::randn(&[d, r], INIT_STD, rng)),
        set.add(format!("{name}.up"), Tensor::zeros(&[r, d])),
    )
}

impl CktModule {
    pub fn new(cfg: CktConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &mut rng;
        let mut p = ParamSet::new();
        let std = Some(INIT_STD);
        let (t, s) = (cfg.d_tea, cfg.d_stu);
        let down = add_linear(&mut p, "trunk.down", t, cfg.d_b, std, r);
        let up = add_linear(&mut p, "trunk.up", cfg.d_b, s, std, r);
        let norm = add_norm(&mut p, "trunk.norm", s);
        let q_g = p.add("queries.general", Tensor::randn(&[1, cfg.k_g, s], INIT_STD, r));
        let q_s = p.add("queries.specialized", Tensor::randn(&[1, cfg.k_s, s], INIT_STD, r));
        let attn = AttnIds::new(&mut p, "compressor", s, std, r);
        let post_norm = add_norm(&mut p, "compressor.norm", s);
        let general = add_bottleneck(&mut p, "general", s, cfg.r_g, r);
        let experts = (0..cfg.experts)
            .map(|m| add_bottleneck(&mut p, &format!("specialized.{m}"), s, cfg.r_s, r))
            .collect();
        let w1 = add_linear(&mut p, "router.w1", t, cfg.d_gate, std, r);
        let w2 = add_linear(&mut p, "router.w2", cfg.d_gate, cfg.experts, std, r);
        let noise_scale = p.add("router.noise_scale", Tensor::scalar(0.0));
        let sep = p.add("sep", Tensor::randn(&[1, 1, s], INIT_STD, r));
        p.set_requires_grad(true);
        let counters = Counters {
            experts: (0..cfg.experts).map(|_| AtomicU64::new(0)).collect(),
            ..Counters::default()
        };
        Ok(CktModule {
            ids: Ids {
                down,
                up,
                norm,
                q_g,
                q_s,
                attn,
                post_norm,
                general,
                experts,
                w1,
                w2,
                noise_scale,
                sep,
            },
            cfg,
            params: p,
            counters,
            version: 0,
        })
    }

    pub fn config(&self) -> &CktConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable weights. Every call bumps [`CktModule::version`], which
    /// invalidates cached contexts.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn sep_id(&self) -> ParamId {
        self.ids.sep
    }

    /// Parameter ids belonging to specialized adapter `m`.
    pub fn expert_ids(&self, m: usize) -> [ParamId; 2] {
        let (d, u) = self.ids.experts[m];
        [d, u]
    }

    pub fn project_calls(&self) -> u64 {
        self.counters.project.load(Ordering::Relaxed)
    }

    pub fn compress_calls(&self, branch: Branch) -> u64 {
        match branch {
            Branch::General => self.counters.compress_g.load(Ordering::Relaxed),
            Branch::Specialized => self.counters.compress_s.load(Ordering::Relaxed),
        }
    }

    pub fn general_calls(&self) -> u64 {
        self.counters.general.load(Ordering::Relaxed)
    }

    pub fn route_calls(&self) -> u64 {
        self.counters.route.load(Ordering::Relaxed)
    }

    /// Times each specialized adapter has been evaluated.
    pub fn expert_calls(&self) -> Vec<u64> {
        self.counters
            .experts
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    fn check_teacher(&self, tape: &Tape, h: Var, op: &str) -> Result<[usize; 3]> {
        match *tape.shape(h) {
            [b, n, d] if d == self.cfg.d_tea && n > 0 => Ok([b, n, d]),
            _ => Err(CktError::config(format!(
                "{op}: teacher states {:?} do not match d_tea={}",
                tape.shape(h),
                self.cfg.d_tea
            ))),
        }
    }

    /// `Drop(LN(gelu(H W_down + b) W_up + b))`. No residual.
    pub fn shared_project(&self, tape: &mut Tape, b: &Bound, h: Var, train: bool) -> Result<Var> {
        self.check_teacher(tape, h, "shared_project")?;
        self.counters.project.fetch_add(1, Ordering::Relaxed);
        let ids = &self.ids;
        let x = linear(tape, h, b[ids.down.0], Some(b[ids.down.1]))?;
        let x = tape.gelu(x);
        let x = linear(tape, x, b[ids.up.0], Some(b[ids.up.1]))?;
        let x = tape.layer_norm(x, Some(b[ids.norm.0]), Some(b[ids.norm.1]), LN_EPS)?;
        tape.dropout(x, self.cfg.dropout, train)
    }

    /// `LN(MHCA(Q, Z, Z) + Q)` with the branch's query bank broadcast over
    /// the batch. Both branches share the attention weights.
    pub fn compress(&self, tape: &mut Tape, b: &Bound, z: Var, branch: Branch) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.cfg.d_stu {
            return Err(CktError::shape("compress", &s, &[self.cfg.d_stu]));
        }
        let (q, k, counter) = match branch {
            Branch::General => (self.ids.q_g, self.cfg.k_g, &self.counters.compress_g),
            Branch::Specialized => (self.ids.q_s, self.cfg.k_s, &self.counters.compress_s),
        };
        counter.fetch_add(1, Ordering::Relaxed);
        if k == 0 {
            return tape.constant(&[s[0], 0, s[2]], Vec::new());
        }
        let qb = tape.broadcast_to(b[q], &[s[0], k, s[2]])?;
        let a = multi_head_attention(tape, qb, z, z, &self.ids.attn.vars(b), self.cfg.heads, None)?;
        let x = tape.add(a.out, qb)?;
        let (g, be) = self.ids.post_norm;
        tape.layer_norm(x, Some(b[g]), Some(b[be]), LN_EPS)
    }

    fn bottleneck(tape: &mut Tape, b: &Bound, x: Var, ids: (ParamId, ParamId)) -> Result<Var> {
        let h = tape.matmul(x, b[ids.0])?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, b[ids.1])?;
        tape.add(x, h)
    }

    /// `C + gelu(C W_down) W_up`, run on every call.
    pub fn generalized_adapter(&self, tape: &mut Tape, b: &Bound, c0: Var) -> Result<Var> {
        self.counters.general.fetch_add(1, Ordering::Relaxed);
        if tape.shape(c0).contains(&0) {
            return Ok(c0);
        }
        Self::bottleneck(tape, b, c0, self.ids.general)
    }

    /// Mean-pools the teacher states, scores the adapters and keeps the
    /// top-k per instance. Train mode perturbs the logits with Gaussian
    /// noise scaled by `softplus(noise_scale)`.
    pub fn route<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Routing> {
        let [bsz, _, _] = self.check_teacher(tape, h, "route")?;
        self.counters.route.fetch_add(1, Ordering::Relaxed);
        let ids = &self.ids;
        let m = self.cfg.experts;
        let pooled = tape.mean_pool(h, 1)?;
        let x = linear(tape, pooled, b[ids.w1.0], Some(b[ids.w1.1]))?;
        let x = tape.gelu(x);
        let mut logits = linear(tape, x, b[ids.w2.0], Some(b[ids.w2.1]))?;
        if train {
            let eps: Vec<f64> = (0..bsz * m).map(|_| rng.sample(StandardNormal)).collect();
            let eps = tape.constant(&[bsz, m], eps)?;
            let sd = tape.softplus(b[ids.noise_scale]);
            let noise = tape.mul(eps, sd)?;
            logits = tape.add(logits, noise)?;
        }
        let probs = tape.softmax(logits, 1)?;
        let p = tape.value(probs).to_vec();
        let k = self.cfg.top_k;
        let mut selected = Vec::with_capacity(bsz);
        let mut renorm = Vec::with_capacity(bsz);
        let mut flat = Vec::with_capacity(bsz * k);
        for bi in 0..bsz {
            let row = &p[bi * m..(bi + 1) * m];
            let mut order: Vec<usize> = (0..m).collect();
            // Stable sort: equal probabilities keep ascending index order.
            order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap_or(std::cmp::Ordering::Equal));
            order.truncate(k);
            let mass: f64 = order.iter().map(|&j| row[j]).sum();
            renorm.push(order.iter().map(|&j| row[j] / mass).collect());
            flat.extend(order.iter().map(|&j| bi * m + j));
            selected.push(order);
        }
        let pf = tape.reshape(probs, &[bsz * m])?;
        let top = tape.select(pf, 0, &flat)?;
        let top = tape.reshape(top, &[bsz, k])?;
        let mass = tape.sum_axis(top, 1)?;
        let mass = tape.reshape(mass, &[bsz, 1])?;
        let renorm_var = tape.div(top, mass)?;
        Ok(Routing {
            record: RoutingRecord {
                batch: bsz,
                experts: m,
                probs: p,
                selected,
                renorm,
                pooled: tape.value(pooled).to_vec(),
            },
            probs,
            renorm: renorm_var,
        })
    }

    /// `sum_{m in I_b} p̄_{b,m} E_m(C_s[b])`, evaluating each selected adapter
    /// once on the instances that picked it. Returns the mix and the number
    /// of adapters evaluated per instance.
    pub fn specialized_mix(
        &self,
        tape: &mut Tape,
        b: &Bound,
        cs0: Var,
        routing: &Routing,
    ) -> Result<(Var, Vec<usize>)> {
        let s = tape.shape(cs0).to_vec();
        let rec = &routing.record;
        if s.len() != 3 || s[0] != rec.batch {
            return Err(CktError::shape("specialized_mix", &s, &[rec.batch]));
        }
        let bsz = rec.batch;
        let k = self.cfg.top_k;
        let mut per_instance = vec![0usize; bsz];
        if s[1] == 0 {
            return Ok((cs0, per_instance));
        }
        let flat_w = tape.reshape(routing.renorm, &[bsz * k])?;
        let mut acc: Option<Var> = None;
        for m in 0..self.cfg.experts {
            let mut rows = Vec::new();
            let mut slots = Vec::new();
            for (bi, sel) in rec.selected.iter().enumerate() {
                if let Some(j) = sel.iter().position(|&x| x == m) {
                    rows.push(bi);
                    slots.push(bi * k + j);
                }
            }
            if rows.is_empty() {
                continue;
            }
            self.counters.experts[m].fetch_add(1, Ordering::Relaxed);
            for &bi in &rows {
                per_instance[bi] += 1;
            }
            let x = tape.select(cs0, 0, &rows)?;
            let y = Self::bottleneck(tape, b, x, self.ids.experts[m])?;
            let w = tape.select(flat_w, 0, &slots)?;
            let w = tape.reshape(w, &[rows.len(), 1, 1])?;
            let y = tape.mul(y, w)?;
            let y = tape.scatter_rows(y, &rows, bsz)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        let out = acc.ok_or_else(|| CktError::Integrity("no specialized adapter selected".into()))?;
        Ok((out, per_instance))
    }

    /// Full pipeline from teacher states to `C_A = [C_g; C_s]`. The trunk
    /// output is computed once and feeds both compressors.
    pub fn build_context<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<TransferredContext> {
        let z = self.shared_project(tape, b, h, train)?;
        let cg0 = self.compress(tape, b, z, Branch::General)?;
        let cs0 = self.compress(tape, b, z, Branch::Specialized)?;
        let c_g = self.generalized_adapter(tape, b, cg0)?;
        let routing = self.route(tape, b, h, train, rng)?;
        let (c_s, executed_per_instance) = self.specialized_mix(tape, b, cs0, &routing)?;
        let c_a = tape.concat(&[c_g, c_s], 1)?;
        let executed_adapter_count = {
            let mut seen = vec![false; self.cfg.experts];
            if self.cfg.k_s > 0 {
                routing.record.selected.iter().flatten().for_each(|&m| seen[m] = true);
            }
            seen.iter().filter(|&&x| x).count()
        };
        Ok(TransferredContext {
            c_g,
            c_s,
            c_a,
            probs: routing.probs,
            routing: routing.record,
            executed_per_instance,
            executed_adapter_count,
        })
    }
}

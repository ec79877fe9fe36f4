use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rope::{axis_pairs, RotaryTable};
use super::{add_linear, mlp, sinusoidal, AttnIds};
use crate::error::{CktError, Result};
use crate::tensor::{linear, multi_head_attention, Bound, ParamId, ParamSet, Precision, Rotary, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Patch grid `(T, H, W)`.
    pub grid: [usize; 3],
    /// Leading temporal slots holding video latents; the rest hold actions.
    pub video_frames: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub d_action: usize,
    pub d_video: usize,
    pub sigma_data: f64,
    pub rope_theta: f64,
    /// Fault injection: rotate cross-attention keys by their sequence index.
    #[serde(default)]
    pub debug_rope_on_cross_attn: bool,
    pub seed: u64,
}

impl StudentConfig {
    pub fn desk() -> Self {
        StudentConfig {
            blocks: 4,
            d_model: 32,
            heads: 4,
            ffn: 64,
            grid: [3, 4, 4],
            video_frames: 2,
            text_len: 7,
            text_dim: 16,
            d_action: 7,
            d_video: 4,
            sigma_data: 1.0,
            rope_theta: 10_000.0,
            debug_rope_on_cross_attn: false,
            seed: 23,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    /// `T * H * W`.
    pub fn visual_len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn video_tokens(&self) -> usize {
        self.video_frames * self.grid[1] * self.grid[2]
    }

    pub fn action_tokens(&self) -> usize {
        (self.grid[0] - self.video_frames) * self.grid[1] * self.grid[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.d_model == 0 || self.ffn == 0 || self.text_dim == 0 {
            return Err(CktError::config("student dims must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(CktError::config(format!(
                "student width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let dh = self.head_dim();
        if !dh.is_multiple_of(2) || axis_pairs(dh).contains(&0) {
            return Err(CktError::config(format!(
                "head dim {dh} cannot be split into temporal/height/width rotary slices"
            )));
        }
        if self.grid.contains(&0) || self.video_frames == 0 || self.video_frames >= self.grid[0] {
            return Err(CktError::config(format!(
                "grid {:?} needs at least one video and one action frame (video_frames={})",
                self.grid, self.video_frames
            )));
        }
        if self.d_action == 0 || self.d_video == 0 || self.text_len == 0 {
            return Err(CktError::config("stream widths and text length must be positive"));
        }
        if !(self.sigma_data > 0.0) || !(self.rope_theta > 1.0) {
            return Err(CktError::config("sigma_data must be positive and rope_theta above 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AttentionKind {
    SelfAttn,
    CrossAttn,
}

/// One attention call observed while a probe is active.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub kind: AttentionKind,
    /// Rows fed to the query projection.
    pub query_rows: usize,
    /// Rows fed to the key/value projections.
    pub key_rows: usize,
    /// Whether the query input was the visual token stream.
    pub query_from_visual: bool,
    pub mul_adds: u64,
    pub rotary: Option<Rotary>,
}

pub struct DenoiseOutput {
    pub video: Var,
    pub action: Var,
}

struct Block {
    modulation: (ParamId, ParamId),
    self_attn: AttnIds,
    cross_attn: AttnIds,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

pub struct Student {
    cfg: StudentConfig,
    params: ParamSet,
    text_proj: (ParamId, ParamId),
    video_in: (ParamId, ParamId),
    action_in: (ParamId, ParamId),
    time: ((ParamId, ParamId), (ParamId, ParamId)),
    blocks: Vec<Block>,
    final_mod: (ParamId, ParamId),
    video_out: (ParamId, ParamId),
    action_out: (ParamId, ParamId),
    rotary: RotaryTable,
    probe: Mutex<Option<Vec<AttentionRecord>>>,
    hooked: AtomicBool,
}

const FREQ_DIM: usize = 16;
const MOD_STD: f64 = 0.02;

impl Student {
    pub fn new(cfg: StudentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamSet::new();
        let d = cfg.d_model;
        let text_proj = add_linear(&mut p, "student.text_proj", cfg.text_dim, d, None, &mut rng);
        let video_in = add_linear(&mut p, "student.video_in", cfg.d_video, d, None, &mut rng);
        let action_in = add_linear(&mut p, "student.action_in", cfg.d_action, d, None, &mut rng);
        let time = (
            add_linear(&mut p, "student.time.fc1", FREQ_DIM, d, None, &mut rng),
            add_linear(&mut p, "student.time.fc2", d, d, None, &mut rng),
        );
        let blocks = (0..cfg.blocks)
            .map(|i| Block {
                modulation: add_linear(&mut p, &format!("student.{i}.mod"), d, 6 * d, Some(MOD_STD), &mut rng),
                self_attn: AttnIds::new(&mut p, &format!("student.{i}.self"), d, None, &mut rng),
                cross_attn: AttnIds::new(&mut p, &format!("student.{i}.cross"), d, None, &mut rng),
                fc1: add_linear(&mut p, &format!("student.{i}.fc1"), d, cfg.ffn, None, &mut rng),
                fc2: add_linear(&mut p, &format!("student.{i}.fc2"), cfg.ffn, d, None, &mut rng),
            })
            .collect();
        let final_mod = add_linear(&mut p, "student.final.mod", d, 2 * d, Some(MOD_STD), &mut rng);
        let video_out = add_linear(&mut p, "student.video_out", d, cfg.d_video, None, &mut rng);
        let action_out = add_linear(&mut p, "student.action_out", d, cfg.d_action, None, &mut rng);
        let rotary = RotaryTable::visual(&cfg)?;
        Ok(Student {
            cfg,
            params: p,
            text_proj,
            video_in,
            action_in,
            time,
            blocks,
            final_mod,
            video_out,
            action_out,
            rotary,
            probe: Mutex::new(None),
            hooked: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Direct weight access for tests that zero pathways. Training never
    /// goes through here.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn rotary(&self) -> &RotaryTable {
        &self.rotary
    }

    /// Looks up a block parameter by suffix, e.g. `(0, "cross.v.weight")`.
    pub fn block_param(&self, block: usize, name: &str) -> Option<ParamId> {
        self.params.find(&format!("student.{block}.{name}"))
    }

    /// Marks the conditioning pathway as replaced. Fails if it already is.
    pub fn claim_conditioning_hook(&self) -> Result<()> {
        if self.hooked.swap(true, Ordering::SeqCst) {
            return Err(CktError::config("student conditioning pathway is already wrapped"));
        }
        Ok(())
    }

    pub fn release_conditioning_hook(&self) {
        self.hooked.store(false, Ordering::SeqCst);
    }

    pub fn is_hooked(&self) -> bool {
        self.hooked.load(Ordering::SeqCst)
    }

    /// Start recording attention calls.
    pub fn start_probe(&self) {
        *self.probe.lock().expect("probe lock") = Some(Vec::new());
    }

    /// Stop recording and return what was seen.
    pub fn take_probe(&self) -> Vec<AttentionRecord> {
        self.probe.lock().expect("probe lock").take().unwrap_or_default()
    }

    fn record(&self, rec: AttentionRecord) {
        if let Some(v) = self.probe.lock().expect("probe lock").as_mut() {
            v.push(rec);
        }
    }

    /// The frozen text encoder projection, `[B, L_t, text_dim] -> [B, L_t, d]`.
    pub fn project_text(&self, tape: &mut Tape, b: &Bound, text: Var) -> Result<Var> {
        let s = tape.shape(text).to_vec();
        if s.len() != 3 || s[1] != self.cfg.text_len || s[2] != self.cfg.text_dim {
            return Err(CktError::shape(
                "project_text",
                &s,
                &[self.cfg.text_len, self.cfg.text_dim],
            ));
        }
        linear(tape, text, b[self.text_proj.0], Some(b[self.text_proj.1]))
    }

    /// Timestep embedding `[B, 1, d]` from the noise level.
    pub fn time_embed(&self, tape: &mut Tape, b: &Bound, sigma: &[f64]) -> Result<Var> {
        let c_noise: Vec<f64> = sigma.iter().map(|s| s.ln() / 4.0).collect();
        let feats = tape.constant(&[sigma.len(), 1, FREQ_DIM], sinusoidal(&c_noise, FREQ_DIM))?;
        mlp(tape, b, feats, self.time.0, self.time.1)
    }

    fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = tape.layer_norm(x, None, None, 1e-6)?;
        let s = tape.mul(n, scale)?;
        let y = tape.add(n, s)?;
        tape.add(y, shift)
    }

    /// One DiT block: AdaLN self-attention with rotary q/k, AdaLN
    /// cross-attention over `cond` without positional encoding, AdaLN FFN.
    pub fn block(&self, tape: &mut Tape, b: &Bound, index: usize, z: Var, cond: Var, temb: Var) -> Result<Var> {
        let d = self.cfg.d_model;
        let blk = self
            .blocks
            .get(index)
            .ok_or_else(|| CktError::Range(format!("block {index} of {}", self.blocks.len())))?;
        let (sz, sc) = (tape.shape(z).to_vec(), tape.shape(cond).to_vec());
        if sc.len() != 3 || sc[2] != d || sz.len() != 3 || sz[0] != sc[0] || sz[1..] != [self.cfg.visual_len(), d] {
            return Err(CktError::shape("student_block", &sz, &sc));
        }
        let act = tape.gelu(temb);
        let m = linear(tape, act, b[blk.modulation.0], Some(b[blk.modulation.1]))?;
        let mut chunks = Vec::with_capacity(6);
        for i in 0..6 {
            chunks.push(tape.slice(m, 2, i * d, (i + 1) * d)?);
        }

        let rot = Rotary {
            q_cos: Arc::clone(&self.rotary.cos),
            q_sin: Arc::clone(&self.rotary.sin),
            k_cos: Arc::clone(&self.rotary.cos),
            k_sin: Arc::clone(&self.rotary.sin),
        };
        let h = Self::modulate(tape, z, chunks[0], chunks[1])?;
        let before = tape.mul_adds();
        let a = multi_head_attention(tape, h, h, h, &blk.self_attn.vars(b), self.cfg.heads, Some(&rot))?;
        self.record(AttentionRecord {
            block: index,
            kind: AttentionKind::SelfAttn,
            query_rows: sz[1],
            key_rows: sz[1],
            query_from_visual: true,
            mul_adds: tape.mul_adds() - before,
            rotary: Some(rot),
        });
        let z = tape.add(z, a.out)?;

        let h = Self::modulate(tape, z, chunks[2], chunks[3])?;
        let cross_rot = if self.cfg.debug_rope_on_cross_attn {
            let seq = RotaryTable::sequential(sc[1], self.cfg.head_dim(), self.cfg.rope_theta);
            Some(Rotary {
                q_cos: Arc::clone(&self.rotary.cos),
                q_sin: Arc::clone(&self.rotary.sin),
                k_cos: seq.cos,
                k_sin: seq.sin,
            })
        } else {
            None
        };
        let before = tape.mul_adds();
        let c = multi_head_attention(
            tape,
            h,
            cond,
            cond,
            &blk.cross_attn.vars(b),
            self.cfg.heads,
            cross_rot.as_ref(),
        )?;
        self.record(AttentionRecord {
            block: index,
            kind: AttentionKind::CrossAttn,
            query_rows: sz[1],
            key_rows: sc[1],
            query_from_visual: true,
            mul_adds: tape.mul_adds() - before,
            rotary: cross_rot,
        });
        let z = tape.add(z, c.out)?;

        let h = Self::modulate(tape, z, chunks[4], chunks[5])?;
        let f = mlp(tape, b, h, blk.fc1, blk.fc2)?;
        tape.add(z, f)
    }

    /// Predicts clean video latents and actions from their noisy versions at
    /// per-instance noise level `sigma`, conditioned on `cond`.
    pub fn denoise(
        &self,
        tape: &mut Tape,
        b: &Bound,
        noisy_video: Var,
        noisy_action: Var,
        sigma: &[f64],
        cond: Var,
    ) -> Result<DenoiseOutput> {
        let cfg = &self.cfg;
        let bsz = sigma.len();
        let (sv, sa) = (tape.shape(noisy_video).to_vec(), tape.shape(noisy_action).to_vec());
        if sv != [bsz, cfg.video_tokens(), cfg.d_video] {
            return Err(CktError::shape(
                "student_denoise",
                &sv,
                &[bsz, cfg.video_tokens(), cfg.d_video],
            ));
        }
        if sa != [bsz, cfg.action_tokens(), cfg.d_action] {
            return Err(CktError::shape(
                "student_denoise",
                &sa,
                &[bsz, cfg.action_tokens(), cfg.d_action],
            ));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(CktError::Range(format!("noise level {s} must be positive and finite")));
        }
        let sd2 = cfg.sigma_data * cfg.sigma_data;
        let per = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { sigma.iter().map(|&s| f(s)).collect() };
        let c_in = tape.constant(&[bsz, 1, 1], per(&|s| 1.0 / (s * s + sd2).sqrt()))?;
        let c_skip = tape.constant(&[bsz, 1, 1], per(&|s| sd2 / (s * s + sd2)))?;
        let c_out = tape.constant(&[bsz, 1, 1], per(&|s| s * cfg.sigma_data / (s * s + sd2).sqrt()))?;

        let xv = tape.mul(noisy_video, c_in)?;
        let xa = tape.mul(noisy_action, c_in)?;
        let ev = linear(tape, xv, b[self.video_in.0], Some(b[self.video_in.1]))?;
        let ea = linear(tape, xa, b[self.action_in.0], Some(b[self.action_in.1]))?;
        let mut z = tape.concat(&[ev, ea], 1)?;
        let temb = self.time_embed(tape, b, sigma)?;
        for i in 0..self.blocks.len() {
            z = self.block(tape, b, i, z, cond, temb)?;
        }
        let act = tape.gelu(temb);
        let m = linear(tape, act, b[self.final_mod.0], Some(b[self.final_mod.1]))?;
        let d = cfg.d_model;
        let shift = tape.slice(m, 2, 0, d)?;
        let scale = tape.slice(m, 2, d, 2 * d)?;
        let h = Self::modulate(tape, z, shift, scale)?;
        let hv = tape.slice(h, 1, 0, cfg.video_tokens())?;
        let ha = tape.slice(h, 1, cfg.video_tokens(), cfg.visual_len())?;
        let fv = linear(tape, hv, b[self.video_out.0], Some(b[self.video_out.1]))?;
        let fa = linear(tape, ha, b[self.action_out.0], Some(b[self.action_out.1]))?;

        let skip_v = tape.mul(noisy_video, c_skip)?;
        let out_v = tape.mul(fv, c_out)?;
        let skip_a = tape.mul(noisy_action, c_skip)?;
        let out_a = tape.mul(fa, c_out)?;
        Ok(DenoiseOutput {
            video: tape.add(skip_v, out_v)?,
            action: tape.add(skip_a, out_a)?,
        })
    }

    /// Unwrapped convenience path: projects `text` and denoises on a fresh tape.
    pub fn denoise_tensors(
        &self,
        text: &Tensor,
        noisy_video: &Tensor,
        noisy_action: &Tensor,
        sigma: &[f64],
        precision: Precision,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new(precision);
        let b = self.bind(&mut tape);
        let t = tape.leaf(text);
        let cond = self.project_text(&mut tape, &b, t)?;
        let v = tape.leaf(noisy_video);
        let a = tape.leaf(noisy_action);
        let out = self.denoise(&mut tape, &b, v, a, sigma, cond)?;
        Ok((tape.to_tensor(out.video), tape.to_tensor(out.action)))
    }
}

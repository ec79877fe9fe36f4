use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_linear, mlp, sinusoidal, AttnIds};
use crate::error::{CktError, Result};
use crate::tensor::{linear, multi_head_attention, ParamId, ParamSet, Precision, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub n_img: usize,
    pub n_text: usize,
    /// Layer whose output is handed to the transfer module.
    pub extract_layer: usize,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn desk() -> Self {
        TeacherConfig {
            layers: 6,
            d_model: 48,
            heads: 4,
            ffn: 96,
            n_img: 16,
            n_text: 4,
            extract_layer: 3,
            seed: 11,
        }
    }

    pub fn tokens(&self) -> usize {
        self.n_img + self.n_text
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.ffn == 0 {
            return Err(CktError::config("teacher dims must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(CktError::config(format!(
                "teacher width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.extract_layer > self.layers {
            return Err(CktError::config(format!(
                "extraction layer {} exceeds teacher depth {}",
                self.extract_layer, self.layers
            )));
        }
        if self.tokens() == 0 {
            return Err(CktError::config("teacher needs at least one input token"));
        }
        Ok(())
    }
}

/// Hidden states of one observation taken from an intermediate teacher layer.
#[derive(Clone, Debug)]
pub struct TeacherContext {
    pub hidden: Tensor,
    pub source_layer: usize,
    pub timestep_used: f64,
    pub observation_id: u64,
}

struct Block {
    attn: AttnIds,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

pub struct Teacher {
    cfg: TeacherConfig,
    params: ParamSet,
    pos: ParamId,
    time: ((ParamId, ParamId), (ParamId, ParamId)),
    blocks: Vec<Block>,
    forward_passes: AtomicU64,
    blocks_executed: AtomicU64,
}

const FREQ_DIM: usize = 16;

impl Teacher {
    pub fn new(cfg: TeacherConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let pos = params.add("teacher.pos", Tensor::randn(&[1, cfg.tokens(), d], 0.02, &mut rng));
        let time = (
            add_linear(&mut params, "teacher.time.fc1", FREQ_DIM, d, None, &mut rng),
            add_linear(&mut params, "teacher.time.fc2", d, d, None, &mut rng),
        );
        let blocks = (0..cfg.layers)
            .map(|i| Block {
                attn: AttnIds::new(&mut params, &format!("teacher.{i}.attn"), d, None, &mut rng),
                fc1: add_linear(&mut params, &format!("teacher.{i}.fc1"), d, cfg.ffn, None, &mut rng),
                fc2: add_linear(&mut params, &format!("teacher.{i}.fc2"), cfg.ffn, d, None, &mut rng),
            })
            .collect();
        Ok(Teacher {
            cfg,
            params,
            pos,
            time,
            blocks,
            forward_passes: AtomicU64::new(0),
            blocks_executed: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn blocks_executed(&self) -> u64 {
        self.blocks_executed.load(Ordering::Relaxed)
    }

    /// Encodes `[x_img; x_text]` at the clean timestep and stops after
    /// `layer` blocks. Deeper blocks are never run.
    pub fn forward_extract(
        &self,
        x_img: &Tensor,
        x_text: &Tensor,
        layer: usize,
        observation_id: u64,
        precision: Precision,
    ) -> Result<TeacherContext> {
        if layer > self.cfg.layers {
            return Err(CktError::config(format!(
                "extraction layer {layer} exceeds teacher depth {}",
                self.cfg.layers
            )));
        }
        let d = self.cfg.d_model;
        let (si, st) = (x_img.shape(), x_text.shape());
        if si.len() != 3 || st.len() != 3 || si[0] != st[0] || si[2] != d || st[2] != d {
            return Err(CktError::shape("teacher_forward_extract", si, st));
        }
        if si[1] + st[1] != self.cfg.tokens() {
            return Err(CktError::shape("teacher_forward_extract", si, &[self.cfg.tokens()]));
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let timestep = 0.0;

        let mut tape = Tape::new(precision);
        let b = self.params.bind(&mut tape);
        let img = tape.leaf(x_img);
        let txt = tape.leaf(x_text);
        let mut x = tape.concat(&[img, txt], 1)?;
        x = tape.add(x, b[self.pos])?;
        let freqs = tape.constant(&[1, 1, FREQ_DIM], sinusoidal(&[timestep], FREQ_DIM))?;
        let temb = mlp(&mut tape, &b, freqs, self.time.0, self.time.1)?;
        x = tape.add(x, temb)?;

        for blk in &self.blocks[..layer] {
            let h = tape.layer_norm(x, None, None, 1e-5)?;
            let a = multi_head_attention(&mut tape, h, h, h, &blk.attn.vars(&b), self.cfg.heads, None)?;
            x = tape.add(x, a.out)?;
            let h = tape.layer_norm(x, None, None, 1e-5)?;
            let f = linear(&mut tape, h, b[blk.fc1.0], Some(b[blk.fc1.1]))?;
            let f = tape.gelu(f);
            let f = linear(&mut tape, f, b[blk.fc2.0], Some(b[blk.fc2.1]))?;
            x = tape.add(x, f)?;
            self.blocks_executed.fetch_add(1, Ordering::Relaxed);
        }
        Ok(TeacherContext {
            hidden: tape.to_tensor(x),
            source_layer: layer,
            timestep_used: timestep,
            observation_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(cfg: &TeacherConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[2, cfg.n_img, cfg.d_model], 1.0, &mut rng),
            Tensor::randn(&[2, cfg.n_text, cfg.d_model], 1.0, &mut rng),
        )
    }

    #[test]
    fn runs_only_requested_blocks() {
        let cfg = TeacherConfig {
            layers: 5,
            ..TeacherConfig::desk()
        };
        let t = Teacher::new(cfg.clone()).unwrap();
        let (xi, xt) = inputs(&cfg, 1);
        let ctx = t.forward_extract(&xi, &xt, 3, 7, Precision::F64).unwrap();
        assert_eq!(t.blocks_executed(), 3);
        assert_eq!(t.forward_passes(), 1);
        assert_eq!(ctx.hidden.shape(), &[2, cfg.tokens(), cfg.d_model]);
        assert_eq!(ctx.timestep_used, 0.0);
        assert!(!ctx.hidden.requires_grad);
    }

    #[test]
    fn layer_zero_is_embedding() {
        let cfg = TeacherConfig::desk();
        let t = Teacher::new(cfg.clone()).unwrap();
        let (xi, xt) = inputs(&cfg, 2);
        let ctx = t.forward_extract(&xi, &xt, 0, 0, Precision::F64).unwrap();
        assert_eq!(t.blocks_executed(), 0);
        // The embedding adds batch-independent position and time terms, so
        // differences between batch rows pass through untouched.
        let n = cfg.tokens() * cfg.d_model;
        let h = ctx.hidden.data();
        let mut raw = Vec::new();
        for b in 0..2 {
            raw.extend_from_slice(&xi.data()[b * cfg.n_img * cfg.d_model..(b + 1) * cfg.n_img * cfg.d_model]);
            raw.extend_from_slice(&xt.data()[b * cfg.n_text * cfg.d_model..(b + 1) * cfg.n_text * cfg.d_model]);
        }
        for i in 0..n {
            let got = h[i] - h[n + i];
            let want = raw[i] - raw[n + i];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = TeacherConfig::desk();
        let (xi, xt) = inputs(&cfg, 3);
        let a = Teacher::new(cfg.clone())
            .unwrap()
            .forward_extract(&xi, &xt, 4, 0, Precision::F64)
            .unwrap();
        let b = Teacher::new(cfg)
            .unwrap()
            .forward_extract(&xi, &xt, 4, 0, Precision::F64)
            .unwrap();
        assert_eq!(a.hidden.data(), b.hidden.data());
    }

    #[test]
    fn layer_out_of_range() {
        let cfg = TeacherConfig::desk();
        let t = Teacher::new(cfg.clone()).unwrap();
        let (xi, xt) = inputs(&cfg, 4);
        assert!(matches!(
            t.forward_extract(&xi, &xt, 7, 0, Precision::F64),
            Err(CktError::Config(_))
        ));
        assert!(TeacherConfig {
            extract_layer: 9,
            ..cfg
        }
        .validate()
        .is_err());
    }
}

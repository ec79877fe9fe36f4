//! Factorized 3D rotary position encoding for the student's visual tokens.
//!
//! The head dimension is split into disjoint temporal, height and width
//! slices. Phases are a function of the patch coordinate and the student
//! geometry only.

use std::sync::Arc;

use super::StudentConfig;
use crate::error::{CktError, Result};

/// Rotation angles of one patch, one angle per rotated pair, laid out as
/// `[temporal; height; width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryPhases {
    pub temporal: Vec<f64>,
    pub height: Vec<f64>,
    pub width: Vec<f64>,
}

impl RotaryPhases {
    pub fn angles(&self) -> Vec<f64> {
        let mut v = self.temporal.clone();
        v.extend_from_slice(&self.height);
        v.extend_from_slice(&self.width);
        v
    }
}

/// Number of rotated pairs given to the (temporal, height, width) axes.
pub fn axis_pairs(head_dim: usize) -> [usize; 3] {
    let hw = head_dim / 6;
    [head_dim / 2 - 2 * hw, hw, hw]
}

fn axis_angles(pos: usize, pairs: usize, theta: f64) -> Vec<f64> {
    (0..pairs)
        .map(|i| pos as f64 * theta.powf(-(i as f64) / pairs as f64))
        .collect()
}

pub fn rope_phases(cfg: &StudentConfig, t: usize, h: usize, w: usize) -> Result<RotaryPhases> {
    let [gt, gh, gw] = cfg.grid;
    if t >= gt || h >= gh || w >= gw {
        return Err(CktError::Range(format!(
            "patch ({t},{h},{w}) outside grid ({gt},{gh},{gw})"
        )));
    }
    let [pt, ph, pw] = axis_pairs(cfg.head_dim());
    Ok(RotaryPhases {
        temporal: axis_angles(t, pt, cfg.rope_theta),
        height: axis_angles(h, ph, cfg.rope_theta),
        width: axis_angles(w, pw, cfg.rope_theta),
    })
}

/// cos/sin tables, `[L, head_dim/2]`.
#[derive(Clone, Debug)]
pub struct RotaryTable {
    pub cos: Arc<Vec<f64>>,
    pub sin: Arc<Vec<f64>>,
}

impl RotaryTable {
    fn from_angles(angles: &[f64]) -> Self {
        RotaryTable {
            cos: Arc::new(angles.iter().map(|a| a.cos()).collect()),
            sin: Arc::new(angles.iter().map(|a| a.sin()).collect()),
        }
    }

    /// Table for every visual token in raster order over the patch grid.
    pub fn visual(cfg: &StudentConfig) -> Result<Self> {
        let [gt, gh, gw] = cfg.grid;
        let mut angles = Vec::with_capacity(cfg.visual_len() * cfg.head_dim() / 2);
        for t in 0..gt {
            for h in 0..gh {
                for w in 0..gw {
                    angles.extend(rope_phases(cfg, t, h, w)?.angles());
                }
            }
        }
        Ok(Self::from_angles(&angles))
    }

    /// 1D table indexed by sequence position. Only used by the fault-injection
    /// path that rotates cross-attention keys by their conditioning index.
    pub fn sequential(len: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let angles: Vec<f64> = (0..len).flat_map(|p| axis_angles(p, half, theta)).collect();
        Self::from_angles(&angles)
    }

    pub fn bits(&self) -> (Vec<u64>, Vec<u64>) {
        (
            self.cos.iter().map(|v| v.to_bits()).collect(),
            self.sin.iter().map(|v| v.to_bits()).collect(),
        )
    }
}

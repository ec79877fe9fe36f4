//! The trainable transfer module: shared trunk, learnable-query compressor,
//! generalized adapter, router and sparsely executed specialized adapters.

mod budget;
mod module;

pub use budget::{count_params, BranchBreakdown, Grouping, ParamBudget};
pub use module::{Branch, CktModule, Routing, RoutingRecord, TransferredContext};

use serde::{Deserialize, Serialize};

use crate::error::{CktError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CktConfig {
    pub d_tea: usize,
    pub d_stu: usize,
    /// Trunk bottleneck width.
    pub d_b: usize,
    pub k_g: usize,
    pub k_s: usize,
    pub heads: usize,
    pub dropout: f64,
    pub r_g: usize,
    pub r_s: usize,
    /// Number of specialized adapters.
    #[serde(rename = "M")]
    pub experts: usize,
    #[serde(rename = "k")]
    pub top_k: usize,
    pub d_gate: usize,
    pub seed: u64,
}

impl CktConfig {
    pub fn desk() -> Self {
        CktConfig {
            d_tea: 48,
            d_stu: 32,
            d_b: 16,
            k_g: 4,
            k_s: 4,
            heads: 4,
            dropout: 0.1,
            r_g: 4,
            r_s: 4,
            experts: 8,
            top_k: 2,
            d_gate: 16,
            seed: 5,
        }
    }

    pub fn paper() -> Self {
        CktConfig {
            d_tea: 5120,
            d_stu: 2048,
            d_b: 512,
            k_g: 32,
            k_s: 32,
            heads: 16,
            dropout: 0.1,
            r_g: 64,
            r_s: 64,
            experts: 8,
            top_k: 2,
            d_gate: 512,
            seed: 5,
        }
    }

    pub fn context_len(&self) -> usize {
        self.k_g + self.k_s
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_tea, self.d_stu, self.d_b, self.r_g, self.r_s, self.d_gate];
        if dims.contains(&0) {
            return Err(CktError::config("ckt widths must be positive"));
        }
        if self.experts == 0 {
            return Err(CktError::config("ckt.experts must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(CktError::config(format!(
                "ckt.k={} violates 1 <= k <= M={}",
                self.top_k, self.experts
            )));
        }
        if self.heads == 0 || !self.d_stu.is_multiple_of(self.heads) {
            return Err(CktError::config(format!(
                "ckt.heads={} must divide d_stu={}",
                self.heads, self.d_stu
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CktError::config(format!("ckt.dropout={} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

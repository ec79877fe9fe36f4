use serde::Serialize;

use super::CktConfig;

/// How shared pieces are attributed when counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Count what is instantiated: one trunk and compressor, bias-free
    /// low-rank adapters, plus the separator token.
    Structural,
    /// Bundle trunk, query bank and compressor into every branch and count
    /// `1 + M` such branches plus the router, without low-rank adapters.
    PaperTable,
}

impl Grouping {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "structural" => Some(Grouping::Structural),
            "paper-table" | "paper_table" | "table" => Some(Grouping::PaperTable),
            _ => None,
        }
    }
}

/// Trunk, queries and compressor as one branch would carry them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BranchBreakdown {
    pub down_proj: u64,
    pub up_proj: u64,
    pub trunk_norm: u64,
    pub queries: u64,
    pub attention: u64,
    pub post_norm: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBudget {
    pub grouping: Grouping,
    pub branch: BranchBreakdown,
    /// Shared trunk + compressor (structural) or zero (table grouping).
    pub shared: u64,
    pub generalized: u64,
    pub per_expert: u64,
    pub specialized_total: u64,
    pub router: u64,
    pub separator: u64,
    pub bank_total: u64,
    pub p_train: u64,
    pub p_active: u64,
}

impl ParamBudget {
    /// `count / reference` as a percentage.
    pub fn overhead_pct(&self, reference: f64) -> f64 {
        100.0 * self.p_train as f64 / reference
    }
}

fn branch(cfg: &CktConfig, queries: usize) -> BranchBreakdown {
    let (t, s, b) = (cfg.d_tea as u64, cfg.d_stu as u64, cfg.d_b as u64);
    let down_proj = t * b + b;
    let up_proj = b * s + s;
    let trunk_norm = 2 * s;
    let queries = queries as u64 * s;
    let attention = 4 * (s * s + s);
    let post_norm = 2 * s;
    BranchBreakdown {
        down_proj,
        up_proj,
        trunk_norm,
        queries,
        attention,
        post_norm,
        total: down_proj + up_proj + trunk_norm + queries + attention + post_norm,
    }
}

pub fn count_params(cfg: &CktConfig, grouping: Grouping) -> ParamBudget {
    let (t, s, m, k) = (cfg.d_tea as u64, cfg.d_stu as u64, cfg.experts as u64, cfg.top_k as u64);
    let gate = cfg.d_gate as u64;
    let router = t * gate + gate + gate * m + m + 1;
    let br = branch(cfg, cfg.k_g);
    match grouping {
        Grouping::PaperTable => {
            let spec = branch(cfg, cfg.k_s).total;
            let bank = br.total + m * spec + router;
            ParamBudget {
                grouping,
                branch: br,
                shared: 0,
                generalized: br.total,
                per_expert: spec,
                specialized_total: m * spec,
                router,
                separator: 0,
                bank_total: bank,
                p_train: bank,
                p_active: br.total + k * spec + router,
            }
        }
        Grouping::Structural => {
            let shared = br.total + cfg.k_s as u64 * s;
            let generalized = 2 * s * cfg.r_g as u64;
            let per_expert = 2 * s * cfg.r_s as u64;
            let separator = s;
            let base = shared + generalized + router + separator;
            let bank = base + m * per_expert;
            ParamBudget {
                grouping,
                branch: br,
                shared,
                generalized,
                per_expert,
                specialized_total: m * per_expert,
                router,
                separator,
                bank_total: bank,
                p_train: bank,
                p_active: base + k * per_expert,
            }
        }
    }
}

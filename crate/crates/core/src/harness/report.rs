use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use crate::backbone::Teacher;
use crate::ckt::{count_params, CktConfig, CktModule, Grouping, ParamBudget};
use crate::error::{CktError, Result};
use crate::injection::Observation;
use crate::tensor::{Precision, Tape, Tensor};

/// Backbone sizes the overhead is quoted against.
pub const REFERENCE_SIZES: [(&str, f64); 3] = [
    ("student (2.0e9)", 2.0e9),
    ("teacher (14.0e9)", 14.0e9),
    ("teacher + student (16.0e9)", 16.0e9),
];

fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Plain-text budget table.
pub fn budget_table(cfg: &CktConfig, grouping: Grouping) -> (ParamBudget, String) {
    let b = count_params(cfg, grouping);
    let br = &b.branch;
    let mut rows: Vec<(String, u64)> = vec![
        ("down projection".into(), br.down_proj),
        ("up projection".into(), br.up_proj),
        ("trunk layer norm".into(), br.trunk_norm),
        ("query tokens".into(), br.queries),
        ("cross-attention".into(), br.attention),
        ("post layer norm".into(), br.post_norm),
        ("per adapter branch".into(), br.total),
    ];
    if grouping == Grouping::Structural {
        rows.push(("shared trunk + compressor".into(), b.shared));
        rows.push(("separator".into(), b.separator));
    }
    rows.extend([
        ("generalized".into(), b.generalized),
        (
            format!("specialized ({} x {})", cfg.experts, grouped(b.per_expert)),
            b.specialized_total,
        ),
        ("router".into(), b.router),
        ("bank total".into(), b.bank_total),
        ("P_train".into(), b.p_train),
        (format!("P_active (k={})", cfg.top_k), b.p_active),
    ]);
    let title = match grouping {
        Grouping::PaperTable => "paper-table",
        Grouping::Structural => "structural",
    };
    let mut out = format!("CKT parameter budget ({title} grouping)\n");
    for (label, n) in rows {
        let _ = writeln!(out, "  {label:<30}{:>15}", grouped(n));
    }
    for (label, size) in REFERENCE_SIZES {
        let _ = writeln!(out, "  overhead vs {label:<26}{:>6.2}%", b.overhead_pct(size));
    }
    (b, out)
}

/// Average routing probabilities of one stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: usize,
    pub episodes: usize,
    pub probs: Vec<f64>,
}

impl StageRow {
    /// Index of the largest mean probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (m, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = m;
            }
        }
        best
    }

    pub fn top2_mass(&self) -> f64 {
        let mut p = self.probs.clone();
        p.sort_by(|a, b| b.total_cmp(a));
        p.iter().take(2).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RouteStats {
    pub experts: usize,
    pub rows: Vec<StageRow>,
}

impl RouteStats {
    pub fn distinct_argmax(&self) -> usize {
        let mut a: Vec<usize> = self.rows.iter().map(StageRow::argmax).collect();
        a.sort_unstable();
        a.dedup();
        a.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("stage  episodes");
        for m in 0..self.experts {
            let _ = write!(s, "  {:>7}", format!("E{m}"));
        }
        s.push_str("  argmax  top2\n");
        for r in &self.rows {
            let _ = write!(s, "{:>5}  {:>8}", r.stage, r.episodes);
            for p in &r.probs {
                let _ = write!(s, "  {p:>7.4}");
            }
            let _ = writeln!(s, "  {:>6}  {:.4}", format!("E{}", r.argmax()), r.top2_mass());
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,episodes");
        for m in 0..self.experts {
            let _ = write!(s, ",p{m}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.stage, r.episodes);
            for p in &r.probs {
                let _ = write!(s, ",{p:.17}");
            }
            s.push('\n');
        }
        s
    }
}

/// Eval-mode routing probabilities averaged per stage label.
pub fn route_stats(
    teacher: &Teacher,
    ckt: &CktModule,
    observations: &[&Observation],
    precision: Precision,
) -> Result<RouteStats> {
    if observations.is_empty() {
        return Err(CktError::config("route-stats needs at least one observation"));
    }
    let layer = teacher.config().extract_layer;
    let mut hidden = Vec::with_capacity(observations.len());
    let mut stages = Vec::with_capacity(observations.len());
    for o in observations {
        let stage = o
            .stage
            .ok_or_else(|| CktError::config(format!("observation {:016x} has no stage label", o.id)))?;
        stages.push(stage);
        hidden.push(
            teacher
                .forward_extract(&o.x_img, &o.x_text, layer, o.id, precision)?
                .hidden,
        );
    }
    let hidden = Tensor::stack(&hidden)?;
    let s = hidden.shape();
    let hidden = hidden.reshape(&[s[0] * s[1], s[2], s[3]])?;

    let mut tape = Tape::new(precision);
    let b = ckt.bind(&mut tape);
    let h = tape.leaf(&hidden);
    let routing = ckt.route(&mut tape, &b, h, false, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    let m = ckt.config().experts;
    let mut acc: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (i, &stage) in stages.iter().enumerate() {
        let e = acc.entry(stage).or_insert_with(|| (0, vec![0.0; m]));
        e.0 += 1;
        for (a, p) in e.1.iter_mut().zip(&routing.record.probs[i * m..(i + 1) * m]) {
            *a += p;
        }
    }
    let rows = acc
        .into_iter()
        .map(|(stage, (n, sum))| StageRow {
            stage,
            episodes: n,
            probs: sum.into_iter().map(|p| p / n as f64).collect(),
        })
        .collect();
    Ok(RouteStats { experts: m, rows })
}

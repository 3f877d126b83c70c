//! Displacement metrics, their aggregation, and comparison-table export.

mod report;

pub use report::{
    read_report, stream_row_id, write_report, LayerSpan, ReportRow, ReportTable, TableKind, METRIC_COLUMNS, STREAM_ROWS,
};

use serde::{Deserialize, Serialize};

use crate::decoder::{final_valid, PredictionSet};
use crate::error::{Error, Result};

/// Endpoint error above which a case counts as a miss, meters.
pub const MISS_THRESHOLD: f64 = 2.0;

/// One scored prediction: the focal agent's modes against its true future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub scenario_id: String,
    pub pred: PredictionSet,
    pub target: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

fn check(pred: &PredictionSet, target: &[[f64; 2]], valid: &[bool]) -> Result<()> {
    if target.len() != pred.horizon || valid.len() != pred.horizon {
        return Err(Error::Dimension {
            op: "metric target",
            lhs: vec![target.len(), valid.len()],
            rhs: vec![pred.horizon],
        });
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Target("no valid target frames".into()));
    }
    Ok(())
}

fn check_k(pred: &PredictionSet, k: usize) -> Result<()> {
    if k == 0 || k > pred.modes {
        return Err(Error::Input(format!("k = {k} outside 1..={}", pred.modes)));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mode indices ranked by probability, lower index first on ties.
pub fn ranked_modes(pred: &PredictionSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pred.modes).collect();
    idx.sort_by(|&a, &b| pred.probabilities[b].total_cmp(&pred.probabilities[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k(pred: &PredictionSet, k: usize) -> Result<Vec<usize>> {
    check_k(pred, k)?;
    let mut r = ranked_modes(pred);
    r.truncate(k);
    Ok(r)
}

/// Mean displacement of one mode over valid frames.
pub fn ade(pred: &PredictionSet, mode: usize, target: &[[f64; 2]], valid: &[bool]) -> Result<f64> {
    check(pred, target, valid)?;
    let m = pred.mode(mode);
    let (mut s, mut n) = (0.0, 0usize);
    for t in 0..pred.horizon {
        if valid[t] {
            s += dist(m[t], target[t]);
            n += 1;
        }
    }
    Ok(s / n as f64)
}

/// Displacement of one mode at the final valid frame.
pub fn fde(pred: &PredictionSet, mode: usize, target: &[[f64; 2]], valid: &[bool]) -> Result<f64> {
    check(pred, target, valid)?;
    let t = final_valid(valid)?;
    Ok(dist(pred.mode(mode)[t], target[t]))
}

fn min_over(modes: &[usize], f: impl Fn(usize) -> Result<f64>) -> Result<(usize, f64)> {
    let mut best = (modes[0], f(modes[0])?);
    for &m in &modes[1..] {
        let v = f(m)?;
        if v < best.1 {
            best = (m, v);
        }
    }
    Ok(best)
}

pub fn min_ade_k(pred: &PredictionSet, target: &[[f64; 2]], valid: &[bool], k: usize) -> Result<f64> {
    let modes = top_k(pred, k)?;
    Ok(min_over(&modes, |m| ade(pred, m, target, valid))?.1)
}

pub fn min_fde_k(pred: &PredictionSet, target: &[[f64; 2]], valid: &[bool], k: usize) -> Result<f64> {
    let modes = top_k(pred, k)?;
    Ok(min_over(&modes, |m| fde(pred, m, target, valid))?.1)
}

/// `minFDE_K + (1 − p̂)²` with `p̂` the probability of the endpoint-best mode.
pub fn brier_min_fde(pred: &PredictionSet, target: &[[f64; 2]], valid: &[bool]) -> Result<f64> {
    let modes = top_k(pred, pred.modes)?;
    let (m, f) = min_over(&modes, |m| fde(pred, m, target, valid))?;
    Ok(f + (1.0 - pred.probabilities[m]).powi(2))
}

pub fn miss_rate_k(cases: &[EvalCase], k: usize, threshold: f64) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Input("miss rate over an empty dataset".into()));
    }
    let mut misses = 0usize;
    for c in cases {
        if min_fde_k(&c.pred, &c.target, &c.valid, k)? > threshold {
            misses += 1;
        }
    }
    Ok(misses as f64 / cases.len() as f64)
}

/// `100 · (baseline − candidate) / baseline`.
pub fn relative_improvement(baseline: f64, candidate: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Input(format!("baseline {baseline} must be positive")));
    }
    Ok(100.0 * (baseline - candidate) / baseline)
}

/// Per-case values, or dataset means once aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "minADE1")]
    pub min_ade1: f64,
    #[serde(rename = "minFDE1")]
    pub min_fde1: f64,
    #[serde(rename = "minADE6")]
    pub min_ade6: f64,
    #[serde(rename = "minFDE6")]
    pub min_fde6: f64,
    #[serde(rename = "b-minFDE6")]
    pub brier_min_fde6: f64,
    #[serde(rename = "MR6")]
    pub miss_rate6: f64,
    pub scenarios: usize,
}

impl MetricsReport {
    /// Metrics of one case. With fewer than six modes, the six-mode columns use all of them.
    pub fn of_case(c: &EvalCase) -> Result<Self> {
        let k6 = c.pred.modes.min(6);
        let f6 = min_fde_k(&c.pred, &c.target, &c.valid, k6)?;
        Ok(MetricsReport {
            min_ade1: min_ade_k(&c.pred, &c.target, &c.valid, 1)?,
            min_fde1: min_fde_k(&c.pred, &c.target, &c.valid, 1)?,
            min_ade6: min_ade_k(&c.pred, &c.target, &c.valid, k6)?,
            min_fde6: f6,
            brier_min_fde6: brier_min_fde(&c.pred, &c.target, &c.valid)?,
            miss_rate6: if f6 > MISS_THRESHOLD { 1.0 } else { 0.0 },
            scenarios: 1,
        })
    }

    /// Means over cases, accumulated in scenario-id order.
    pub fn from_cases(cases: &[EvalCase]) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Input("no cases to evaluate".into()));
        }
        let mut order: Vec<&EvalCase> = cases.iter().collect();
        order.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
        let mut sum = [0.0; 6];
        for c in order {
            let m = MetricsReport::of_case(c)?;
            for (s, v) in sum.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        let n = cases.len() as f64;
        Ok(MetricsReport {
            min_ade1: sum[0] / n,
            min_fde1: sum[1] / n,
            min_ade6: sum[2] / n,
            min_fde6: sum[3] / n,
            brier_min_fde6: sum[4] / n,
            miss_rate6: sum[5] / n,
            scenarios: cases.len(),
        })
    }

    /// Values in [`METRIC_COLUMNS`] order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.min_ade1,
            self.min_fde1,
            self.min_ade6,
            self.min_fde6,
            self.brier_min_fde6,
            self.miss_rate6,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests;

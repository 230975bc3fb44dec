//! Localization metrics over ranked predictions and error distances.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GlnError, Result};
use crate::floorplan::{DistanceMetric, FloorPlan, LocationId};

/// Cutoffs reported for both Recall@k (ranks) and CDF@k (meters).
pub const REPORT_CUTOFFS: [usize; 5] = [1, 2, 3, 5, 10];

fn non_empty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(GlnError::Data(format!("{what}: nothing to evaluate")));
    }
    Ok(())
}

/// Fraction of samples whose truth is among the first `k` ranked ids.
pub fn recall_at_k(rankings: &[Vec<LocationId>], truths: &[LocationId], k: usize) -> Result<f64> {
    non_empty(rankings, "recall")?;
    if k == 0 {
        return Err(GlnError::Parameter("recall cutoff must be at least 1".into()));
    }
    if rankings.len() != truths.len() {
        return Err(GlnError::Dimension {
            op: "recall_at_k",
            left: (rankings.len(), 1),
            right: (truths.len(), 1),
        });
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|id| id == *t))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Distance from each top-1 prediction to its truth.
pub fn error_distances(
    plan: &FloorPlan,
    predictions: &[LocationId],
    truths: &[LocationId],
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    if predictions.len() != truths.len() {
        return Err(GlnError::Dimension {
            op: "error_distances",
            left: (predictions.len(), 1),
            right: (truths.len(), 1),
        });
    }
    predictions
        .iter()
        .zip(truths)
        .map(|(&p, &t)| plan.distance(p, t, metric))
        .collect()
}

/// Fraction of errors at or below `threshold` meters.
pub fn fraction_within(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

/// Fraction of top-1 predictions within `k_meters` Euclidean meters of the truth.
pub fn cdf_at_k(plan: &FloorPlan, predictions: &[LocationId], truths: &[LocationId], k_meters: f64) -> Result<f64> {
    non_empty(predictions, "cdf")?;
    if !(k_meters >= 0.0) {
        return Err(GlnError::Parameter(format!("cdf distance must be non-negative, got {k_meters}")));
    }
    let errors = error_distances(plan, predictions, truths, DistanceMetric::Euclidean)?;
    Ok(fraction_within(&errors, k_meters))
}

/// Median with linear interpolation at fractional index `0.5 (n - 1)`.
pub fn median_error_distance(errors: &[f64]) -> Result<f64> {
    non_empty(errors, "median")?;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = 0.5 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// CDF sampled at `0, step, 2 step, ...` up to and including `max_distance`.
pub fn emit_cdf_curve(errors: &[f64], max_distance: f64, step: f64) -> Result<Vec<(f64, f64)>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(GlnError::Parameter(format!("curve step must be positive, got {step}")));
    }
    if !(max_distance >= 0.0) || !max_distance.is_finite() {
        return Err(GlnError::Parameter(format!("curve range must be non-negative, got {max_distance}")));
    }
    let count = (max_distance / step + 1e-9).floor() as usize;
    Ok((0..=count)
        .map(|i| {
            let d = i as f64 * step;
            (d, fraction_within(errors, d))
        })
        .collect())
}

pub fn curve_to_text(curve: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (d, f) in curve {
        let _ = writeln!(s, "{d} {f}");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    /// Rank cutoff → fraction.
    pub recall: BTreeMap<usize, f64>,
    /// Distance cutoff in meters → fraction.
    pub cdf: BTreeMap<usize, f64>,
    pub med: f64,
    pub meter_level: f64,
}

impl EvalReport {
    /// Scores rankings (best first) against truths on `plan`.
    pub fn from_rankings(
        plan: &FloorPlan,
        rankings: &[Vec<LocationId>],
        truths: &[LocationId],
        metric: DistanceMetric,
    ) -> Result<Self> {
        non_empty(rankings, "report")?;
        let top1 = rankings
            .iter()
            .map(|r| {
                r.first()
                    .copied()
                    .ok_or_else(|| GlnError::Data("empty ranking".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let errors = error_distances(plan, &top1, truths, metric)?;
        let mut recall = BTreeMap::new();
        let mut cdf = BTreeMap::new();
        for k in REPORT_CUTOFFS {
            recall.insert(k, recall_at_k(rankings, truths, k)?);
            cdf.insert(k, fraction_within(&errors, k as f64));
        }
        Ok(EvalReport {
            n: rankings.len(),
            recall,
            cdf,
            med: median_error_distance(&errors)?,
            meter_level: fraction_within(&errors, 1.0),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("n {}\n", self.n);
        for (k, v) in &self.recall {
            let _ = writeln!(s, "recall@{k} {v}");
        }
        for (k, v) in &self.cdf {
            let _ = writeln!(s, "cdf@{k} {v}");
        }
        let _ = writeln!(s, "med {}", self.med);
        let _ = writeln!(s, "meter_level {}", self.meter_level);
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| GlnError::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut report = EvalReport {
            n: 0,
            recall: BTreeMap::new(),
            cdf: BTreeMap::new(),
            med: f64::NAN,
            meter_level: f64::NAN,
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let ln = i + 1;
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| perr(ln, "expected `<key> <value>`".into()))?;
            let num = || value.trim().parse::<f64>().map_err(|_| perr(ln, format!("bad value `{value}`")));
            let cutoff = |rest: &str| rest.parse::<usize>().map_err(|_| perr(ln, format!("bad cutoff in `{key}`")));
            if key == "n" {
                report.n = value.trim().parse().map_err(|_| perr(ln, format!("bad count `{value}`")))?;
            } else if key == "med" {
                report.med = num()?;
            } else if key == "meter_level" {
                report.meter_level = num()?;
            } else if let Some(rest) = key.strip_prefix("recall@") {
                report.recall.insert(cutoff(rest)?, num()?);
            } else if let Some(rest) = key.strip_prefix("cdf@") {
                report.cdf.insert(cutoff(rest)?, num()?);
            } else {
                return Err(perr(ln, format!("unknown key `{key}`")));
            }
        }
        Ok(report)
    }

    /// Single-line summary in the order Recall@k, CDF@k, MED.
    pub fn summary(&self) -> String {
        let mut parts: Vec<String> = self
            .recall
            .iter()
            .map(|(k, v)| format!("Recall@{k}={:.2}%", 100.0 * v))
            .collect();
        parts.extend(self.cdf.iter().map(|(k, v)| format!("CDF@{k}={:.2}%", 100.0 * v)));
        parts.push(format!("MED={:.2}", self.med));
        parts.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| GlnError::io(path, e))
    }
}

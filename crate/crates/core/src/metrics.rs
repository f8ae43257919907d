//! Detection metrics and cross-level trend statistics.
//!
//! Scores follow the scorer convention: higher means more in-distribution.
//! Ties: half credit in AUROC, counted as positive in FPR@TPR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

fn check_sets(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::validation(format!(
            "metrics need non-empty ID and OOD score sets (got {} ID, {} OOD)",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::numerical("non-finite score passed to a metric"));
    }
    Ok(())
}

/// Fraction of OOD scores `≥ t`, where `t` is the largest value keeping at least
/// `tpr_target` of the ID scores `≥ t`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check_sets(id, ood)?;
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::validation(format!("tpr target {tpr_target} outside [0, 1]")));
    }
    let mut desc = id.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let m = desc.len();
    let needed = (1..=m).find(|&c| c as f64 / m as f64 >= tpr_target).unwrap_or(m);
    let t = desc[needed - 1];
    let hits = ood.iter().filter(|&&s| s >= t).count();
    Ok(hits as f64 / ood.len() as f64)
}

/// `P(id > ood) + ½ P(id = ood)` from mid-ranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let n_id = all[i..j].iter().filter(|e| e.1).count();
        rank_sum += mid * n_id as f64;
        i = j;
    }
    let (m, n) = (id.len() as f64, ood.len() as f64);
    let u = rank_sum - m * (m + 1.0) / 2.0;
    let total = m * n;
    // evaluated from the nearer end; swapping the sets gives exactly 1 − value
    Ok(if 2.0 * u <= total {
        u / total
    } else {
        1.0 - (total - u) / total
    })
}

/// Average precision with ID as the positive class: thresholds at each distinct score
/// (descending), precision weighted by the recall gained at that threshold.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = id.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionMetric {
    #[serde(rename = "fpr95")]
    Fpr95,
    Auroc,
    Aupr,
}

impl DetectionMetric {
    pub const ALL: [DetectionMetric; 3] = [DetectionMetric::Fpr95, DetectionMetric::Auroc, DetectionMetric::Aupr];

    pub fn name(self) -> &'static str {
        match self {
            DetectionMetric::Fpr95 => "fpr95",
            DetectionMetric::Auroc => "auroc",
            DetectionMetric::Aupr => "aupr",
        }
    }

    /// The metric as a fraction in `[0, 1]`.
    pub fn compute(self, id: &[f64], ood: &[f64]) -> Result<f64> {
        match self {
            DetectionMetric::Fpr95 => fpr_at_tpr(id, ood, DEFAULT_TPR),
            DetectionMetric::Auroc => auroc(id, ood),
            DetectionMetric::Aupr => aupr(id, ood),
        }
    }
}

impl std::str::FromStr for DetectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fpr95" | "fpr@95" | "fpr" => Ok(DetectionMetric::Fpr95),
            "auroc" => Ok(DetectionMetric::Auroc),
            "aupr" => Ok(DetectionMetric::Aupr),
            other => Err(Error::validation(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Semantic,
    Covariate,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Semantic => "semantic",
            Axis::Covariate => "covariate",
        }
    }
}

/// Metric values at shift levels. `levels` are the 1-based level indices the values
/// belong to; levels dropped as N/A are simply absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSeries {
    pub levels: Vec<usize>,
    pub x: Vec<f64>,
    pub axis: Axis,
}

impl LevelSeries {
    /// Values at consecutive levels `1..=x.len()`.
    pub fn new(x: Vec<f64>, axis: Axis) -> Result<Self> {
        let levels = (1..=x.len()).collect();
        Self::with_levels(levels, x, axis)
    }

    pub fn with_levels(levels: Vec<usize>, x: Vec<f64>, axis: Axis) -> Result<Self> {
        if levels.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: levels.len(),
                actual: x.len(),
            });
        }
        if x.len() < 2 {
            return Err(Error::validation(format!("a level series needs n ≥ 2 values, got {}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("level series values must be finite"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("level indices must increase strictly"));
        }
        Ok(Self { levels, x, axis })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// `(Σ (x−x̄)(i−ī), Σ (x−x̄)², Σ (i−ī)²)`
    fn moments(&self) -> (f64, f64, f64) {
        let n = self.n() as f64;
        let x_bar = self.x.iter().sum::<f64>() / n;
        let i_bar = self.levels.iter().sum::<usize>() as f64 / n;
        let mut sxi = 0.0;
        let mut sxx = 0.0;
        let mut sii = 0.0;
        for (&x, &i) in self.x.iter().zip(&self.levels) {
            let dx = x - x_bar;
            let di = i as f64 - i_bar;
            sxi += dx * di;
            sxx += dx * dx;
            sii += di * di;
        }
        (sxi, sxx, sii)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// Set when the series is constant and the coefficient is undefined (value is 0).
    pub degenerate: bool,
}

/// Pearson correlation between the values and their level indices.
pub fn level_correlation(series: &LevelSeries) -> Correlation {
    let (sxi, sxx, sii) = series.moments();
    if sxx == 0.0 {
        return Correlation {
            value: 0.0,
            degenerate: true,
        };
    }
    Correlation {
        value: (sxi / (sxx * sii).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Absolute least-squares slope of the values against their level indices.
pub fn level_sensitivity(series: &LevelSeries) -> f64 {
    let (sxi, _, sii) = series.moments();
    (sxi / sii).abs()
}

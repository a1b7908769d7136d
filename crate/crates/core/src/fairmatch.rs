//! FairMatch: per-group decision thresholds for the unmatched part of a
//! test set.
//!
//! The privileged scores are shifted down by `theta_priv` and the
//! unprivileged scores up by `theta_unpriv`, both drawn from a grid on
//! `[0, 1]`. The chosen pair maximizes the Welch p-value between the two
//! shifted samples; among (near-)equal p-values the smallest total shift
//! wins, then the smaller privileged shift. Matched rows keep the default
//! decision rule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::learners::ProbabilisticClassifier;
use crate::psm::{self, MatchConfig, MatchResult, PropensityScores};
use crate::stats::{self, WelchResult};

pub const DECISION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_GRID_STEP: f64 = 0.01;
/// p-values within this absolute distance of the best count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScoreSummary {
    pub mean: f64,
    /// Sample variance.
    pub variance: f64,
    pub count: usize,
}

impl GroupScoreSummary {
    pub fn of(scores: &[f64]) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::DegenerateGroup(format!(
                "score summary needs two scores, got {}",
                scores.len()
            )));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let ss: f64 = scores.iter().map(|s| (s - mean) * (s - mean)).sum();
        Ok(Self {
            mean,
            variance: ss / (n - 1.0),
            count: scores.len(),
        })
    }

    /// Summary of `clamp(score + shift, 0, 1)`.
    pub fn of_shifted(scores: &[f64], shift: f64) -> Result<Self> {
        let shifted: Vec<f64> = scores.iter().map(|s| (s + shift).clamp(0.0, 1.0)).collect();
        Self::of(&shifted)
    }

    pub fn welch(&self, other: &GroupScoreSummary) -> WelchResult {
        stats::welch_from_moments(self.mean, self.variance, self.count, other.mean, other.variance, other.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    /// Downward shift of privileged scores (threshold raised by this much).
    pub theta_priv: f64,
    /// Upward shift of unprivileged scores (threshold lowered by this much).
    pub theta_unpriv: f64,
    pub p_value: f64,
    pub objective_dist: f64,
    /// False when the search could not run and identity thresholds apply.
    pub searched: bool,
}

impl ThresholdPair {
    pub fn identity() -> Self {
        Self {
            theta_priv: 0.0,
            theta_unpriv: 0.0,
            p_value: 1.0,
            objective_dist: 0.0,
            searched: false,
        }
    }
}

/// Number of intervals in the grid `{0, step, …, 1}`; `1 / step` must be
/// a whole number.
pub fn grid_intervals(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    Ok(n as usize)
}

/// Exhaustive search over the shift grid.
pub fn threshold_search(ps_priv: &[f64], ps_unpriv: &[f64], grid_step: f64) -> Result<ThresholdPair> {
    let n = grid_intervals(grid_step)?;
    if ps_priv.len() < 2 || ps_unpriv.len() < 2 {
        return Err(Error::DegenerateGroup(format!(
            "threshold search needs two scores per group, got {} and {}",
            ps_priv.len(),
            ps_unpriv.len()
        )));
    }
    let theta = |i: usize| i as f64 / n as f64;
    let priv_summaries = (0..=n)
        .map(|i| GroupScoreSummary::of_shifted(ps_priv, -theta(i)))
        .collect::<Result<Vec<_>>>()?;
    let unpriv_summaries = (0..=n)
        .map(|j| GroupScoreSummary::of_shifted(ps_unpriv, theta(j)))
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<Vec<f64>> = priv_summaries
        .par_iter()
        .map(|sp| unpriv_summaries.iter().map(|su| sp.welch(su).p).collect())
        .collect();
    let p_max = p.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(usize, usize)> = None;
    for i in 0..=n {
        for j in 0..=n {
            if p[i][j] < p_max - TIE_TOLERANCE {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, bj)) => (i + j, i) < (bi + bj, bi),
            };
            if better {
                best = Some((i, j));
            }
        }
    }
    let (i, j) = best.expect("grid is non-empty");
    Ok(ThresholdPair {
        theta_priv: theta(i),
        theta_unpriv: theta(j),
        p_value: p[i][j],
        objective_dist: theta(i) + theta(j),
        searched: true,
    })
}

/// `score > 0.5` for every row.
pub fn default_predict(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|&s| (s > DECISION_THRESHOLD) as u8).collect()
}

/// Default rule on matched rows; unmatched privileged rows need
/// `score > 0.5 + theta_priv` and unmatched unprivileged rows
/// `score > 0.5 − theta_unpriv`.
pub fn calibrated_predict(
    scores: &PropensityScores,
    pa: &[u8],
    matching: &MatchResult,
    thresholds: &ThresholdPair,
) -> Result<Vec<u8>> {
    ensure_len(scores.len(), pa.len())?;
    let matched = matching.matched_set();
    let known = matched.len() + matching.unmatched_ids.len();
    if known != scores.len() {
        return Err(Error::Input(format!(
            "matching covers {known} rows but {} scores were given",
            scores.len()
        )));
    }
    scores
        .row_ids
        .iter()
        .zip(&scores.scores)
        .zip(pa)
        .map(|((id, &s), &group)| {
            let threshold = if matched.contains(id) {
                DECISION_THRESHOLD
            } else if matching.unmatched_ids.binary_search(id).is_err() {
                return Err(Error::Input(format!("row id {id} is not in the matching")));
            } else if group == 1 {
                DECISION_THRESHOLD + thresholds.theta_priv
            } else {
                DECISION_THRESHOLD - thresholds.theta_unpriv
            };
            Ok((s > threshold) as u8)
        })
        .collect()
}

/// Everything needed to reproduce calibrated predictions from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationCertificate {
    pub model: String,
    pub propensity_source: String,
    pub match_config: MatchConfig,
    pub grid_step: f64,
    pub decision_threshold: f64,
    pub thresholds: ThresholdPair,
    pub matching: MatchResult,
}

impl MitigationCertificate {
    pub fn predict(&self, model: &dyn ProbabilisticClassifier, test: &Dataset) -> Result<Vec<u8>> {
        let scores = psm::propensity_scores(model, test)?;
        calibrated_predict(&scores, &test.pa, &self.matching, &self.thresholds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores the test set with `model`, matches on `propensity` (the model's
/// own scores when `None`) and searches thresholds on the unmatched rows.
/// Too few unmatched rows in a group falls back to identity thresholds.
pub fn fit_fairmatch(
    model: &dyn ProbabilisticClassifier,
    test: &Dataset,
    propensity: Option<&PropensityScores>,
    match_cfg: &MatchConfig,
    grid_step: f64,
) -> Result<MitigationCertificate> {
    grid_intervals(grid_step)?;
    let scores = psm::propensity_scores(model, test)?;
    let propensity = propensity.unwrap_or(&scores);
    ensure_len(test.len(), propensity.len())?;
    let matching = psm::match_test_set(propensity, &test.pa, Some(&test.features), match_cfg)?;
    let (mut ps_priv, mut ps_unpriv) = (Vec::new(), Vec::new());
    for i in 0..test.len() {
        if !matching.is_matched(test.row_ids[i]) {
            if test.pa[i] == 1 {
                ps_priv.push(scores.scores[i]);
            } else {
                ps_unpriv.push(scores.scores[i]);
            }
        }
    }
    let thresholds = match threshold_search(&ps_priv, &ps_unpriv, grid_step) {
        Ok(t) => t,
        Err(Error::DegenerateGroup(msg)) => {
            log::warn!("{msg}; using identity thresholds");
            ThresholdPair::identity()
        }
        Err(e) => return Err(e),
    };
    Ok(MitigationCertificate {
        model: model.describe(),
        propensity_source: propensity.source.clone(),
        match_config: *match_cfg,
        grid_step,
        decision_threshold: DECISION_THRESHOLD,
        thresholds,
        matching,
    })
}

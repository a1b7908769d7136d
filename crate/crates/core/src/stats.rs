//! Welch's t-test, Cliff's delta and Scott-Knott ranking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cliff's delta below this magnitude is a negligible effect.
pub const NEGLIGIBLE_DELTA: f64 = 0.147;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Welch's unequal-variance t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateGroup(format!(
            "welch test needs two observations per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Input("welch test samples must be finite".into()));
    }
    let (ma, va) = mean_and_variance(a);
    let (mb, vb) = mean_and_variance(b);
    Ok(welch_from_moments(ma, va, a.len(), mb, vb, b.len()))
}

/// Welch's test from sample means, sample variances (n − 1 denominator)
/// and sizes. Both variances zero gives p = 1 for equal means and p = 0
/// otherwise.
pub fn welch_from_moments(mean_a: f64, var_a: f64, n_a: usize, mean_b: f64, var_b: f64, n_b: usize) -> WelchResult {
    let (na, nb) = (n_a as f64, n_b as f64);
    let (qa, qb) = (var_a.max(0.0) / na, var_b.max(0.0) / nb);
    let se2 = qa + qb;
    let diff = mean_a - mean_b;
    if se2 <= 0.0 {
        let df = na + nb - 2.0;
        return if diff == 0.0 {
            WelchResult { t: 0.0, df, p: 1.0 }
        } else {
            WelchResult {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    WelchResult {
        t,
        df,
        p: student_t_two_sided(t, df),
    }
}

/// `P(|T| > |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Natural log of the gamma function (Lanczos, g = 7) for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)`, by continued fraction on whichever side converges fast.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    Negligible,
    NonNegligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub delta: f64,
    pub magnitude: Magnitude,
}

impl EffectSize {
    pub fn from_delta(delta: f64) -> Self {
        let magnitude = if delta.abs() >= NEGLIGIBLE_DELTA {
            Magnitude::NonNegligible
        } else {
            Magnitude::Negligible
        };
        Self { delta, magnitude }
    }

    pub fn is_negligible(&self) -> bool {
        self.magnitude == Magnitude::Negligible
    }
}

/// `(#{a > b} − #{a < b}) / (|a|·|b|)` over all pairs, counted by binary
/// search in the sorted `b`.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<EffectSize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("cliff's delta needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::Input("cliff's delta samples contain NaN".into()));
    }
    let mut sorted = b.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut score: i64 = 0;
    for &x in a {
        let below = sorted.partition_point(|&y| y < x);
        let not_above = sorted.partition_point(|&y| y <= x);
        score += below as i64 - (sorted.len() - not_above) as i64;
    }
    Ok(EffectSize::from_delta(score as f64 / (a.len() * b.len()) as f64))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    /// Number of treatments on the left side.
    pub split_index: usize,
    pub e_delta: f64,
}

/// Expected squared deviation of side means from the overall mean,
/// weighted by observation counts, for every split of `groups`.
pub fn split_evaluations(groups: &[&[f64]]) -> Vec<SplitEvaluation> {
    let total_n: usize = groups.iter().map(|g| g.len()).sum();
    let total_sum: f64 = groups.iter().flat_map(|g| g.iter()).sum();
    let overall = total_sum / total_n as f64;
    let mut left_n = 0usize;
    let mut left_sum = 0.0;
    let mut out = Vec::with_capacity(groups.len().saturating_sub(1));
    for (i, g) in groups.iter().enumerate().take(groups.len().saturating_sub(1)) {
        left_n += g.len();
        left_sum += g.iter().sum::<f64>();
        let right_n = total_n - left_n;
        let right_sum = total_sum - left_sum;
        let left_mean = left_sum / left_n as f64;
        let right_mean = right_sum / right_n as f64;
        let e_delta = left_n as f64 / total_n as f64 * (left_mean - overall).abs().powi(2)
            + right_n as f64 / total_n as f64 * (right_mean - overall).abs().powi(2);
        out.push(SplitEvaluation {
            split_index: i + 1,
            e_delta,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub treatment: String,
    pub median: f64,
    pub rank: usize,
}

/// Treatments in best-first order with their Scott-Knott ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub entries: Vec<RankEntry>,
    pub smaller_is_better: bool,
}

impl RankTable {
    pub fn rank_of(&self, treatment: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.treatment == treatment).map(|e| e.rank)
    }

    pub fn n_ranks(&self) -> usize {
        self.entries.iter().map(|e| e.rank).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("treatment,median,rank\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.treatment, crate::metrics::format_value(e.median), e.rank);
        }
        out
    }
}

/// Ranks treatments; rank 1 is best. Treatments are ordered by median
/// (ties by name), the split maximizing the expected squared deviation is
/// taken when its two sides differ by a non-negligible Cliff's delta, and
/// each side is split again.
pub fn scott_knott(groups: &[(String, Vec<f64>)], smaller_is_better: bool) -> Result<RankTable> {
    if groups.is_empty() {
        return Err(Error::Input("scott-knott needs at least one treatment".into()));
    }
    if let Some((name, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Input(format!("treatment `{name}` has no observations")));
    }
    if groups.iter().flat_map(|(_, v)| v).any(|x| !x.is_finite()) {
        return Err(Error::Input("scott-knott observations must be finite".into()));
    }
    let mut order: Vec<(usize, f64)> = groups.iter().enumerate().map(|(i, (_, v))| (i, median(v))).collect();
    order.sort_by(|a, b| {
        let by_median = if smaller_is_better {
            a.1.total_cmp(&b.1)
        } else {
            b.1.total_cmp(&a.1)
        };
        by_median.then_with(|| groups[a.0].0.cmp(&groups[b.0].0))
    });
    let sorted: Vec<&[f64]> = order.iter().map(|&(i, _)| groups[i].1.as_slice()).collect();
    let mut leaves = Vec::new();
    divide(&sorted, 0, &mut leaves)?;
    let mut ranks = vec![0; sorted.len()];
    for (rank, range) in leaves.iter().enumerate() {
        for r in range.clone() {
            ranks[r] = rank + 1;
        }
    }
    let entries = order
        .iter()
        .zip(ranks)
        .map(|(&(i, med), rank)| RankEntry {
            treatment: groups[i].0.clone(),
            median: med,
            rank,
        })
        .collect();
    Ok(RankTable {
        entries,
        smaller_is_better,
    })
}

/// The accepted split of `groups`, if any.
pub fn best_split(groups: &[&[f64]]) -> Result<Option<usize>> {
    if groups.len() < 2 {
        return Ok(None);
    }
    let mut best = SplitEvaluation {
        split_index: 0,
        e_delta: f64::NEG_INFINITY,
    };
    for candidate in split_evaluations(groups) {
        if candidate.e_delta > best.e_delta {
            best = candidate;
        }
    }
    let left: Vec<f64> = groups[..best.split_index].iter().flat_map(|g| g.iter().copied()).collect();
    let right: Vec<f64> = groups[best.split_index..].iter().flat_map(|g| g.iter().copied()).collect();
    let effect = cliffs_delta(&left, &right)?;
    Ok((!effect.is_negligible()).then_some(best.split_index))
}

fn divide(groups: &[&[f64]], offset: usize, leaves: &mut Vec<std::ops::Range<usize>>) -> Result<()> {
    match best_split(groups)? {
        Some(cut) => {
            divide(&groups[..cut], offset, leaves)?;
            divide(&groups[cut..], offset + cut, leaves)
        }
        None => {
            leaves.push(offset..offset + groups.len());
            Ok(())
        }
    }
}

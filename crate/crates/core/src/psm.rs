//! Propensity score matching of a test set into matched pairs and an
//! unmatched remainder.
//!
//! Privileged rows are visited in ascending row id. For each one, the `k`
//! nearest rows that are not yet matched (either group, excluding the row
//! itself) form the neighbor pool; the nearest pool member from the other
//! group that lies within the caliper becomes its partner. Both rows then
//! leave the pool. Ties in distance go to the smaller row id.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::learners::ProbabilisticClassifier;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityScores {
    pub row_ids: Vec<u64>,
    pub scores: Vec<f64>,
    /// Which model produced the scores.
    pub source: String,
}

impl PropensityScores {
    pub fn new(row_ids: Vec<u64>, scores: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        ensure_len(row_ids.len(), scores.len())?;
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Input(format!("propensity score {bad} is not finite")));
        }
        Ok(Self {
            row_ids,
            scores,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn propensity_scores(model: &dyn ProbabilisticClassifier, test: &Dataset) -> Result<PropensityScores> {
    let scores = model.predict_proba(&test.features)?;
    PropensityScores::new(test.row_ids.clone(), scores, model.describe())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Absolute difference of propensity scores.
    #[default]
    Propensity,
    /// Euclidean distance between feature rows.
    Euclidean,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propensity" => Ok(DistanceMode::Propensity),
            "euclidean" | "euclidean-features" => Ok(DistanceMode::Euclidean),
            other => Err(Error::Config(format!("unknown distance mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Size of the neighbor pool.
    pub k: usize,
    /// Largest distance allowed within a pair.
    pub caliper: f64,
    pub distance_mode: DistanceMode,
    /// When set, a pair must fall on the same side of this score threshold
    /// (`score > t`), so both members get the same hard prediction.
    pub decision_boundary: Option<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            k: 5,
            caliper: 0.05,
            distance_mode: DistanceMode::Propensity,
            decision_boundary: Some(0.5),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(self.caliper >= 0.0) {
            return Err(Error::Config(format!("caliper must be >= 0, got {}", self.caliper)));
        }
        Ok(())
    }
}

/// Matched pairs as `(privileged id, unprivileged id)` plus the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "MatchResultRepr", into = "MatchResultRepr")]
pub struct MatchResult {
    pub pairs: Vec<(u64, u64)>,
    /// Sorted union of pair members.
    pub matched_ids: Vec<u64>,
    /// Sorted remaining row ids.
    pub unmatched_ids: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct MatchResultRepr {
    pairs: Vec<[u64; 2]>,
    unmatched: Vec<u64>,
}

impl From<MatchResultRepr> for MatchResult {
    fn from(repr: MatchResultRepr) -> Self {
        let pairs: Vec<(u64, u64)> = repr.pairs.iter().map(|p| (p[0], p[1])).collect();
        MatchResult::from_parts(pairs, repr.unmatched)
    }
}

impl From<MatchResult> for MatchResultRepr {
    fn from(result: MatchResult) -> Self {
        MatchResultRepr {
            pairs: result.pairs.iter().map(|&(a, b)| [a, b]).collect(),
            unmatched: result.unmatched_ids,
        }
    }
}

impl MatchResult {
    fn from_parts(pairs: Vec<(u64, u64)>, mut unmatched_ids: Vec<u64>) -> Self {
        let mut matched_ids: Vec<u64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        matched_ids.sort_unstable();
        unmatched_ids.sort_unstable();
        Self {
            pairs,
            matched_ids,
            unmatched_ids,
        }
    }

    /// Every row unmatched.
    pub fn empty(row_ids: &[u64]) -> Self {
        Self::from_parts(Vec::new(), row_ids.to_vec())
    }

    pub fn is_matched(&self, id: u64) -> bool {
        self.matched_ids.binary_search(&id).is_ok()
    }

    pub fn matched_set(&self) -> HashSet<u64> {
        self.matched_ids.iter().copied().collect()
    }
}

/// Matches using propensity distances only.
pub fn match_rows(scores: &PropensityScores, pa: &[u8], cfg: &MatchConfig) -> Result<MatchResult> {
    match_test_set(scores, pa, None, cfg)
}

/// Matches with the configured distance; `features` is required (and
/// row-aligned with `scores`) for [`DistanceMode::Euclidean`].
pub fn match_test_set(
    scores: &PropensityScores,
    pa: &[u8],
    features: Option<&Matrix>,
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    cfg.validate()?;
    ensure_len(scores.len(), pa.len())?;
    let pairs = match cfg.distance_mode {
        DistanceMode::Propensity => PropensityIndex::new(scores).pairs(pa, cfg),
        DistanceMode::Euclidean => {
            let features = features.ok_or_else(|| {
                Error::Config("euclidean matching needs the feature matrix".into())
            })?;
            ensure_len(scores.len(), features.rows())?;
            euclidean_pairs(scores, pa, features, cfg)
        }
    };
    let paired: HashSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let unmatched = (0..scores.len())
        .filter(|i| !paired.contains(i))
        .map(|i| scores.row_ids[i])
        .collect();
    let pairs = pairs
        .into_iter()
        .map(|(a, b)| (scores.row_ids[a], scores.row_ids[b]))
        .collect();
    Ok(MatchResult::from_parts(pairs, unmatched))
}

fn same_side(boundary: Option<f64>, a: f64, b: f64) -> bool {
    boundary.map_or(true, |t| (a > t) == (b > t))
}

/// Privileged positions in ascending row id.
fn treatment_order(scores: &PropensityScores, pa: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pa.len()).filter(|&i| pa[i] == 1).collect();
    order.sort_by_key(|&i| scores.row_ids[i]);
    order
}

/// Picks the partner from a pool sorted by `(distance, row id)`.
fn choose(pool: &[(f64, u64, usize)], row: usize, pa: &[u8], scores: &[f64], cfg: &MatchConfig) -> Option<usize> {
    pool.iter()
        .find(|&&(d, _, c)| {
            pa[c] != pa[row] && d <= cfg.caliper && same_side(cfg.decision_boundary, scores[row], scores[c])
        })
        .map(|&(_, _, c)| c)
}

fn by_distance_then_id(a: &(f64, u64, usize), b: &(f64, u64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Rows sorted by score with a doubly linked list over the rows that are
/// still available, so the neighbor scan skips matched rows in O(1).
struct PropensityIndex<'a> {
    scores: &'a PropensityScores,
    sorted: Vec<usize>,
    rank: Vec<usize>,
    prev: Vec<Option<usize>>,
    next: Vec<Option<usize>>,
}

impl<'a> PropensityIndex<'a> {
    fn new(scores: &'a PropensityScores) -> Self {
        let n = scores.len();
        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by(|&a, &b| {
            scores.scores[a]
                .total_cmp(&scores.scores[b])
                .then(scores.row_ids[a].cmp(&scores.row_ids[b]))
        });
        let mut rank = vec![0; n];
        for (r, &i) in sorted.iter().enumerate() {
            rank[i] = r;
        }
        let prev = (0..n).map(|r| r.checked_sub(1)).collect();
        let next = (0..n).map(|r| (r + 1 < n).then_some(r + 1)).collect();
        Self {
            scores,
            sorted,
            rank,
            prev,
            next,
        }
    }

    fn remove(&mut self, position: usize) {
        let r = self.rank[position];
        let (p, n) = (self.prev[r], self.next[r]);
        if let Some(p) = p {
            self.next[p] = n;
        }
        if let Some(n) = n {
            self.prev[n] = p;
        }
    }

    fn entry(&self, r: usize, origin: f64) -> (f64, u64, usize) {
        let i = self.sorted[r];
        ((self.scores.scores[i] - origin).abs(), self.scores.row_ids[i], i)
    }

    fn k_nearest(&self, row: usize, k: usize) -> Vec<(f64, u64, usize)> {
        let origin = self.scores.scores[row];
        let r = self.rank[row];
        let (mut left, mut right) = (self.prev[r], self.next[r]);
        let mut pool = Vec::with_capacity(k + 2);
        while pool.len() < k {
            let l = left.map(|x| self.entry(x, origin));
            let rr = right.map(|x| self.entry(x, origin));
            match (l, rr) {
                (None, None) => break,
                (Some(a), Some(b)) if by_distance_then_id(&a, &b).is_le() => {
                    pool.push(a);
                    left = self.prev[left.unwrap()];
                }
                (Some(a), None) => {
                    pool.push(a);
                    left = self.prev[left.unwrap()];
                }
                (_, Some(b)) => {
                    pool.push(b);
                    right = self.next[right.unwrap()];
                }
            }
        }
        // rows tied with the k-th distance compete on row id
        if let Some(&(kth, _, _)) = pool.last() {
            while let Some(x) = left {
                let e = self.entry(x, origin);
                if e.0 > kth {
                    break;
                }
                pool.push(e);
                left = self.prev[x];
            }
            while let Some(x) = right {
                let e = self.entry(x, origin);
                if e.0 > kth {
                    break;
                }
                pool.push(e);
                right = self.next[x];
            }
        }
        pool.sort_by(by_distance_then_id);
        pool.truncate(k);
        pool
    }

    fn pairs(mut self, pa: &[u8], cfg: &MatchConfig) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for row in treatment_order(self.scores, pa) {
            let pool = self.k_nearest(row, cfg.k);
            if let Some(partner) = choose(&pool, row, pa, &self.scores.scores, cfg) {
                self.remove(row);
                self.remove(partner);
                pairs.push((row, partner));
            }
        }
        pairs
    }
}

fn euclidean_pairs(scores: &PropensityScores, pa: &[u8], features: &Matrix, cfg: &MatchConfig) -> Vec<(usize, usize)> {
    let mut available = vec![true; pa.len()];
    let mut pairs = Vec::new();
    for row in treatment_order(scores, pa) {
        let origin = features.row(row);
        let mut pool: Vec<(f64, u64, usize)> = (0..pa.len())
            .filter(|&c| c != row && available[c])
            .map(|c| {
                let d = origin
                    .iter()
                    .zip(features.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (d, scores.row_ids[c], c)
            })
            .collect();
        pool.sort_by(by_distance_then_id);
        pool.truncate(cfg.k);
        if let Some(partner) = choose(&pool, row, pa, &scores.scores, cfg) {
            available[row] = false;
            available[partner] = false;
            pairs.push((row, partner));
        }
    }
    pairs
}

/// `|matched_ids| / test_size`.
pub fn matched_ratio(result: &MatchResult, test_size: usize) -> Result<f64> {
    if test_size == 0 {
        return Err(Error::Input("test size must be positive".into()));
    }
    Ok(result.matched_ids.len() as f64 / test_size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(values: &[f64]) -> PropensityScores {
        PropensityScores::new((0..values.len() as u64).collect(), values.to_vec(), "test").unwrap()
    }

    #[test]
    fn equal_scores_opposite_groups_pair_up() {
        let result = match_rows(&scores(&[0.4, 0.4]), &[1, 0], &MatchConfig::default()).unwrap();
        assert_eq!(result.pairs, [(0, 1)]);
        assert!(result.unmatched_ids.is_empty());
    }

    #[test]
    fn one_group_only_gives_no_pairs() {
        let result = match_rows(&scores(&[0.1, 0.2, 0.3]), &[1, 1, 1], &MatchConfig::default()).unwrap();
        assert!(result.pairs.is_empty());
        assert_eq!(result.unmatched_ids, [0, 1, 2]);
        let result = match_rows(&scores(&[]), &[], &MatchConfig::default()).unwrap();
        assert!(result.pairs.is_empty() && result.unmatched_ids.is_empty());
    }

    #[test]
    fn four_row_example() {
        // P:0.30, P:0.90, U:0.31, U:0.60
        let result = match_rows(&scores(&[0.30, 0.90, 0.31, 0.60]), &[1, 1, 0, 0], &MatchConfig::default()).unwrap();
        assert_eq!(result.pairs, [(0, 2)]);
        assert_eq!(result.unmatched_ids, [1, 3]);
    }

    #[test]
    fn neighbor_pool_includes_same_group_rows() {
        // with k = 1 each privileged row's only neighbor is the other one
        let s = scores(&[0.30, 0.301, 0.31]);
        let cfg = MatchConfig { k: 1, ..Default::default() };
        assert!(match_rows(&s, &[1, 1, 0], &cfg).unwrap().pairs.is_empty());
        let cfg = MatchConfig { k: 2, ..Default::default() };
        assert_eq!(match_rows(&s, &[1, 1, 0], &cfg).unwrap().pairs, [(0, 2)]);
    }

    #[test]
    fn distance_ties_go_to_the_smaller_row_id() {
        let s = PropensityScores::new(vec![10, 7, 3], vec![0.5, 0.52, 0.48], "t").unwrap();
        let cfg = MatchConfig { k: 1, decision_boundary: None, ..Default::default() };
        let result = match_rows(&s, &[1, 0, 0], &cfg).unwrap();
        assert_eq!(result.pairs, [(10, 3)]);
    }

    #[test]
    fn decision_boundary_blocks_straddling_pairs() {
        let s = scores(&[0.49, 0.51]);
        assert!(match_rows(&s, &[1, 0], &MatchConfig::default()).unwrap().pairs.is_empty());
        let cfg = MatchConfig { decision_boundary: None, ..Default::default() };
        assert_eq!(match_rows(&s, &[1, 0], &cfg).unwrap().pairs.len(), 1);
    }

    #[test]
    fn euclidean_mode_uses_features() {
        let s = scores(&[0.1, 0.1, 0.1]);
        let features = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.02, 0.0]]).unwrap();
        let cfg = MatchConfig { distance_mode: DistanceMode::Euclidean, ..Default::default() };
        let result = match_test_set(&s, &[1, 0, 0], Some(&features), &cfg).unwrap();
        assert_eq!(result.pairs, [(0, 2)]);
        assert!(match_test_set(&s, &[1, 0, 0], None, &cfg).is_err());
    }

    #[test]
    fn ratio() {
        let none = MatchResult::empty(&[1, 2, 3]);
        assert_eq!(matched_ratio(&none, 3).unwrap(), 0.0);
        let all = match_rows(&scores(&[0.2, 0.2]), &[1, 0], &MatchConfig::default()).unwrap();
        assert_eq!(matched_ratio(&all, 2).unwrap(), 1.0);
        assert!(matched_ratio(&all, 0).is_err());
    }

    #[test]
    fn json_layout() {
        let result = match_rows(&scores(&[0.30, 0.90, 0.31, 0.60]), &[1, 1, 0, 0], &MatchConfig::default()).unwrap();
        let json = serde_json::to_string(&result).unwrap();
        assert_eq!(json, r#"{"pairs":[[0,2]],"unmatched":[1,3]}"#);
        assert_eq!(serde_json::from_str::<MatchResult>(&json).unwrap(), result);
    }

    #[test]
    fn zero_model_scores_are_one_half() {
        use crate::learners::{LogisticConfig, LogisticModel};
        use std::sync::Arc;
        let schema = crate::dataio::DatasetSchema::new("t", vec![], "pa", "1".into(), "y", "1".into());
        let features = Matrix::from_rows(&[vec![0.2, 0.4], vec![0.2, 0.4], vec![0.9, 0.0]]).unwrap();
        let ds = Dataset::new(features, vec![1, 0, 1], vec![1, 0, 0], Arc::new(schema)).unwrap();
        let zero = LogisticModel::zeros(2, LogisticConfig::default());
        assert!(propensity_scores(&zero, &ds).unwrap().scores.iter().all(|&s| s == 0.5));
        let model = LogisticModel { weights: vec![1.0, -2.0], bias: 0.5, config: LogisticConfig::default() };
        let ps = propensity_scores(&model, &ds).unwrap();
        assert_eq!(ps.scores[0], ps.scores[1]);
    }

    /// Greedy matching written directly from its definition, quadratic in
    /// the number of rows.
    fn naive_greedy(s: &PropensityScores, pa: &[u8], cfg: &MatchConfig) -> Vec<(u64, u64)> {
        let n = s.len();
        let mut taken = vec![false; n];
        let mut order: Vec<usize> = (0..n).filter(|&i| pa[i] == 1).collect();
        order.sort_by_key(|&i| s.row_ids[i]);
        let mut pairs = Vec::new();
        for r in order {
            if taken[r] {
                continue;
            }
            let mut pool: Vec<usize> = (0..n).filter(|&c| c != r && !taken[c]).collect();
            pool.sort_by(|&a, &b| {
                let (da, db) = ((s.scores[a] - s.scores[r]).abs(), (s.scores[b] - s.scores[r]).abs());
                da.total_cmp(&db).then(s.row_ids[a].cmp(&s.row_ids[b]))
            });
            pool.truncate(cfg.k);
            let pick = pool.into_iter().find(|&c| {
                pa[c] == 0
                    && (s.scores[c] - s.scores[r]).abs() <= cfg.caliper
                    && same_side(cfg.decision_boundary, s.scores[c], s.scores[r])
            });
            if let Some(c) = pick {
                taken[r] = true;
                taken[c] = true;
                pairs.push((s.row_ids[r], s.row_ids[c]));
            }
        }
        pairs
    }

    /// All valid pairings by exhaustive search: most pairs, then smallest
    /// total distance.
    fn optimal_pairing(s: &[f64], pa: &[u8], caliper: f64) -> (usize, f64) {
        fn go(i: usize, used: &mut Vec<bool>, s: &[f64], pa: &[u8], caliper: f64) -> (usize, f64) {
            if i == s.len() {
                return (0, 0.0);
            }
            let mut best = go(i + 1, used, s, pa, caliper);
            if pa[i] == 1 && !used[i] {
                for j in 0..s.len() {
                    let d = (s[i] - s[j]).abs();
                    if pa[j] == 0 && !used[j] && d <= caliper {
                        used[j] = true;
                        let (c, t) = go(i + 1, used, s, pa, caliper);
                        used[j] = false;
                        if c + 1 > best.0 || (c + 1 == best.0 && t + d < best.1) {
                            best = (c + 1, t + d);
                        }
                    }
                }
            }
            best
        }
        go(0, &mut vec![false; s.len()], s, pa, caliper)
    }

    #[test]
    fn four_row_example_is_optimal() {
        let s = [0.30, 0.90, 0.31, 0.60];
        let (count, total) = optimal_pairing(&s, &[1, 1, 0, 0], 0.05);
        assert_eq!(count, 1);
        assert!((total - 0.01).abs() < 1e-12);
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>, usize, f64, bool)> {
        (0usize..24).prop_flat_map(|n| {
            (
                prop::collection::vec((1u32..100).prop_map(|v| v as f64 / 100.0), n),
                prop::collection::vec(0u8..2, n),
                1usize..7,
                0.0f64..0.2,
                any::<bool>(),
            )
        })
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_the_naive_definition((values, pa, k, caliper, boundary) in case()) {
            let s = scores(&values);
            let cfg = MatchConfig { k, caliper, decision_boundary: boundary.then_some(0.5), ..Default::default() };
            let result = match_rows(&s, &pa, &cfg).unwrap();
            prop_assert_eq!(result.pairs, naive_greedy(&s, &pa, &cfg));
        }

        #[test]
        fn result_structure((values, pa, k, caliper, boundary) in case(), extra in 0.0f64..0.2) {
            let s = scores(&values);
            let cfg = MatchConfig { k, caliper, decision_boundary: boundary.then_some(0.5), ..Default::default() };
            let result = match_rows(&s, &pa, &cfg).unwrap();
            let mut members = HashSet::new();
            for &(a, b) in &result.pairs {
                prop_assert!(members.insert(a) && members.insert(b));
                prop_assert_eq!((pa[a as usize], pa[b as usize]), (1, 0));
                prop_assert!((values[a as usize] - values[b as usize]).abs() <= caliper);
            }
            prop_assert_eq!(result.matched_ids.len() + result.unmatched_ids.len(), values.len());
            prop_assert!(result.unmatched_ids.iter().all(|id| !members.contains(id)));
            let privileged = result.matched_ids.iter().filter(|&&id| pa[id as usize] == 1).count();
            prop_assert_eq!(2 * privileged, result.matched_ids.len());
            // greedy never pairs more rows than the optimum
            prop_assume!(values.len() <= 12);
            prop_assert!(result.pairs.len() <= optimal_pairing(&values, &pa, caliper).0);
            let wider = MatchConfig { caliper: caliper + extra, ..cfg };
            prop_assert!(match_rows(&s, &pa, &wider).unwrap().pairs.len() >= result.pairs.len());
        }

        #[test]
        fn pairs_share_the_hard_prediction((values, pa, k, caliper, _b) in case()) {
            let s = scores(&values);
            let cfg = MatchConfig { k, caliper, ..Default::default() };
            for (a, b) in match_rows(&s, &pa, &cfg).unwrap().pairs {
                prop_assert_eq!(values[a as usize] > 0.5, values[b as usize] > 0.5);
            }
            // without the guard, a caliper below every score's distance to 0.5 suffices
            let margin = values.iter().map(|v| (v - 0.5).abs()).fold(f64::INFINITY, f64::min);
            let cfg = MatchConfig { k, caliper: caliper.min(margin * 0.99), decision_boundary: None, ..Default::default() };
            for (a, b) in match_rows(&s, &pa, &cfg).unwrap().pairs {
                prop_assert_eq!(values[a as usize] > 0.5, values[b as usize] > 0.5);
            }
        }
    }
}

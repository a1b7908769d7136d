//! Probabilistic binary classifiers: L2-regularized logistic regression
//! trained by full-batch gradient descent, and a small gradient-boosted
//! tree ensemble on logistic loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Clip applied to probabilities inside the loss only.
const LOSS_CLIP: f64 = 1e-12;

pub trait ProbabilisticClassifier: Send + Sync {
    /// Number of input features the model expects.
    fn width(&self) -> usize;

    /// Probability of the favorable label for every row.
    fn predict_proba(&self, features: &Matrix) -> Result<Vec<f64>>;

    fn describe(&self) -> String;
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_width(expected: usize, features: &Matrix) -> Result<()> {
    if features.cols() != expected {
        return Err(Error::Input(format!(
            "feature width {} does not match model width {expected}",
            features.cols()
        )));
    }
    Ok(())
}

fn check_training_input(features: &Matrix, labels: &[u8]) -> Result<()> {
    crate::error::ensure_len(features.rows(), labels.len())?;
    if !features.all_finite() {
        return Err(Error::Input("training features contain non-finite values".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateTraining(
            "training labels need both classes".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            l2_penalty: 1e-4,
            max_iters: 2000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: LogisticConfig,
}

impl LogisticModel {
    pub fn zeros(width: usize, config: LogisticConfig) -> Self {
        Self {
            weights: vec![0.0; width],
            bias: 0.0,
            config,
        }
    }

    fn score(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>() + self.bias
    }
}

impl ProbabilisticClassifier for LogisticModel {
    fn width(&self) -> usize {
        self.weights.len()
    }

    fn predict_proba(&self, features: &Matrix) -> Result<Vec<f64>> {
        check_width(self.weights.len(), features)?;
        Ok(features.iter_rows().map(|r| sigmoid(self.score(r))).collect())
    }

    fn describe(&self) -> String {
        "logistic".into()
    }
}

/// Mean log-loss plus `l2_penalty / 2 * ||w||^2` (bias unpenalized), and
/// its gradient with respect to `(weights, bias)`.
pub fn logistic_loss_and_gradient(
    weights: &[f64],
    bias: f64,
    features: &Matrix,
    labels: &[u8],
    l2_penalty: f64,
) -> (f64, Vec<f64>, f64) {
    let n = features.rows() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (row, &y) in features.iter_rows().zip(labels) {
        let z = row.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() + bias;
        let p = sigmoid(z);
        let clipped = p.clamp(LOSS_CLIP, 1.0 - LOSS_CLIP);
        loss -= if y == 1 { clipped.ln() } else { (1.0 - clipped).ln() };
        let residual = p - f64::from(y);
        for (g, x) in grad_w.iter_mut().zip(row) {
            *g += residual * x;
        }
        grad_b += residual;
    }
    let penalty: f64 = weights.iter().map(|w| w * w).sum::<f64>() * l2_penalty / 2.0;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2_penalty * w;
    }
    (loss / n + penalty, grad_w, grad_b / n)
}

pub fn fit_logistic(features: &Matrix, labels: &[u8], config: LogisticConfig) -> Result<LogisticModel> {
    fit_logistic_traced(features, labels, config).map(|(model, _)| model)
}

/// Fits and also returns the training loss observed before each update.
pub fn fit_logistic_traced(
    features: &Matrix,
    labels: &[u8],
    config: LogisticConfig,
) -> Result<(LogisticModel, Vec<f64>)> {
    check_training_input(features, labels)?;
    let mut model = LogisticModel::zeros(features.cols(), config);
    let mut trace = Vec::new();
    for _ in 0..config.max_iters {
        let (loss, grad_w, grad_b) =
            logistic_loss_and_gradient(&model.weights, model.bias, features, labels, config.l2_penalty);
        if let Some(&previous) = trace.last() {
            if previous - loss < config.tolerance {
                trace.push(loss);
                break;
            }
        }
        trace.push(loss);
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= config.learning_rate * g;
        }
        model.bias -= config.learning_rate * grad_b;
    }
    Ok((model, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    /// L2 regularization on leaf values.
    pub lambda: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            n_rounds: 50,
            max_depth: 3,
            shrinkage: 0.1,
            lambda: 1.0,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn evaluate(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if row[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub width: usize,
    pub base_score: f64,
    pub shrinkage: f64,
    pub n_rounds: usize,
    pub trees: Vec<TreeNode>,
}

impl GbtModel {
    fn raw_score(&self, row: &[f64]) -> f64 {
        self.base_score + self.shrinkage * self.trees.iter().map(|t| t.evaluate(row)).sum::<f64>()
    }
}

impl ProbabilisticClassifier for GbtModel {
    fn width(&self) -> usize {
        self.width
    }

    fn predict_proba(&self, features: &Matrix) -> Result<Vec<f64>> {
        check_width(self.width, features)?;
        Ok(features.iter_rows().map(|r| sigmoid(self.raw_score(r))).collect())
    }

    fn describe(&self) -> String {
        "gbt".into()
    }
}

struct TreeBuilder<'a> {
    features: &'a Matrix,
    /// Row indices sorted by each feature, computed once per fit.
    sorted: &'a [Vec<u32>],
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbtConfig,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, rows: &[u32]) -> f64 {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        -g / (h + self.config.lambda)
    }

    fn best_split(&self, rows: &[u32], member: &[bool]) -> Option<BestSplit> {
        let lambda = self.config.lambda;
        let (g_total, h_total) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        let parent = g_total * g_total / (h_total + lambda);
        let mut best: Option<BestSplit> = None;
        for (feature, order) in self.sorted.iter().enumerate() {
            let in_node: Vec<u32> = order.iter().copied().filter(|&r| member[r as usize]).collect();
            let (mut g_left, mut h_left) = (0.0, 0.0);
            for k in 0..in_node.len().saturating_sub(1) {
                let r = in_node[k] as usize;
                g_left += self.grad[r];
                h_left += self.hess[r];
                let here = self.features.get(r, feature);
                let next = self.features.get(in_node[k + 1] as usize, feature);
                if next <= here {
                    continue;
                }
                let n_left = k + 1;
                if n_left < self.config.min_samples_leaf
                    || in_node.len() - n_left < self.config.min_samples_leaf
                {
                    continue;
                }
                let g_right = g_total - g_left;
                let h_right = h_total - h_left;
                let gain = g_left * g_left / (h_left + lambda)
                    + g_right * g_right / (h_right + lambda)
                    - parent;
                // strict comparison keeps the lowest feature, then lowest threshold
                if gain > 1e-12 && best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature,
                        threshold: 0.5 * (here + next),
                        gain,
                    });
                }
            }
        }
        best
    }

    fn build(&self, rows: Vec<u32>, depth: usize, member: &mut [bool]) -> TreeNode {
        if depth >= self.config.max_depth || rows.len() < 2 {
            return TreeNode::Leaf {
                value: self.leaf_value(&rows),
            };
        }
        for &r in &rows {
            member[r as usize] = true;
        }
        let split = self.best_split(&rows, member);
        for &r in &rows {
            member[r as usize] = false;
        }
        match split {
            None => TreeNode::Leaf {
                value: self.leaf_value(&rows),
            },
            Some(split) => {
                let (left, right): (Vec<u32>, Vec<u32>) = rows
                    .iter()
                    .partition(|&&r| self.features.get(r as usize, split.feature) <= split.threshold);
                TreeNode::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left: Box::new(self.build(left, depth + 1, member)),
                    right: Box::new(self.build(right, depth + 1, member)),
                }
            }
        }
    }
}

pub fn fit_gbt(features: &Matrix, labels: &[u8], config: GbtConfig) -> Result<GbtModel> {
    check_training_input(features, labels)?;
    let n = features.rows();
    let base_rate = labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
    let base_score = (base_rate / (1.0 - base_rate)).ln();
    let sorted: Vec<Vec<u32>> = (0..features.cols())
        .map(|j| {
            let mut order: Vec<u32> = (0..n as u32).collect();
            // stable sort: equal values stay in row order
            order.sort_by(|&a, &b| features.get(a as usize, j).total_cmp(&features.get(b as usize, j)));
            order
        })
        .collect();

    let mut raw = vec![base_score; n];
    let mut trees = Vec::with_capacity(config.n_rounds);
    let mut member = vec![false; n];
    for _ in 0..config.n_rounds {
        let probs: Vec<f64> = raw.iter().map(|&z| sigmoid(z)).collect();
        let grad: Vec<f64> = probs.iter().zip(labels).map(|(p, &y)| p - f64::from(y)).collect();
        let hess: Vec<f64> = probs.iter().map(|p| (p * (1.0 - p)).max(1e-16)).collect();
        let builder = TreeBuilder {
            features,
            sorted: &sorted,
            grad: &grad,
            hess: &hess,
            config: &config,
        };
        let tree = builder.build((0..n as u32).collect(), 0, &mut member);
        for (i, z) in raw.iter_mut().enumerate() {
            *z += config.shrinkage * tree.evaluate(features.row(i));
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        width: features.cols(),
        base_score,
        shrinkage: config.shrinkage,
        n_rounds: config.n_rounds,
        trees,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    #[default]
    Logistic,
    Gbt,
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" | "lr" => Ok(LearnerKind::Logistic),
            "gbt" | "xgb" => Ok(LearnerKind::Gbt),
            other => Err(Error::Config(format!("unknown learner `{other}`"))),
        }
    }
}

/// Serializable union of the fitted model types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Logistic(LogisticModel),
    Gbt(GbtModel),
}

impl Model {
    pub fn fit(kind: LearnerKind, features: &Matrix, labels: &[u8]) -> Result<Self> {
        Ok(match kind {
            LearnerKind::Logistic => Model::Logistic(fit_logistic(features, labels, LogisticConfig::default())?),
            LearnerKind::Gbt => Model::Gbt(fit_gbt(features, labels, GbtConfig::default())?),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn inner(&self) -> &dyn ProbabilisticClassifier {
        match self {
            Model::Logistic(m) => m,
            Model::Gbt(m) => m,
        }
    }
}

impl ProbabilisticClassifier for Model {
    fn width(&self) -> usize {
        self.inner().width()
    }

    fn predict_proba(&self, features: &Matrix) -> Result<Vec<f64>> {
        self.inner().predict_proba(features)
    }

    fn describe(&self) -> String {
        self.inner().describe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn matrix(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_iterations_predict_one_half() {
        let x = matrix(&[&[0.1, 0.9], &[0.8, 0.2]]);
        let config = LogisticConfig { max_iters: 0, ..Default::default() };
        let model = fit_logistic(&x, &[0, 1], config).unwrap();
        assert!(model.predict_proba(&x).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn symmetric_labels_keep_weights_at_zero() {
        let x = matrix(&[&[0.2, 0.4], &[0.2, 0.4], &[0.9, 0.1], &[0.9, 0.1]]);
        let model = fit_logistic(&x, &[0, 1, 0, 1], LogisticConfig::default()).unwrap();
        for p in model.predict_proba(&x).unwrap() {
            assert_abs_diff_eq!(p, 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        // boundary x0 + x1 = 1; two points on each side
        let x = matrix(&[&[0.0, 0.0], &[0.2, 0.3], &[1.0, 1.0], &[0.9, 0.6]]);
        let y = [0, 0, 1, 1];
        let model = fit_logistic(&x, &y, LogisticConfig::default()).unwrap();
        let probs = model.predict_proba(&x).unwrap();
        for (p, &label) in probs.iter().zip(&y) {
            assert_eq!(u8::from(*p > 0.5), label, "p = {p}");
        }
    }

    #[test]
    fn sigmoid_values() {
        let model = LogisticModel {
            weights: vec![1.0],
            bias: 0.0,
            config: LogisticConfig::default(),
        };
        let p = model.predict_proba(&matrix(&[&[0.5]])).unwrap()[0];
        // 1 / (1 + e^-0.5)
        assert_abs_diff_eq!(p, 0.622_459_331_201_854_6, epsilon = 1e-15);
        assert!(sigmoid(20.0) > 0.999_999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let model = LogisticModel::zeros(3, LogisticConfig::default());
        assert!(matches!(model.predict_proba(&matrix(&[&[0.0, 1.0]])), Err(Error::Input(_))));
    }

    #[test]
    fn degenerate_training_inputs() {
        let x = matrix(&[&[0.0], &[1.0]]);
        assert!(matches!(
            fit_logistic(&x, &[1, 1], LogisticConfig::default()),
            Err(Error::DegenerateTraining(_))
        ));
        let x = matrix(&[&[f64::NAN], &[1.0]]);
        assert!(matches!(fit_logistic(&x, &[0, 1], LogisticConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn loss_never_increases() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| vec![(i % 7) as f64 / 6.0, (i % 5) as f64 / 4.0, (i % 3) as f64 / 2.0])
            .collect();
        let labels: Vec<u8> = (0..60).map(|i| u8::from((i % 7) + (i % 3) > 4)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let (_, trace) = fit_logistic_traced(&x, &labels, LogisticConfig::default()).unwrap();
        assert!(trace.len() > 10);
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn gbt_zero_rounds_predicts_base_rate() {
        let x = matrix(&[&[0.0], &[0.3], &[0.6], &[1.0]]);
        let config = GbtConfig { n_rounds: 0, ..Default::default() };
        let model = fit_gbt(&x, &[0, 0, 0, 1], config).unwrap();
        for p in model.predict_proba(&x).unwrap() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn gbt_single_split_separates() {
        let x = matrix(&[&[0.5, 0.1], &[0.5, 0.2], &[0.5, 0.3], &[0.5, 0.7], &[0.5, 0.9]]);
        let y = [0, 0, 0, 1, 1];
        let model = fit_gbt(&x, &y, GbtConfig::default()).unwrap();
        // every tree splits on the informative feature between 0.3 and 0.7
        match &model.trees[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 1);
                assert_abs_diff_eq!(*threshold, 0.5);
            }
            leaf => panic!("expected a split, got {leaf:?}"),
        }
        let probs = model.predict_proba(&x).unwrap();
        for (p, &label) in probs.iter().zip(&y) {
            assert_eq!(u8::from(*p > 0.5), label);
        }
        assert!(model.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn gbt_is_deterministic_and_round_trips() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 4) as f64, (i % 9) as f64 / 8.0]).collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 1 || i % 9 > 6)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let a = fit_gbt(&x, &labels, GbtConfig::default()).unwrap();
        let b = fit_gbt(&x, &labels, GbtConfig::default()).unwrap();
        assert_eq!(a, b);
        let model = Model::Gbt(a);
        let text = serde_json::to_string(&model).unwrap();
        assert_eq!(serde_json::from_str::<Model>(&text).unwrap(), model);
    }

    #[test]
    fn ties_pick_lowest_feature() {
        // two identical informative columns
        let x = matrix(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let model = fit_gbt(&x, &[0, 0, 1, 1], GbtConfig { n_rounds: 1, ..Default::default() }).unwrap();
        assert!(matches!(model.trees[0], TreeNode::Split { feature: 0, .. }));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            (rows, labels) in (2usize..10, 1usize..5).prop_flat_map(|(n, d)| (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
                prop::collection::vec(0u8..2, n),
            )),
            seed_w in prop::collection::vec(-1.5f64..1.5, 5),
            bias in -1.0f64..1.0,
            l2 in 0.0f64..0.1,
        ) {
            let x = Matrix::from_rows(&rows).unwrap();
            let w: Vec<f64> = seed_w[..x.cols()].to_vec();
            let (_, gw, gb) = logistic_loss_and_gradient(&w, bias, &x, &labels, l2);
            let h = 1e-5;
            let loss = |w: &[f64], b: f64| logistic_loss_and_gradient(w, b, &x, &labels, l2).0;
            for j in 0..w.len() {
                let (mut up, mut down) = (w.clone(), w.clone());
                up[j] += h;
                down[j] -= h;
                let numeric = (loss(&up, bias) - loss(&down, bias)) / (2.0 * h);
                prop_assert!((numeric - gw[j]).abs() <= 1e-6 * gw[j].abs().max(1.0));
            }
            let numeric = (loss(&w, bias + h) - loss(&w, bias - h)) / (2.0 * h);
            prop_assert!((numeric - gb).abs() <= 1e-6 * gb.abs().max(1.0));
        }

        #[test]
        fn probabilities_stay_in_the_unit_interval(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 4..30),
            labels in prop::collection::vec(0u8..2, 30),
        ) {
            let x = Matrix::from_rows(&rows).unwrap();
            let y = &labels[..rows.len()];
            prop_assume!(y.contains(&0) && y.contains(&1));
            for kind in [LearnerKind::Logistic, LearnerKind::Gbt] {
                let model = Model::fit(kind, &x, y).unwrap();
                for p in model.predict_proba(&x).unwrap() {
                    prop_assert!(p.is_finite() && (0.0..=1.0).contains(&p));
                }
            }
        }
    }
}

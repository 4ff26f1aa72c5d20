//! Second-order gradient-boosted regression trees with squared-error loss.
//!
//! Each round fits one tree to the gradients `g = pred - y` (hessian 1) with
//! exact greedy split search. For a node with gradient sum `G` and hessian sum
//! `H` the leaf weight is `-G / (H + lambda)`, and a split into `L`/`R` gains
//!
//! ```text
//! 0.5 * (G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)) - gamma
//! ```
//!
//! A split is kept only if that gain is strictly positive. Candidate
//! thresholds are midpoints between consecutive distinct feature values, and
//! rows with `value < threshold` go left. Ties are broken towards the lowest
//! feature index, then the lowest threshold, so the fitted model does not
//! depend on how many threads searched for splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluate::{EvalError, TargetMetrics};
use crate::features::FeatureMatrix;
use crate::par::Exec;
use crate::textfmt::format_f64;

#[derive(Debug, thiserror::Error)]
pub enum GbdtError {
    #[error("need at least 2 rows to fit, got {0}")]
    EmptyData(usize),
    #[error("{rows} feature rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("target at row {0} is not finite")]
    NonFiniteTarget(usize),
    #[error("target at row {0} is negative; counts are log1p-transformed")]
    NegativeTarget(usize),
    #[error("feature value at row {row}, column {col} is not finite")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("input matrix lacks model feature `{0}`")]
    UnknownFeature(String),
    #[error("{rows} rows cannot fill {folds} folds")]
    TooFewRows { rows: usize, folds: usize },
    #[error("empty search range for `{0}`")]
    EmptySpace(&'static str),
    #[error("search budget must be at least 1")]
    BadBudget,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum loss reduction for a split.
    pub gamma: f64,
    pub learning_rate: f64,
    pub subsample_rows: f64,
    /// Fraction of features drawn per tree.
    pub colsample: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_rounds: 400,
            max_depth: 6,
            min_child_weight: 1.0,
            lambda: 1.0,
            gamma: 0.0,
            learning_rate: 0.05,
            subsample_rows: 0.9,
            colsample: 0.9,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: &str| Err(GbdtError::BadParams(m.to_string()));
        if self.max_depth == 0 {
            return bad("max_depth must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("min_child_weight", self.min_child_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GbdtError::BadParams(format!("{name} must be finite and >= 0")));
            }
        }
        for (name, v) in [("subsample_rows", self.subsample_rows), ("colsample", self.colsample)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(GbdtError::BadParams(format!("{name} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// A regression tree node; `feature` indexes the model's `feature_names`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        weight: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if row[*feature] < *threshold { left } else { right },
            }
        }
    }

    /// Depth counted in split levels; a lone leaf has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Calls `f(feature, threshold, gain)` for every split, pre-order.
    pub fn for_each_split(&self, f: &mut impl FnMut(usize, f64, f64)) {
        if let Node::Split {
            feature,
            threshold,
            gain,
            left,
            right,
        } = self
        {
            f(*feature, *threshold, *gain);
            left.for_each_split(f);
            right.for_each_split(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub params: GbdtParams,
    pub base_score: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<Node>,
}

impl TreeEnsemble {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<TreeEnsemble, GbdtError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Prediction from the base score and the first `rounds` trees, on a row
    /// already laid out in model feature order.
    pub fn predict_row(&self, row: &[f64], rounds: usize) -> f64 {
        let lr = self.params.learning_rate;
        self.trees[..rounds.min(self.trees.len())]
            .iter()
            .fold(self.base_score, |acc, t| acc + lr * t.predict(row))
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Gains closer than this (relative, floored at 1) count as ties.
const GAIN_TIE_TOL: f64 = 1e-12;
/// Below this many (rows × features) a node's split search stays sequential.
const PAR_MIN_WORK: usize = 8192;

#[derive(Clone, Copy, Debug)]
struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn beats(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + GAIN_TIE_TOL * incumbent.abs().max(1.0)
}

struct Learner<'a> {
    columns: &'a [Vec<f64>],
    params: &'a GbdtParams,
    exec: Exec,
}

impl Learner<'_> {
    /// `order` holds the node's rows sorted by (value, row index).
    fn best_split_for_feature(&self, f: usize, order: &[usize], grad: &[f64], g_sum: f64, h_sum: f64) -> Option<SplitCandidate> {
        let col = &self.columns[f];
        let p = self.params;
        let parent = g_sum * g_sum / (h_sum + p.lambda);
        let mut best: Option<SplitCandidate> = None;
        let (mut gl, mut hl) = (0.0, 0.0);
        for w in 0..order.len() - 1 {
            gl += grad[order[w]];
            hl += 1.0;
            let (lo, hi) = (col[order[w]], col[order[w + 1]]);
            if lo >= hi {
                continue;
            }
            let hr = h_sum - hl;
            if hl < p.min_child_weight || hr < p.min_child_weight {
                continue;
            }
            let gr = g_sum - gl;
            let gain = 0.5 * (gl * gl / (hl + p.lambda) + gr * gr / (hr + p.lambda) - parent) - p.gamma;
            if gain > 0.0 && best.is_none_or(|b| beats(gain, b.gain)) {
                let mid = lo / 2.0 + hi / 2.0;
                let threshold = if mid > lo { mid } else { hi };
                best = Some(SplitCandidate { feature: f, threshold, gain });
            }
        }
        best
    }

    /// `rows` is ascending; `sorted[k]` is `rows` ordered by `features[k]`.
    fn build(&self, rows: Vec<usize>, sorted: Vec<Vec<usize>>, grad: &[f64], features: &[usize], depth: usize) -> Node {
        let g_sum: f64 = rows.iter().map(|&r| grad[r]).sum();
        let h_sum = rows.len() as f64;
        let leaf = Node::Leaf {
            weight: -g_sum / (h_sum + self.params.lambda),
        };
        if depth >= self.params.max_depth || rows.len() < 2 {
            return leaf;
        }
        let exec = if rows.len() * features.len() >= PAR_MIN_WORK {
            self.exec
        } else {
            Exec::Sequential
        };
        let per_feature = exec.map_range(features.len(), |k| {
            self.best_split_for_feature(features[k], &sorted[k], grad, g_sum, h_sum)
        });
        let mut best: Option<SplitCandidate> = None;
        for cand in per_feature.into_iter().flatten() {
            if best.is_none_or(|b| beats(cand.gain, b.gain)) {
                best = Some(cand);
            }
        }
        let Some(split) = best else {
            return leaf;
        };
        let col = &self.columns[split.feature];
        let goes_left = |r: &usize| col[*r] < split.threshold;
        let (left, right): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(goes_left);
        let (sorted_left, sorted_right): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            sorted.into_iter().map(|order| order.into_iter().partition(goes_left)).unzip();
        Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            gain: split.gain,
            left: Box::new(self.build(left, sorted_left, grad, features, depth + 1)),
            right: Box::new(self.build(right, sorted_right, grad, features, depth + 1)),
        }
    }
}

fn draw_subset(rng: &mut ChaCha8Rng, n: usize, frac: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if frac < 1.0 {
        let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
        idx.partial_shuffle(rng, k);
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

fn check_inputs(x: &FeatureMatrix, y: &[f64]) -> Result<(), GbdtError> {
    if x.n_rows() != y.len() {
        return Err(GbdtError::LengthMismatch {
            rows: x.n_rows(),
            targets: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(GbdtError::EmptyData(y.len()));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(GbdtError::NonFiniteTarget(i));
    }
    if let Some(k) = x.values.iter().position(|v| !v.is_finite()) {
        return Err(GbdtError::NonFiniteFeature {
            row: k / x.n_cols().max(1),
            col: k % x.n_cols().max(1),
        });
    }
    Ok(())
}

pub fn fit_gbdt(x: &FeatureMatrix, y: &[f64], params: &GbdtParams) -> Result<TreeEnsemble, GbdtError> {
    fit_gbdt_exec(x, y, params, Exec::default())
}

pub fn fit_gbdt_exec(
    x: &FeatureMatrix,
    y: &[f64],
    params: &GbdtParams,
    exec: Exec,
) -> Result<TreeEnsemble, GbdtError> {
    params.validate()?;
    check_inputs(x, y)?;
    let n = y.len();
    let p = x.n_cols();
    let columns: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| x.get(i, j)).collect()).collect();
    let presorted: Vec<Vec<usize>> = columns
        .iter()
        .map(|col| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            order
        })
        .collect();
    let learner = Learner {
        columns: &columns,
        params,
        exec,
    };
    let mut in_sample = vec![false; n];

    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        for i in 0..n {
            grad[i] = pred[i] - y[i];
        }
        let rows = draw_subset(&mut rng, n, params.subsample_rows);
        let features = draw_subset(&mut rng, p, params.colsample);
        in_sample.iter_mut().for_each(|v| *v = false);
        rows.iter().for_each(|&r| in_sample[r] = true);
        let sorted = features
            .iter()
            .map(|&f| presorted[f].iter().copied().filter(|&r| in_sample[r]).collect())
            .collect();
        let tree = learner.build(rows, sorted, &grad, &features, 0);
        for (i, pi) in pred.iter_mut().enumerate() {
            *pi += params.learning_rate * tree.predict(x.row(i));
        }
        trees.push(tree);
    }
    Ok(TreeEnsemble {
        params: params.clone(),
        base_score,
        feature_names: x.names.clone(),
        trees,
    })
}

/// Maps the model's features onto `x`'s columns and scores every row.
pub fn predict_gbdt(model: &TreeEnsemble, x: &FeatureMatrix) -> Result<Vec<f64>, GbdtError> {
    predict_gbdt_rounds(model, x, model.trees.len())
}

pub fn predict_gbdt_rounds(model: &TreeEnsemble, x: &FeatureMatrix, rounds: usize) -> Result<Vec<f64>, GbdtError> {
    let cols: Vec<usize> = model
        .feature_names
        .iter()
        .map(|name| x.column_index(name).ok_or_else(|| GbdtError::UnknownFeature(name.clone())))
        .collect::<Result<_, _>>()?;
    let mut buf = vec![0.0; cols.len()];
    Ok((0..x.n_rows())
        .map(|i| {
            let row = x.row(i);
            for (b, &c) in buf.iter_mut().zip(&cols) {
                *b = row[c];
            }
            model.predict_row(&buf, rounds)
        })
        .collect())
}

/// Inverse of the `log1p` target transform, floored at zero.
pub fn to_raw_scale(z: f64) -> f64 {
    z.exp_m1().max(0.0)
}

fn log_targets(y_raw: &[f64]) -> Result<Vec<f64>, GbdtError> {
    y_raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() {
                Err(GbdtError::NonFiniteTarget(i))
            } else if v < 0.0 {
                Err(GbdtError::NegativeTarget(i))
            } else {
                Ok(v.ln_1p())
            }
        })
        .collect()
}

/// Fits on `log1p(y_raw)`.
pub fn fit_gbdt_raw(x: &FeatureMatrix, y_raw: &[f64], params: &GbdtParams, exec: Exec) -> Result<TreeEnsemble, GbdtError> {
    fit_gbdt_exec(x, &log_targets(y_raw)?, params, exec)
}

/// Raw-scale predictions of a model trained on `log1p` targets.
pub fn predict_gbdt_raw(model: &TreeEnsemble, x: &FeatureMatrix) -> Result<Vec<f64>, GbdtError> {
    Ok(predict_gbdt(model, x)?.into_iter().map(to_raw_scale).collect())
}

// ---------------------------------------------------------------------------
// Cross-validation and search
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean_mape: f64,
    pub mean_mse: f64,
    pub folds: Vec<TargetMetrics>,
}

/// Seeded permutation cut into `n_folds` contiguous slices whose sizes differ
/// by at most one.
pub fn fold_assignment(n: usize, n_folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / n_folds, n % n_folds);
    let mut out = Vec::with_capacity(n_folds);
    let mut start = 0;
    for k in 0..n_folds {
        let len = base + usize::from(k < extra);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    out
}

/// K-fold CV. Models train on `log1p(y_raw)`; metrics compare `expm1`
/// predictions with the raw targets.
pub fn cross_validate(
    x: &FeatureMatrix,
    y_raw: &[f64],
    params: &GbdtParams,
    n_folds: usize,
    seed: u64,
    exec: Exec,
) -> Result<CvResult, GbdtError> {
    if n_folds < 2 || y_raw.len() < n_folds {
        return Err(GbdtError::TooFewRows {
            rows: y_raw.len(),
            folds: n_folds,
        });
    }
    check_inputs(x, y_raw)?;
    let y_log = log_targets(y_raw)?;
    let folds = fold_assignment(y_raw.len(), n_folds, seed);
    let results = exec.map(&folds, |held| -> Result<TargetMetrics, GbdtError> {
        let mut in_fold = vec![false; y_raw.len()];
        held.iter().for_each(|&i| in_fold[i] = true);
        let train: Vec<usize> = (0..y_raw.len()).filter(|&i| !in_fold[i]).collect();
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y_log[i]).collect();
        let model = fit_gbdt_exec(&xt, &yt, params, exec)?;
        let pred = predict_gbdt_raw(&model, &x.select_rows(held))?;
        let truth: Vec<f64> = held.iter().map(|&i| y_raw[i]).collect();
        Ok(TargetMetrics::compute(&truth, &pred)?)
    });
    let folds: Vec<TargetMetrics> = results.into_iter().collect::<Result<_, _>>()?;
    let k = folds.len() as f64;
    Ok(CvResult {
        mean_mape: folds.iter().map(|f| f.mape).sum::<f64>() / k,
        mean_mse: folds.iter().map(|f| f.mse).sum::<f64>() / k,
        folds,
    })
}

/// Closed interval to draw from uniformly; `lo == hi` pins the value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Copy> Range<T> {
    pub fn fixed(v: T) -> Self {
        Range { lo: v, hi: v }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub n_rounds: Range<usize>,
    pub max_depth: Range<usize>,
    pub min_child_weight: Range<f64>,
    pub lambda: Range<f64>,
    pub gamma: Range<f64>,
    pub learning_rate: Range<f64>,
    pub subsample_rows: Range<f64>,
    pub colsample: Range<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_rounds: Range { lo: 100, hi: 600 },
            max_depth: Range { lo: 3, hi: 8 },
            min_child_weight: Range { lo: 1.0, hi: 10.0 },
            lambda: Range { lo: 0.1, hi: 10.0 },
            gamma: Range { lo: 0.0, hi: 0.5 },
            learning_rate: Range { lo: 0.01, hi: 0.2 },
            subsample_rows: Range { lo: 0.6, hi: 1.0 },
            colsample: Range { lo: 0.6, hi: 1.0 },
        }
    }
}

impl SearchSpace {
    /// Every range collapsed onto `p`.
    pub fn point(p: &GbdtParams) -> Self {
        SearchSpace {
            n_rounds: Range::fixed(p.n_rounds),
            max_depth: Range::fixed(p.max_depth),
            min_child_weight: Range::fixed(p.min_child_weight),
            lambda: Range::fixed(p.lambda),
            gamma: Range::fixed(p.gamma),
            learning_rate: Range::fixed(p.learning_rate),
            subsample_rows: Range::fixed(p.subsample_rows),
            colsample: Range::fixed(p.colsample),
        }
    }

    fn validate(&self) -> Result<(), GbdtError> {
        let float_ok = |r: Range<f64>| r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi;
        if self.n_rounds.lo > self.n_rounds.hi {
            return Err(GbdtError::EmptySpace("n_rounds"));
        }
        if self.max_depth.lo > self.max_depth.hi {
            return Err(GbdtError::EmptySpace("max_depth"));
        }
        for (name, r) in [
            ("min_child_weight", self.min_child_weight),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("learning_rate", self.learning_rate),
            ("subsample_rows", self.subsample_rows),
            ("colsample", self.colsample),
        ] {
            if !float_ok(r) {
                return Err(GbdtError::EmptySpace(name));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, seed: u64) -> GbdtParams {
        use rand::Rng;
        let mut f = |r: Range<f64>| if r.lo == r.hi { r.lo } else { rng.random_range(r.lo..=r.hi) };
        let min_child_weight = f(self.min_child_weight);
        let lambda = f(self.lambda);
        let gamma = f(self.gamma);
        let learning_rate = f(self.learning_rate);
        let subsample_rows = f(self.subsample_rows);
        let colsample = f(self.colsample);
        let mut u = |r: Range<usize>| rng.random_range(r.lo..=r.hi);
        GbdtParams {
            n_rounds: u(self.n_rounds),
            max_depth: u(self.max_depth),
            min_child_weight,
            lambda,
            gamma,
            learning_rate,
            subsample_rows,
            colsample,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneTrial {
    pub params: GbdtParams,
    pub cv: CvResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: GbdtParams,
    pub best_index: usize,
    pub trials: Vec<TuneTrial>,
}

/// Seeded uniform random search scored by k-fold mean MAPE. Returns the
/// argmin, earliest draw on ties.
pub fn tune_gbdt(
    x: &FeatureMatrix,
    y_raw: &[f64],
    space: &SearchSpace,
    budget: usize,
    n_folds: usize,
    seed: u64,
    exec: Exec,
) -> Result<TuneResult, GbdtError> {
    if budget == 0 {
        return Err(GbdtError::BadBudget);
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<GbdtParams> = (0..budget).map(|_| space.sample(&mut rng, seed)).collect();
    let scored = exec.map(&candidates, |p| cross_validate(x, y_raw, p, n_folds, seed, exec));
    let mut trials = Vec::with_capacity(budget);
    for (params, cv) in candidates.into_iter().zip(scored) {
        trials.push(TuneTrial { params, cv: cv? });
    }
    let mut best_index = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.cv.mean_mape < trials[best_index].cv.mean_mape {
            best_index = i;
        }
    }
    Ok(TuneResult {
        best: trials[best_index].params.clone(),
        best_index,
        trials,
    })
}

// ---------------------------------------------------------------------------
// Importance
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub gain: f64,
    pub splits: usize,
}

/// Total split gain and split count per feature, in model feature order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub entries: Vec<FeatureImportance>,
}

pub fn feature_importance(model: &TreeEnsemble) -> ImportanceReport {
    let mut entries: Vec<FeatureImportance> = model
        .feature_names
        .iter()
        .map(|n| FeatureImportance {
            feature: n.clone(),
            gain: 0.0,
            splits: 0,
        })
        .collect();
    for tree in &model.trees {
        tree.for_each_split(&mut |f, _, gain| {
            entries[f].gain += gain;
            entries[f].splits += 1;
        });
    }
    ImportanceReport { entries }
}

impl ImportanceReport {
    /// Entries by gain descending; ties keep feature order.
    pub fn ranked(&self) -> Vec<&FeatureImportance> {
        let mut v: Vec<&FeatureImportance> = self.entries.iter().collect();
        v.sort_by(|a, b| b.gain.total_cmp(&a.gain));
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,gain,splits\n");
        for e in self.ranked() {
            out.push_str(&format!("{},{},{}\n", e.feature, format_f64(e.gain), e.splits));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(depth: usize, rounds: usize) -> GbdtParams {
        GbdtParams {
            n_rounds: rounds,
            max_depth: depth,
            min_child_weight: 1.0,
            lambda: 0.0,
            gamma: 0.0,
            learning_rate: 1.0,
            subsample_rows: 1.0,
            colsample: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn two_row_example() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]);
        let m = fit_gbdt(&x, &[0.0, 1.0], &params(1, 1)).unwrap();
        assert_eq!(m.base_score, 0.5);
        assert_eq!(m.trees.len(), 1);
        match &m.trees[0] {
            Node::Split {
                feature,
                threshold,
                gain,
                left,
                right,
            } => {
                assert_eq!((*feature, *threshold, *gain), (0, 0.5, 0.25));
                assert_eq!(**left, Node::Leaf { weight: -0.5 });
                assert_eq!(**right, Node::Leaf { weight: 0.5 });
            }
            other => panic!("expected a split, got {other:?}"),
        }
        assert_eq!(predict_gbdt(&m, &x).unwrap(), [0.0, 1.0]);

        let imp = feature_importance(&m);
        assert_eq!(imp.entries[0].gain, 0.25);
        assert_eq!(imp.entries[0].splits, 1);
    }

    #[test]
    fn constant_target_never_splits() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let c = 3.7;
        let p = GbdtParams { gamma: 0.1, seed: 3, ..GbdtParams::default() };
        let m = fit_gbdt(&x, &[c; 12], &GbdtParams { n_rounds: 20, ..p }).unwrap();
        assert!(m.trees.iter().all(|t| t.depth() == 0));
        for v in predict_gbdt(&m, &x).unwrap() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_model_predicts_base() {
        let x = FeatureMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let m = TreeEnsemble {
            params: params(1, 0),
            base_score: 4.25,
            feature_names: vec!["f0".into()],
            trees: vec![],
        };
        assert_eq!(predict_gbdt(&m, &x).unwrap(), [4.25; 3]);
        assert!(feature_importance(&m).entries.iter().all(|e| e.gain == 0.0 && e.splits == 0));
    }

    #[test]
    fn unknown_feature_and_input_errors() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]);
        let m = fit_gbdt(&x, &[0.0, 1.0], &params(1, 1)).unwrap();
        let other = FeatureMatrix::new(vec!["zzz".into()], vec!["a".into()], vec![0.0]);
        assert!(matches!(predict_gbdt(&m, &other), Err(GbdtError::UnknownFeature(n)) if n == "f0"));
        let one = FeatureMatrix::from_rows(&[vec![0.0]]);
        assert!(matches!(fit_gbdt(&one, &[1.0], &params(1, 1)), Err(GbdtError::EmptyData(1))));
        assert!(matches!(fit_gbdt(&x, &[1.0, f64::NAN], &params(1, 1)), Err(GbdtError::NonFiniteTarget(1))));
        let bad = GbdtParams { colsample: 0.0, ..params(1, 1) };
        assert!(matches!(fit_gbdt(&x, &[0.0, 1.0], &bad), Err(GbdtError::BadParams(_))));
    }

    #[test]
    fn prediction_is_deterministic_and_persistence_exact() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64).sqrt()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] * 2.0 + r[1]).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let m = fit_gbdt(&x, &y, &GbdtParams { n_rounds: 30, ..GbdtParams::default() }).unwrap();
        let a = predict_gbdt(&m, &x).unwrap();
        assert_eq!(a, predict_gbdt(&m, &x).unwrap());
        let back = TreeEnsemble::from_json(&m.to_json()).unwrap();
        let b = predict_gbdt(&back, &x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn folds_partition_rows() {
        let folds = fold_assignment(23, 10, 5);
        assert_eq!(folds.len(), 10);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 2 || f.len() == 3));
    }

    #[test]
    fn cross_validation_cases() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let cv = cross_validate(&x, &[5.0; 30], &GbdtParams { n_rounds: 5, ..GbdtParams::default() }, 10, 1, Exec::default())
            .unwrap();
        assert!(cv.mean_mape < 1e-9, "{}", cv.mean_mape);
        assert_eq!(cv.folds.len(), 10);
        assert!(matches!(
            cross_validate(&x.select_rows(&[0, 1, 2]), &[1.0; 3], &GbdtParams::default(), 10, 1, Exec::default()),
            Err(GbdtError::TooFewRows { rows: 3, folds: 10 })
        ));
    }

    #[test]
    fn tune_edge_cases() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| 10.0 + i as f64).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let small = SearchSpace {
            n_rounds: Range { lo: 3, hi: 10 },
            max_depth: Range { lo: 1, hi: 3 },
            ..SearchSpace::default()
        };
        let r = tune_gbdt(&x, &y, &small, 1, 4, 9, Exec::default()).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best, r.trials[0].params);

        let point = GbdtParams { n_rounds: 4, max_depth: 2, seed: 11, ..GbdtParams::default() };
        let r = tune_gbdt(&x, &y, &SearchSpace::point(&point), 5, 4, 11, Exec::default()).unwrap();
        assert_eq!(r.best, point);
        assert_eq!(r.best_index, 0);

        let empty = SearchSpace { lambda: Range { lo: 2.0, hi: 1.0 }, ..small };
        assert!(matches!(tune_gbdt(&x, &y, &empty, 3, 4, 1, Exec::default()), Err(GbdtError::EmptySpace("lambda"))));
        assert!(matches!(tune_gbdt(&x, &y, &SearchSpace::default(), 0, 4, 1, Exec::default()), Err(GbdtError::BadBudget)));
    }

    #[test]
    fn importance_csv_sorted_descending() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i % 7) as f64, i as f64, (i % 2) as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 5.0 * r[1] + r[2]).collect();
        let m = fit_gbdt(&FeatureMatrix::from_rows(&rows), &y, &GbdtParams { n_rounds: 10, ..GbdtParams::default() }).unwrap();
        let csv = feature_importance(&m).to_csv();
        let gains: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert!(gains.windows(2).all(|w| w[0] >= w[1]));
        assert!(csv.lines().nth(1).unwrap().starts_with("f1,"));
    }
}

//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::{Command, Output};

use popfusion::fusion::FusionNet;
use popfusion::fusion::layers::Matrix;
use popfusion::gbdt::{GbdtParams, Node};
use popfusion::SourceId;

// ---------------------------------------------------------------------------
// Boosted trees by exhaustive search
// ---------------------------------------------------------------------------

pub const ORACLE_TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum OracleNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: Box<OracleNode>,
        right: Box<OracleNode>,
    },
}

impl OracleNode {
    pub fn predict(&self, row: &[f64]) -> f64 {
        match self {
            OracleNode::Leaf(w) => *w,
            OracleNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                if row[*feature] < *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }
}

pub struct OracleModel {
    pub base_score: f64,
    pub trees: Vec<OracleNode>,
    pub learning_rate: f64,
}

impl OracleModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut p = self.base_score;
        for t in &self.trees {
            p += self.learning_rate * t.predict(row);
        }
        p
    }
}

fn split_gain(grad: &[f64], left: &[usize], right: &[usize], p: &GbdtParams) -> Option<f64> {
    let hl = left.len() as f64;
    let hr = right.len() as f64;
    if hl < p.min_child_weight || hr < p.min_child_weight {
        return None;
    }
    let gl: f64 = left.iter().map(|&r| grad[r]).sum();
    let gr: f64 = right.iter().map(|&r| grad[r]).sum();
    let g = gl + gr;
    let score = |g: f64, h: f64| g * g / (h + p.lambda);
    Some(0.5 * (score(gl, hl) + score(gr, hr) - score(g, hl + hr)) - p.gamma)
}

/// Best split over every feature and every midpoint between consecutive
/// distinct values, partitioning the rows afresh for each candidate.
pub fn oracle_best_split(
    x: &[Vec<f64>],
    rows: &[usize],
    grad: &[f64],
    p: &GbdtParams,
) -> Option<(usize, f64, f64)> {
    let n_features = x.first().map_or(0, Vec::len);
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..n_features {
        let mut values: Vec<f64> = rows.iter().map(|&r| x[r][f]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        for pair in values.windows(2) {
            let threshold = (pair[0] + pair[1]) / 2.0;
            let left: Vec<usize> = rows.iter().copied().filter(|&r| x[r][f] < threshold).collect();
            let right: Vec<usize> = rows.iter().copied().filter(|&r| x[r][f] >= threshold).collect();
            let Some(gain) = split_gain(grad, &left, &right, p) else {
                continue;
            };
            if gain <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, _, b)) => gain > b + ORACLE_TIE_TOL * b.abs().max(1.0),
            };
            if better {
                best = Some((f, threshold, gain));
            }
        }
    }
    best
}

fn oracle_tree(x: &[Vec<f64>], rows: &[usize], grad: &[f64], p: &GbdtParams, depth: usize) -> OracleNode {
    let g: f64 = rows.iter().map(|&r| grad[r]).sum();
    let leaf = OracleNode::Leaf(-g / (rows.len() as f64 + p.lambda));
    if depth >= p.max_depth {
        return leaf;
    }
    match oracle_best_split(x, rows, grad, p) {
        None => leaf,
        Some((feature, threshold, gain)) => {
            let left: Vec<usize> = rows.iter().copied().filter(|&r| x[r][feature] < threshold).collect();
            let right: Vec<usize> = rows.iter().copied().filter(|&r| x[r][feature] >= threshold).collect();
            OracleNode::Split {
                feature,
                threshold,
                gain,
                left: Box::new(oracle_tree(x, &left, grad, p, depth + 1)),
                right: Box::new(oracle_tree(x, &right, grad, p, depth + 1)),
            }
        }
    }
}

/// Boosting without subsampling, one exhaustive tree per round.
pub fn oracle_boost(x: &[Vec<f64>], y: &[f64], p: &GbdtParams) -> OracleModel {
    let n = y.len();
    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let rows: Vec<usize> = (0..n).collect();
    let mut trees = Vec::new();
    for _ in 0..p.n_rounds {
        let grad: Vec<f64> = (0..n).map(|i| pred[i] - y[i]).collect();
        let tree = oracle_tree(x, &rows, &grad, p, 0);
        for i in 0..n {
            pred[i] += p.learning_rate * tree.predict(&x[i]);
        }
        trees.push(tree);
    }
    OracleModel {
        base_score,
        trees,
        learning_rate: p.learning_rate,
    }
}

/// Describes the first structural difference between a fitted tree and the
/// oracle's, if any.
pub fn tree_mismatch(got: &Node, want: &OracleNode) -> Option<String> {
    match (got, want) {
        (Node::Leaf { weight }, OracleNode::Leaf(w)) => {
            ((weight - w).abs() > 1e-12).then(|| format!("leaf {weight} vs {w}"))
        }
        (
            Node::Split {
                feature,
                threshold,
                gain,
                left,
                right,
            },
            OracleNode::Split {
                feature: f,
                threshold: t,
                gain: g,
                left: l,
                right: r,
            },
        ) => {
            if feature != f || threshold != t {
                return Some(format!("split ({feature}, {threshold}) vs ({f}, {t})"));
            }
            if (gain - g).abs() > 1e-9 * g.abs().max(1.0) {
                return Some(format!("gain {gain} vs {g}"));
            }
            tree_mismatch(left, l).or_else(|| tree_mismatch(right, r))
        }
        _ => Some(format!("node kind differs: {got:?} vs {want:?}")),
    }
}

// ---------------------------------------------------------------------------
// Feature-engineering recounts
// ---------------------------------------------------------------------------

fn word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Tag counts found by testing every marker position on its own.
pub fn recount_tags(captions: &[String]) -> (HashMap<String, u64>, HashMap<String, u64>) {
    let mut hashtags = HashMap::new();
    let mut mentions = HashMap::new();
    for caption in captions {
        let chars: Vec<char> = caption.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            if c != '#' && c != '@' {
                continue;
            }
            if i > 0 && word_char(chars[i - 1]) {
                continue;
            }
            let token: String = chars[i + 1..]
                .iter()
                .take_while(|&&ch| word_char(ch) || (c == '@' && ch == '.'))
                .map(|ch| ch.to_ascii_lowercase())
                .collect();
            if token.is_empty() {
                continue;
            }
            let table = if c == '#' { &mut hashtags } else { &mut mentions };
            *table.entry(token).or_insert(0) += 1;
        }
    }
    (hashtags, mentions)
}

/// Median by full sort and explicit pick of the central order statistics.
pub fn sort_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[(n - 1) / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Quantile by linear interpolation between order statistics at `p·(n−1)`.
pub fn interp_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let below = h.floor();
    let i = below as usize;
    if i + 1 >= sorted.len() {
        return sorted[i];
    }
    sorted[i] + (h - below) * (sorted[i + 1] - sorted[i])
}

pub fn iqr_keep_oracle(values: &[f64], k: f64) -> Vec<bool> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = interp_quantile(&sorted, 0.25);
    let q3 = interp_quantile(&sorted, 0.75);
    let spread = q3 - q1;
    values
        .iter()
        .map(|&v| !(v < q1 - k * spread || v > q3 + k * spread))
        .collect()
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Largest relative error between the net's analytic gradients and central
/// differences of its train-mode loss.
pub fn max_gradient_error(net: &FusionNet, batch: &BTreeMap<SourceId, Matrix>, targets: &[f64], eps: f64) -> f64 {
    let analytic = net.gradients(batch, targets).unwrap();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (p, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = probe.params()[p][k];
            probe.params_mut()[p][k] = orig + eps;
            let up = probe.train_loss(batch, targets).unwrap();
            probe.params_mut()[p][k] = orig - eps;
            let down = probe.train_loss(batch, targets).unwrap();
            probe.params_mut()[p][k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

/// Runs the binary with `dir` as working directory.
pub fn popfusion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popfusion"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Relative path and bytes of every file under `root`, sorted by path.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

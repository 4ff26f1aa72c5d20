//! Multi-branch fusion network: each embedding source is projected to a shared
//! width, normalized according to its kind, concatenated in ascending source
//! order, and regressed through a narrowing dense head.

pub mod layers;
mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{SourceId, SourceKind};
use layers::{BatchNorm, Dense, LayerNorm, Matrix, NormCache};

pub use train::{
    adam_step, train_fusion, AdamState, EpochRecord, FusionData, TrainConfig, TrainOutcome,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("head widths must be strictly decreasing and end in 1, got {0:?}")]
    BadHeadShape(Vec<usize>),
    #[error("source {0} listed twice")]
    DuplicateSource(SourceId),
    #[error("source {source_id} must use a {expected:?} branch")]
    BadBranchKind { source_id: SourceId, expected: SourceKind },
    #[error("no branches given")]
    NoBranches,
    #[error("branch {source_id}: expected {expected} input columns, found {found}")]
    ShapeMismatch { source_id: SourceId, expected: usize, found: usize },
    #[error("batch has no matrix for source {0}")]
    MissingSourceInBatch(SourceId),
    #[error("batch sources disagree on row count")]
    RowMismatch,
    #[error("need at least {needed} rows, have {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {loss}")]
    DivergedLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("unsupported model format version {0}")]
    BadVersion(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub source: SourceId,
    pub input_dim: usize,
    pub kind: SourceKind,
    pub unified_width: usize,
}

impl BranchSpec {
    /// Spec with the kind the source requires.
    pub fn new(source: SourceId, input_dim: usize, unified_width: usize) -> Self {
        BranchSpec {
            source,
            input_dim,
            kind: source.kind(),
            unified_width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Norm {
    Batch(BatchNorm),
    Layer(LayerNorm),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub spec: BranchSpec,
    pub projection: Dense,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNet {
    pub version: u32,
    pub seed: u64,
    /// Ascending by source id.
    pub branches: Vec<Branch>,
    pub head_widths: Vec<usize>,
    pub head: Vec<Dense>,
}

/// Inverted dropout applied after each hidden head activation.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn uniform_init(rng: &mut ChaCha8Rng, layer: &mut Dense, limit: f64) {
    for w in layer.weight.iter_mut() {
        *w = rng.random_range(-limit..=limit);
    }
}

fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn build_fusion_net(specs: &[BranchSpec], head_widths: &[usize], seed: u64) -> Result<FusionNet, FusionError> {
    if specs.is_empty() {
        return Err(FusionError::NoBranches);
    }
    let shape_ok = head_widths.last() == Some(&1)
        && head_widths.windows(2).all(|w| w[0] > w[1])
        && specs.iter().all(|s| s.input_dim > 0 && s.unified_width > 0);
    if !shape_ok {
        return Err(FusionError::BadHeadShape(head_widths.to_vec()));
    }
    let mut sorted = specs.to_vec();
    sorted.sort_by_key(|s| s.source);
    for w in sorted.windows(2) {
        if w[0].source == w[1].source {
            return Err(FusionError::DuplicateSource(w[0].source));
        }
    }
    for s in &sorted {
        if s.kind != s.source.kind() {
            return Err(FusionError::BadBranchKind {
                source_id: s.source,
                expected: s.source.kind(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut branches = Vec::with_capacity(sorted.len());
    for spec in sorted {
        let (projection, norm) = match spec.kind {
            SourceKind::Video => {
                let mut d = Dense::zeros(spec.input_dim, spec.unified_width, false);
                uniform_init(&mut rng, &mut d, he_limit(spec.input_dim));
                (d, Norm::Batch(BatchNorm::new(spec.unified_width)))
            }
            SourceKind::Text => {
                let mut d = Dense::zeros(spec.input_dim, spec.unified_width, true);
                uniform_init(&mut rng, &mut d, xavier_limit(spec.input_dim, spec.unified_width));
                (d, Norm::Layer(LayerNorm::new(spec.unified_width)))
            }
        };
        branches.push(Branch { spec, projection, norm });
    }

    let mut fan_in: usize = branches.iter().map(|b| b.spec.unified_width).sum();
    let mut head = Vec::with_capacity(head_widths.len());
    for (i, &w) in head_widths.iter().enumerate() {
        let mut d = Dense::zeros(fan_in, w, true);
        let limit = if i + 1 == head_widths.len() {
            xavier_limit(fan_in, w)
        } else {
            he_limit(fan_in)
        };
        uniform_init(&mut rng, &mut d, limit);
        head.push(d);
        fan_in = w;
    }

    Ok(FusionNet {
        version: FORMAT_VERSION,
        seed,
        branches,
        head_widths: head_widths.to_vec(),
        head,
    })
}

struct BranchCache {
    norm: NormCache,
    normalized: Matrix,
}

struct HeadCache {
    input: Matrix,
    pre_activation: Matrix,
    mask: Option<Vec<f64>>,
}

struct ForwardCache {
    branches: Vec<BranchCache>,
    head: Vec<HeadCache>,
}

impl FusionNet {
    pub fn sources(&self) -> Vec<SourceId> {
        self.branches.iter().map(|b| b.spec.source).collect()
    }

    pub fn concat_width(&self) -> usize {
        self.branches.iter().map(|b| b.spec.unified_width).sum()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Trainable parameter buffers in a fixed order: per branch projection
    /// weight, projection bias (text only), norm gamma, norm beta; then per
    /// head layer weight and bias.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.push(&b.projection.weight);
            if let Some(bias) = &b.projection.bias {
                out.push(bias);
            }
            let (g, be) = match &b.norm {
                Norm::Batch(n) => (&n.gamma, &n.beta),
                Norm::Layer(n) => (&n.gamma, &n.beta),
            };
            out.push(g);
            out.push(be);
        }
        for d in &self.head {
            out.push(&d.weight);
            out.push(d.bias.as_ref().expect("head layers carry a bias"));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            out.push(&mut b.projection.weight);
            if let Some(bias) = &mut b.projection.bias {
                out.push(bias);
            }
            let (g, be) = match &mut b.norm {
                Norm::Batch(n) => (&mut n.gamma, &mut n.beta),
                Norm::Layer(n) => (&mut n.gamma, &mut n.beta),
            };
            out.push(g);
            out.push(be);
        }
        for d in &mut self.head {
            out.push(&mut d.weight);
            out.push(d.bias.as_mut().expect("head layers carry a bias"));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        let running = self.branches.iter().all(|b| match &b.norm {
            Norm::Batch(n) => n.running_mean.iter().chain(&n.running_var).all(|v| v.is_finite()),
            Norm::Layer(_) => true,
        });
        running && self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &BTreeMap<SourceId, Matrix>) -> Result<usize, FusionError> {
        let mut rows = None;
        for b in &self.branches {
            let m = batch
                .get(&b.spec.source)
                .ok_or(FusionError::MissingSourceInBatch(b.spec.source))?;
            if m.cols != b.spec.input_dim {
                return Err(FusionError::ShapeMismatch {
                    source_id: b.spec.source,
                    expected: b.spec.input_dim,
                    found: m.cols,
                });
            }
            match rows {
                None => rows = Some(m.rows),
                Some(r) if r != m.rows => return Err(FusionError::RowMismatch),
                Some(_) => {}
            }
        }
        Ok(rows.unwrap_or(0))
    }

    fn forward_cached(
        &self,
        batch: &BTreeMap<SourceId, Matrix>,
        mode: Mode,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(Vec<f64>, ForwardCache), FusionError> {
        self.check_batch(batch)?;
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        let mut activated = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let x = &batch[&b.spec.source];
            let projected = b.projection.forward(x);
            let (normalized, norm) = match (&b.norm, mode) {
                (Norm::Batch(n), Mode::Train) => n.forward_train(&projected),
                (Norm::Batch(n), Mode::Eval) => {
                    let y = n.forward_eval(&projected);
                    let empty = NormCache {
                        xhat: Matrix::zeros(0, 0),
                        inv_std: Vec::new(),
                        batch_mean: Vec::new(),
                        batch_var: Vec::new(),
                    };
                    (y, empty)
                }
                (Norm::Layer(n), _) => n.forward(&projected),
            };
            activated.push(match b.spec.kind {
                SourceKind::Video => layers::relu(&normalized),
                SourceKind::Text => layers::gelu(&normalized),
            });
            branch_caches.push(BranchCache {
                norm,
                normalized,
            });
        }
        let parts: Vec<&Matrix> = activated.iter().collect();
        let mut h = Matrix::hcat(&parts);

        let last = self.head.len() - 1;
        let mut head_caches = Vec::with_capacity(self.head.len());
        for (l, layer) in self.head.iter().enumerate() {
            let z = layer.forward(&h);
            if l == last {
                head_caches.push(HeadCache {
                    input: h,
                    pre_activation: Matrix::zeros(0, 0),
                    mask: None,
                });
                let out = z.data;
                return Ok((
                    out,
                    ForwardCache {
                        branches: branch_caches,
                        head: head_caches,
                    },
                ));
            }
            let mut a = layers::relu(&z);
            let mut mask = None;
            if mode == Mode::Train {
                if let Some(d) = dropout.as_mut() {
                    if d.rate > 0.0 {
                        let keep = 1.0 - d.rate;
                        let m: Vec<f64> = (0..a.data.len())
                            .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        a.data.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                        mask = Some(m);
                    }
                }
            }
            head_caches.push(HeadCache {
                input: h,
                pre_activation: z,
                mask,
            });
            h = a;
        }
        unreachable!("head has at least one layer")
    }

    /// Predictions in the transformed (log1p) space.
    pub fn forward(&self, batch: &BTreeMap<SourceId, Matrix>, mode: Mode) -> Result<Vec<f64>, FusionError> {
        self.forward_cached(batch, mode, None).map(|(p, _)| p)
    }

    pub fn forward_with_dropout(
        &self,
        batch: &BTreeMap<SourceId, Matrix>,
        mode: Mode,
        dropout: Dropout<'_>,
    ) -> Result<Vec<f64>, FusionError> {
        self.forward_cached(batch, mode, Some(dropout)).map(|(p, _)| p)
    }

    fn backward(&self, batch: &BTreeMap<SourceId, Matrix>, cache: &ForwardCache, dout: &[f64]) -> Vec<Vec<f64>> {
        let n = dout.len();
        let mut head_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.head.len());
        let mut dy = Matrix::from_vec(n, 1, dout.to_vec());
        for (l, layer) in self.head.iter().enumerate().rev() {
            let c = &cache.head[l];
            if l + 1 != self.head.len() {
                if let Some(mask) = &c.mask {
                    dy.data.iter_mut().zip(mask).for_each(|(g, s)| *g *= s);
                }
                dy = layers::relu_backward(&c.pre_activation, &dy);
            }
            let g = layer.backward(&c.input, &dy);
            head_grads.push((g.weight, g.bias.expect("head layers carry a bias")));
            dy = g.input;
        }
        head_grads.reverse();

        let mut out = Vec::new();
        let mut offset = 0;
        for (b, c) in self.branches.iter().zip(&cache.branches) {
            let w = b.spec.unified_width;
            let mut d_act = Matrix::zeros(n, w);
            for i in 0..n {
                d_act.row_mut(i).copy_from_slice(&dy.row(i)[offset..offset + w]);
            }
            offset += w;
            let norm_grads = match &b.norm {
                Norm::Batch(bn) => bn.backward_train(&c.norm, &layers::relu_backward(&c.normalized, &d_act)),
                Norm::Layer(ln) => ln.backward(&c.norm, &layers::gelu_backward(&c.normalized, &d_act)),
            };
            let pg = b.projection.backward(&batch[&b.spec.source], &norm_grads.input);
            out.push(pg.weight);
            if let Some(bias) = pg.bias {
                out.push(bias);
            }
            out.push(norm_grads.gamma);
            out.push(norm_grads.beta);
        }
        for (w, bias) in head_grads {
            out.push(w);
            out.push(bias);
        }
        out
    }

    /// Mean-squared-error loss in transformed space with gradients aligned to
    /// [`FusionNet::params`]. Also returns the batch-norm caches' statistics
    /// so the caller can update running averages.
    pub(crate) fn loss_and_grads(
        &self,
        batch: &BTreeMap<SourceId, Matrix>,
        targets: &[f64],
        dropout: Option<Dropout<'_>>,
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<Option<(Vec<f64>, Vec<f64>)>>), FusionError> {
        let (pred, cache) = self.forward_cached(batch, Mode::Train, dropout)?;
        if pred.len() != targets.len() {
            return Err(FusionError::RowMismatch);
        }
        let n = pred.len() as f64;
        let loss = pred.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
        let dout: Vec<f64> = pred.iter().zip(targets).map(|(p, y)| 2.0 * (p - y) / n).collect();
        let grads = self.backward(batch, &cache, &dout);
        let stats = self
            .branches
            .iter()
            .zip(cache.branches)
            .map(|(b, c)| match b.norm {
                Norm::Batch(_) => Some((c.norm.batch_mean, c.norm.batch_var)),
                Norm::Layer(_) => None,
            })
            .collect();
        Ok((loss, grads, stats))
    }

    /// Train-mode MSE with dropout off; the objective the gradient check probes.
    pub fn train_loss(&self, batch: &BTreeMap<SourceId, Matrix>, targets: &[f64]) -> Result<f64, FusionError> {
        let pred = self.forward(batch, Mode::Train)?;
        if pred.len() != targets.len() {
            return Err(FusionError::RowMismatch);
        }
        Ok(pred.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
    }

    /// Analytic gradients of [`FusionNet::train_loss`], aligned to
    /// [`FusionNet::params`].
    pub fn gradients(&self, batch: &BTreeMap<SourceId, Matrix>, targets: &[f64]) -> Result<Vec<Vec<f64>>, FusionError> {
        self.loss_and_grads(batch, targets, None).map(|(_, g, _)| g)
    }

    pub(crate) fn update_running_stats(&mut self, stats: &[Option<(Vec<f64>, Vec<f64>)>], rows: usize) {
        for (b, s) in self.branches.iter_mut().zip(stats) {
            if let (Norm::Batch(bn), Some((mean, var))) = (&mut b.norm, s) {
                let cache = NormCache {
                    xhat: Matrix::zeros(0, 0),
                    inv_std: Vec::new(),
                    batch_mean: mean.clone(),
                    batch_var: var.clone(),
                };
                bn.update_running(&cache, rows);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fusion net serializes")
    }

    pub fn from_json(s: &str) -> Result<FusionNet, FusionError> {
        let net: FusionNet = serde_json::from_str(s)?;
        if net.version != FORMAT_VERSION {
            return Err(FusionError::BadVersion(net.version));
        }
        Ok(net)
    }
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over every parameter, `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(
    net: &FusionNet,
    batch: &BTreeMap<SourceId, Matrix>,
    targets: &[f64],
    epsilon: f64,
) -> Result<f64, FusionError> {
    let analytic = net.gradients(batch, targets)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (p, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = probe.params()[p][k];
            probe.params_mut()[p][k] = orig + epsilon;
            let plus = probe.train_loss(batch, targets)?;
            probe.params_mut()[p][k] = orig - epsilon;
            let minus = probe.train_loss(batch, targets)?;
            probe.params_mut()[p][k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Eval-mode predictions mapped back to raw counts, clamped at zero.
pub fn predict_fusion(net: &FusionNet, inputs: &BTreeMap<SourceId, Matrix>) -> Result<Vec<f64>, FusionError> {
    Ok(net
        .forward(inputs, Mode::Eval)?
        .into_iter()
        .map(crate::gbdt::to_raw_scale)
        .collect())
}

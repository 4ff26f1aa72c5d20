use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Matrix;
use super::{Dropout, FusionError, FusionNet, Mode};
use crate::ingest::{EmbeddingSet, SourceId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_frac: f64,
    pub dropout: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            val_frac: 0.2,
            dropout: 0.3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::BadConfig(m.to_string()));
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if !(self.val_frac > 0.0 && self.val_frac <= 0.5) {
            return bad("validation fraction must lie in (0, 0.5]");
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return bad("batch size and max epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("Adam moments must lie in [0, 1) with positive epsilon");
        }
        Ok(())
    }
}

/// Row-aligned embedding matrices for the sources a net consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionData {
    pub row_ids: Vec<String>,
    pub inputs: BTreeMap<SourceId, Matrix>,
}

impl FusionData {
    /// Gathers vectors for `ids` in order. Rows missing any requested source
    /// are left out and returned separately.
    pub fn from_embeddings(
        ids: &[String],
        embeddings: &BTreeMap<SourceId, EmbeddingSet>,
        sources: &[SourceId],
    ) -> (FusionData, Vec<String>) {
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for id in ids {
            let complete = sources
                .iter()
                .all(|s| embeddings.get(s).is_some_and(|e| e.vectors.contains_key(id)));
            if complete {
                kept.push(id.clone());
            } else {
                dropped.push(id.clone());
            }
        }
        let inputs = sources
            .iter()
            .filter_map(|s| embeddings.get(s).map(|e| (*s, e)))
            .map(|(s, e)| {
                let mut data = Vec::with_capacity(kept.len() * e.dim);
                for id in &kept {
                    data.extend_from_slice(&e.vectors[id]);
                }
                (s, Matrix::from_vec(kept.len(), e.dim, data))
            })
            .collect();
        (FusionData { row_ids: kept, inputs }, dropped)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn select(&self, idx: &[usize]) -> FusionData {
        FusionData {
            row_ids: idx.iter().map(|&i| self.row_ids[i].clone()).collect(),
            inputs: self.inputs.iter().map(|(s, m)| (*s, m.select_rows(idx))).collect(),
        }
    }

    pub fn restrict(&self, sources: &[SourceId]) -> FusionData {
        FusionData {
            row_ids: self.row_ids.clone(),
            inputs: self
                .inputs
                .iter()
                .filter(|(s, _)| sources.contains(s))
                .map(|(s, m)| (*s, m.clone()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub fn adam_step(params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], state: &mut AdamState, cfg: &TrainConfig) {
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: FusionNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Shuffled mini-batches; a trailing batch of one row joins its predecessor
/// so batch statistics are never degenerate.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn eval_mse(net: &FusionNet, data: &FusionData, targets: &[f64]) -> Result<f64, FusionError> {
    let pred = net.forward(&data.inputs, Mode::Eval)?;
    Ok(pred.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}

/// Adam on mean squared error in the transformed space with early stopping on
/// a seeded validation split. The returned net carries the parameters of the
/// best validation epoch.
pub fn train_fusion(
    mut net: FusionNet,
    data: &FusionData,
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, FusionError> {
    cfg.validate()?;
    let n = data.n_rows();
    if targets.len() != n {
        return Err(FusionError::RowMismatch);
    }
    let n_val = (n as f64 * cfg.val_frac).round() as usize;
    if n_val < 2 || n - n_val < 2 {
        return Err(FusionError::TooFewRows {
            rows: n,
            needed: (2.0 / cfg.val_frac).ceil() as usize,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let (val_idx, train_idx) = perm.split_at(n_val);
    let val = data.select(val_idx);
    let train = data.select(train_idx);
    let y_val: Vec<f64> = val_idx.iter().map(|&i| targets[i]).collect();
    let y_train: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();

    let mut adam = AdamState::default();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.clone());
    let mut order: Vec<usize> = (0..train.n_rows()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum_loss = 0.0;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let xb = train.select(idx);
            let yb: Vec<f64> = idx.iter().map(|&i| y_train[i]).collect();
            let dropout = (cfg.dropout > 0.0).then_some(Dropout {
                rate: cfg.dropout,
                rng: &mut rng,
            });
            let (loss, grads, stats) = net.loss_and_grads(&xb.inputs, &yb, dropout)?;
            if !loss.is_finite() {
                return Err(FusionError::DivergedLoss { epoch, batch: b, loss });
            }
            sum_loss += loss * idx.len() as f64;
            adam_step(net.params_mut(), &grads, &mut adam, cfg);
            net.update_running_stats(&stats, idx.len());
        }
        let val_mse = eval_mse(&net, &val, &y_val)?;
        if !val_mse.is_finite() {
            return Err(FusionError::DivergedLoss {
                epoch,
                batch: usize::MAX,
                loss: val_mse,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_mse: sum_loss / train.n_rows() as f64,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, epoch, net.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }

    let (best_val_mse, best_epoch, net) = best;
    Ok(TrainOutcome {
        net,
        history,
        best_epoch,
        best_val_mse,
        train_ids: train.row_ids,
        val_ids: val.row_ids,
    })
}

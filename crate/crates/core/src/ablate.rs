//! Embedding-source ablation: train a fusion net per (source subset, target)
//! and tabulate holdout MAPE.
//!
//! Each cell draws its seed from a hash of (run seed, label, target), so
//! cells can run in any order, in parallel, or across restarts. Completed
//! cells are checkpointed one JSON file each.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluate::{holdout_split, mape};
use crate::fusion::{build_fusion_net, predict_fusion, train_fusion, BranchSpec, FusionData, TrainConfig};
use crate::ingest::{DatasetBundle, EmbeddingSet, SourceId, Target};
use crate::par::Exec;
use crate::textfmt::format_pct;

#[derive(Debug, thiserror::Error)]
pub enum AblateError {
    #[error("bad subset label {0:?}; expected ids 1-6 joined by '+'")]
    BadLabel(String),
    #[error("subset {label:?} lists source {id} twice")]
    DuplicateSource { label: String, id: u8 },
    #[error("subset {label:?} needs source {source_id}, which the bundle does not provide")]
    MissingSource { label: String, source_id: SourceId },
    #[error("no sources available")]
    NoSources,
    #[error("ablation table is empty")]
    EmptyTable,
    #[error("training rows have no targets")]
    MissingTargets,
    #[error("holdout fraction must lie in (0, 1), got {0}")]
    BadHoldout(f64),
    #[error("stopped after {completed} new cells")]
    Interrupted { completed: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("malformed table csv: {0}")]
    BadCsv(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AblateError + '_ {
    move |source| AblateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub sources: Vec<SourceId>,
    pub label: String,
}

impl SubsetSpec {
    /// Canonical subset; `sources` must be non-empty and distinct.
    pub fn from_sources(mut sources: Vec<SourceId>) -> Self {
        sources.sort();
        let label = sources.iter().map(|s| s.get().to_string()).collect::<Vec<_>>().join("+");
        SubsetSpec { sources, label }
    }
}

pub fn parse_subset(label: &str) -> Result<SubsetSpec, AblateError> {
    let bad = || AblateError::BadLabel(label.to_string());
    let mut ids = Vec::new();
    for part in label.trim().split('+') {
        let part = part.trim();
        if part.len() != 1 {
            return Err(bad());
        }
        let id = part.parse::<u8>().ok().and_then(SourceId::new).ok_or_else(bad)?;
        if ids.contains(&id) {
            return Err(AblateError::DuplicateSource {
                label: label.to_string(),
                id: id.get(),
            });
        }
        ids.push(id);
    }
    Ok(SubsetSpec::from_sources(ids))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "labels")]
pub enum SubsetMode {
    All,
    Listed(Vec<String>),
}

/// One label per line; blank lines and `#` comments are skipped.
pub fn read_label_file(path: &Path) -> Result<Vec<String>, AblateError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// `All` gives every non-empty subset ordered by size, then by ids; `Listed`
/// keeps the given order.
pub fn enumerate_subsets(available: &[SourceId], mode: &SubsetMode) -> Result<Vec<SubsetSpec>, AblateError> {
    let mut avail = available.to_vec();
    avail.sort();
    avail.dedup();
    if avail.is_empty() {
        return Err(AblateError::NoSources);
    }
    match mode {
        SubsetMode::All => {
            let k = avail.len();
            let mut out: Vec<SubsetSpec> = (1u32..1 << k)
                .map(|mask| {
                    let picked = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| avail[i]).collect();
                    SubsetSpec::from_sources(picked)
                })
                .collect();
            out.sort_by(|a, b| a.sources.len().cmp(&b.sources.len()).then_with(|| a.sources.cmp(&b.sources)));
            Ok(out)
        }
        SubsetMode::Listed(labels) => labels.iter().map(|l| parse_subset(l)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellValue {
    Mape(f64),
    Failed(String),
}

impl CellValue {
    pub fn mape(&self) -> Option<f64> {
        match self {
            CellValue::Mape(v) => Some(*v),
            CellValue::Failed(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cells: BTreeMap<Target, CellValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub unified_width: usize,
    pub head_widths: Vec<usize>,
    pub holdout_frac: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            unified_width: 256,
            head_widths: vec![512, 128, 32, 1],
            holdout_frac: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub config: Option<AblationConfig>,
    pub rows: Vec<AblationRow>,
}

/// Column order of `ablation.csv`.
pub const TABLE_COLUMNS: [Target; 4] = [Target::Share, Target::Heart, Target::Comment, Target::Play];

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,share,heart,comment,play\n");
        for row in &self.rows {
            out.push_str(&row.label);
            for t in TABLE_COLUMNS {
                out.push(',');
                match row.cells.get(&t) {
                    Some(CellValue::Mape(v)) => out.push_str(&format_pct(*v)),
                    Some(CellValue::Failed(_)) => out.push_str("error"),
                    None => {}
                }
            }
            out.push('\n');
        }
        out
    }

    /// Reads the `ablation.csv` layout. Empty cells are treated as not run.
    pub fn from_csv(text: &str) -> Result<AblationTable, AblateError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| AblateError::BadCsv("empty input".into()))?;
        if header.trim() != "label,share,heart,comment,play" {
            return Err(AblateError::BadCsv(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(AblateError::BadCsv(format!("expected 5 fields in {line:?}")));
            }
            let label = parse_subset(fields[0])?.label;
            let mut cells = BTreeMap::new();
            for (t, f) in TABLE_COLUMNS.into_iter().zip(&fields[1..]) {
                match *f {
                    "" => {}
                    "error" => {
                        cells.insert(t, CellValue::Failed("error".into()));
                    }
                    v => {
                        let x = v
                            .parse::<f64>()
                            .map_err(|_| AblateError::BadCsv(format!("bad value {v:?}")))?;
                        cells.insert(t, CellValue::Mape(x));
                    }
                }
            }
            rows.push(AblationRow { label, cells });
        }
        Ok(AblationTable {
            seed: 0,
            config: None,
            rows,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub label: String,
    pub mape: f64,
}

/// Lowest MAPE per target. Equal values resolve to the label that sorts
/// first as a string. Targets with no successful cell are absent.
pub fn highlight_best(table: &AblationTable) -> Result<BTreeMap<Target, BestCell>, AblateError> {
    if table.rows.is_empty() {
        return Err(AblateError::EmptyTable);
    }
    let mut best: BTreeMap<Target, BestCell> = BTreeMap::new();
    for row in &table.rows {
        for (t, cell) in &row.cells {
            let Some(v) = cell.mape() else { continue };
            let better = best
                .get(t)
                .is_none_or(|b| v < b.mape || (v == b.mape && row.label < b.label));
            if better {
                best.insert(
                    *t,
                    BestCell {
                        label: row.label.clone(),
                        mape: v,
                    },
                );
            }
        }
    }
    Ok(best)
}

/// Training rows of a bundle with raw targets, shared by every cell.
#[derive(Clone, Debug)]
pub struct AblationInput {
    pub row_ids: Vec<String>,
    pub targets: BTreeMap<Target, Vec<f64>>,
    pub embeddings: BTreeMap<SourceId, EmbeddingSet>,
}

impl AblationInput {
    pub fn from_bundle(bundle: &DatasetBundle) -> Result<Self, AblateError> {
        let mut targets = BTreeMap::new();
        for t in Target::ALL {
            targets.insert(t, bundle.train.target_column(t).ok_or(AblateError::MissingTargets)?);
        }
        Ok(AblationInput {
            row_ids: bundle.train.ids().map(String::from).collect(),
            targets,
            embeddings: bundle.embeddings.clone(),
        })
    }

    pub fn sources(&self) -> Vec<SourceId> {
        self.embeddings.keys().copied().collect()
    }

    /// Digest of ids, targets and vectors, so checkpoints from different data
    /// are never reused.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.row_ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        for (t, ys) in &self.targets {
            h.update(t.name().as_bytes());
            ys.iter().for_each(|y| h.update(y.to_le_bytes()));
        }
        for (s, e) in &self.embeddings {
            h.update([s.get()]);
            for (id, v) in &e.vectors {
                h.update(id.as_bytes());
                v.iter().for_each(|x| h.update(x.to_le_bytes()));
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Seed for one cell, independent of which other cells run.
pub fn cell_seed(seed: u64, label: &str, target: Target) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(target.name().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub exec: Exec,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop with [`AblateError::Interrupted`] once this many new cells are
    /// done; used to exercise resumption.
    pub cell_limit: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    label: String,
    target: Target,
    seed: u64,
    value: CellValue,
}

fn checkpoint_path(dir: &Path, label: &str, target: Target) -> PathBuf {
    dir.join(format!("{label}_{}.json", target.name()))
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), AblateError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Grid<'a> {
    input: &'a AblationInput,
    index: BTreeMap<&'a str, usize>,
    fit_ids: Vec<String>,
    holdout_ids: Vec<String>,
    cfg: &'a AblationConfig,
}

fn run_cell(grid: &Grid<'_>, subset: &SubsetSpec, target: Target, seed: u64) -> CellValue {
    let Grid {
        input,
        index,
        fit_ids,
        holdout_ids,
        cfg,
    } = grid;
    let attempt = || -> Result<f64, String> {
        let raw = &input.targets[&target];
        let (train, _) = FusionData::from_embeddings(fit_ids, &input.embeddings, &subset.sources);
        let y: Vec<f64> = train.row_ids.iter().map(|id| raw[index[id.as_str()]].ln_1p()).collect();
        let specs: Vec<BranchSpec> = subset
            .sources
            .iter()
            .map(|s| BranchSpec::new(*s, input.embeddings[s].dim, cfg.unified_width))
            .collect();
        let net = build_fusion_net(&specs, &cfg.head_widths, seed).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let out = train_fusion(net, &train, &y, &tc).map_err(|e| e.to_string())?;
        let (hold, _) = FusionData::from_embeddings(holdout_ids, &input.embeddings, &subset.sources);
        if hold.n_rows() == 0 {
            return Err("no holdout rows carry every source".into());
        }
        let pred = predict_fusion(&out.net, &hold.inputs).map_err(|e| e.to_string())?;
        let truth: Vec<f64> = hold.row_ids.iter().map(|id| raw[index[id.as_str()]]).collect();
        let m = mape(&truth, &pred).map_err(|e| e.to_string())?;
        if m.is_finite() {
            Ok(m)
        } else {
            Err(format!("non-finite MAPE {m}"))
        }
    };
    match attempt() {
        Ok(m) => CellValue::Mape(m),
        Err(e) => CellValue::Failed(e),
    }
}

/// Trains and scores every (subset, target) cell. Failed cells are recorded
/// in the table rather than aborting the grid.
pub fn run_ablation(
    input: &AblationInput,
    subsets: &[SubsetSpec],
    targets: &[Target],
    cfg: &AblationConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<AblationTable, AblateError> {
    if !(cfg.holdout_frac > 0.0 && cfg.holdout_frac < 1.0) {
        return Err(AblateError::BadHoldout(cfg.holdout_frac));
    }
    for s in subsets {
        if let Some(&missing) = s.sources.iter().find(|id| !input.embeddings.contains_key(id)) {
            return Err(AblateError::MissingSource {
                label: s.label.clone(),
                source_id: missing,
            });
        }
    }

    let (fit_idx, hold_idx) = holdout_split(input.row_ids.len(), cfg.holdout_frac, seed);
    let grid = Grid {
        input,
        index: input.row_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect(),
        fit_ids: fit_idx.iter().map(|&i| input.row_ids[i].clone()).collect(),
        holdout_ids: hold_idx.iter().map(|&i| input.row_ids[i].clone()).collect(),
        cfg,
    };

    let fingerprint = {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
        h.update(seed.to_le_bytes());
        h.update(input.digest().as_bytes());
        hex(&h.finalize())
    };

    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut done: BTreeMap<(String, Target), CellValue> = BTreeMap::new();
    let mut pending = Vec::new();
    for s in subsets {
        for &t in targets {
            let reused = opts.checkpoint_dir.as_ref().and_then(|dir| {
                let text = fs::read_to_string(checkpoint_path(dir, &s.label, t)).ok()?;
                let cp: Checkpoint = serde_json::from_str(&text).ok()?;
                (cp.fingerprint == fingerprint).then_some(cp.value)
            });
            match reused {
                Some(v) => {
                    done.insert((s.label.clone(), t), v);
                }
                None => pending.push((s, t)),
            }
        }
    }
    pending.dedup_by(|a, b| a.0.label == b.0.label && a.1 == b.1);
    let interrupted = opts.cell_limit.is_some_and(|n| n < pending.len());
    if let Some(n) = opts.cell_limit {
        pending.truncate(n);
    }

    let results = opts.exec.map(&pending, |(s, t)| {
        let cs = cell_seed(seed, &s.label, *t);
        let value = run_cell(&grid, s, *t, cs);
        if let Some(dir) = &opts.checkpoint_dir {
            let cp = Checkpoint {
                fingerprint: fingerprint.clone(),
                label: s.label.clone(),
                target: *t,
                seed: cs,
                value: value.clone(),
            };
            let text = serde_json::to_string_pretty(&cp).expect("checkpoint serializes");
            write_atomic(&checkpoint_path(dir, &s.label, *t), &text)?;
        }
        Ok::<_, AblateError>(value)
    });
    for ((s, t), r) in pending.iter().zip(results) {
        done.insert((s.label.clone(), *t), r?);
    }
    if interrupted {
        return Err(AblateError::Interrupted {
            completed: pending.len(),
        });
    }

    let rows = subsets
        .iter()
        .map(|s| AblationRow {
            label: s.label.clone(),
            cells: targets
                .iter()
                .map(|&t| (t, done[&(s.label.clone(), t)].clone()))
                .collect(),
        })
        .collect();
    Ok(AblationTable {
        seed,
        config: Some(cfg.clone()),
        rows,
    })
}

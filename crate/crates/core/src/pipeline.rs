//! Run-directory orchestration behind the `popfusion` command line.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.json                      seed, manifest, input digests, resolved config
//! prep/                         pipeline.json, median_stats.json, frequency.json,
//!                               features_{train,test}.csv, iqr_keep.csv, prep_report.json
//! models/                       gbdt_<target>.json, fusion_<target>.json
//! predictions_<split>.csv       video_id,target,pred_tabular,pred_fusion,pred_ensemble
//! ablation/cells/               one checkpoint per (subset, target)
//! reports/                      metrics_*.json, leaderboard.{csv,txt}, density.csv,
//!                               importance_<target>.csv, ablation.{csv,json}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::ablate::{
    enumerate_subsets, highlight_best, read_label_file, run_ablation, AblateError, AblationConfig, AblationInput,
    RunOptions, SubsetMode,
};
use crate::evaluate::{
    average_ensemble_in, density_export, holdout_split, leaderboard_report, AverageSpace, DensitySeries, EvalError,
    MetricReport, Predictions, TargetMetrics,
};
use crate::features::{
    assemble_feature_matrix, iqr_bounds, iqr_keep_rows, DaypartHours, FeatureError, FeatureMatrix, FeaturePipeline,
    FrequencyCorpus,
};
use crate::fusion::{
    build_fusion_net, predict_fusion, train_fusion, BranchSpec, FusionData, FusionError, FusionNet, TrainConfig,
};
use crate::gbdt::{
    feature_importance, fit_gbdt_raw, predict_gbdt_raw, tune_gbdt, GbdtError, GbdtParams, SearchSpace, TreeEnsemble,
};
use crate::ingest::{generate_synthetic, validate_bundle_exec, write_bundle, DatasetBundle, IngestError, SynthConfig};
use crate::par::Exec;
use crate::textfmt::format_f64;
use crate::Target;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    State,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::State => 3,
            ErrorKind::Numeric => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Input => "input",
            ErrorKind::State => "state",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub kind: ErrorKind,
    pub message: String,
    pub hint: Option<String>,
}

impl PipelineError {
    pub fn input(message: impl Into<String>) -> Self {
        PipelineError {
            kind: ErrorKind::Input,
            message: message.into(),
            hint: None,
        }
    }

    pub fn state(message: impl Into<String>, hint: impl Into<String>) -> Self {
        PipelineError {
            kind: ErrorKind::State,
            message: message.into(),
            hint: Some(hint.into()),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        PipelineError {
            kind: ErrorKind::Numeric,
            message: message.into(),
            hint: None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn to_json(&self) -> String {
        let v = json!({
            "exit_code": self.exit_code(),
            "kind": self.kind.name(),
            "message": self.message,
            "hint": self.hint,
        });
        serde_json::to_string_pretty(&v).expect("error serializes") + "\n"
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for PipelineError {}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::input(e.to_string())
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::DomainError(_) => PipelineError::numeric(e.to_string()),
            _ => PipelineError::input(e.to_string()),
        }
    }
}

impl From<GbdtError> for PipelineError {
    fn from(e: GbdtError) -> Self {
        match e {
            GbdtError::Eval(_) => PipelineError::numeric(e.to_string()),
            GbdtError::Json(_) => PipelineError::state(e.to_string(), "rerun `popfusion train-tabular`"),
            _ => PipelineError::input(e.to_string()),
        }
    }
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::DivergedLoss { .. } => PipelineError::numeric(e.to_string()),
            FusionError::Json(_) | FusionError::BadVersion(_) => {
                PipelineError::state(e.to_string(), "rerun `popfusion train-fusion`")
            }
            _ => PipelineError::input(e.to_string()),
        }
    }
}

impl From<AblateError> for PipelineError {
    fn from(e: AblateError) -> Self {
        match e {
            AblateError::Interrupted { .. } => {
                PipelineError::state(e.to_string(), "rerun `popfusion ablate` to resume from checkpoints")
            }
            _ => PipelineError::input(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::numeric(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub unified_width: usize,
    pub head_widths: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            unified_width: 256,
            head_widths: vec![512, 128, 32, 1],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    All,
    Listed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub mode: AblationMode,
    /// Label file for `listed` mode; ignored when `labels` is non-empty.
    pub labels_file: Option<PathBuf>,
    pub labels: Vec<String>,
    pub targets: Vec<Target>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            mode: AblationMode::All,
            labels_file: None,
            labels: Vec::new(),
            targets: Target::ALL.to_vec(),
        }
    }
}

/// Overrides read from `--config`; every field is optional in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Falls back to the manifest's hours, then to the built-in buckets.
    pub daypart: Option<DaypartHours>,
    pub iqr_k: f64,
    pub holdout_frac: f64,
    pub frequency_corpus: FrequencyCorpus,
    pub gbdt: GbdtParams,
    pub search_space: SearchSpace,
    /// Random-search trials per target; 0 trains with `gbdt` as given.
    pub tune_budget: usize,
    pub cv_folds: usize,
    pub fusion: FusionSettings,
    pub ablation: AblationSettings,
    pub ensemble_space: AverageSpace,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            daypart: None,
            iqr_k: 1.5,
            holdout_frac: 0.2,
            frequency_corpus: FrequencyCorpus::All,
            gbdt: GbdtParams::default(),
            search_space: SearchSpace::default(),
            tune_budget: 20,
            cv_folds: 10,
            fusion: FusionSettings::default(),
            ablation: AblationSettings::default(),
            ensemble_space: AverageSpace::Raw,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::input(format!("{}: {e}", path.display())))
    }

    fn prep_key(&self) -> (Option<DaypartHours>, u64, u64, FrequencyCorpus) {
        (
            self.daypart,
            self.iqr_k.to_bits(),
            self.holdout_frac.to_bits(),
            self.frequency_corpus,
        )
    }

    fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            train: self.fusion.train.clone(),
            unified_width: self.fusion.unified_width,
            head_widths: self.fusion.head_widths.clone(),
            holdout_frac: self.holdout_frac,
        }
    }
}

/// Arguments shared by every run-directory command.
#[derive(Clone, Debug)]
pub struct RunArgs {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub exec: Exec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
    Test,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub manifest: PathBuf,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

struct RunDir(PathBuf);

impl RunDir {
    fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::input(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

fn read_required(path: &Path, hint: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|_| PipelineError::state(format!("missing {}", path.display()), hint))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn input_digests(bundle: &DatasetBundle) -> Result<BTreeMap<String, String>> {
    let base = bundle.manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut out = BTreeMap::new();
    out.insert("manifest".to_string(), sha256_file(&bundle.manifest_path)?);
    out.insert("train_csv".to_string(), sha256_file(&resolve(&bundle.manifest.train_csv))?);
    out.insert("test_csv".to_string(), sha256_file(&resolve(&bundle.manifest.test_csv))?);
    for (k, p) in &bundle.manifest.embeddings {
        out.insert(format!("embeddings_{k}"), sha256_file(&resolve(p))?);
    }
    Ok(out)
}

/// Derived seed for one named step of a run.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

const PREP_HINT: &str = "run `popfusion prepare --manifest <file> --out <dir> --seed <n>` first";

struct Context {
    dir: RunDir,
    seed: u64,
    config: RunConfig,
    bundle: DatasetBundle,
    exec: Exec,
    x_train: FeatureMatrix,
    x_test: FeatureMatrix,
    /// Training rows that survived the outlier filter, split in two.
    fit_idx: Vec<usize>,
    holdout_idx: Vec<usize>,
}

impl Context {
    fn open(args: &RunArgs) -> Result<Context> {
        let dir = RunDir(args.out.clone());
        let run_json = dir.path("run.json");
        let text = read_required(&run_json, PREP_HINT)?;
        let mut record: RunRecord = serde_json::from_str(&text)
            .map_err(|e| PipelineError::state(format!("{}: {e}", run_json.display()), PREP_HINT))?;
        if record.seed != args.seed {
            return Err(PipelineError::state(
                format!("--seed {} differs from the run's seed {}", args.seed, record.seed),
                "pass the seed used for `prepare`, or prepare a new run directory",
            ));
        }
        let manifest = args.manifest.clone().unwrap_or_else(|| record.manifest.clone());
        let bundle = validate_bundle_exec(&manifest, args.exec)?;
        if input_digests(&bundle)? != record.inputs {
            return Err(PipelineError::state(
                "input files changed since `prepare`",
                "rerun `popfusion prepare` on the current inputs",
            ));
        }
        if let Some(path) = &args.config {
            let config = RunConfig::load(path)?;
            if config.prep_key() != record.config.prep_key() {
                return Err(PipelineError::state(
                    "config changes preparation settings (daypart, iqr_k, holdout_frac, frequency_corpus)",
                    "rerun `popfusion prepare` with this config",
                ));
            }
            if config != record.config {
                record.config = config;
                write_json(&run_json, &record)?;
            }
        }

        let read_matrix = |name: &str| -> Result<FeatureMatrix> {
            let path = dir.path(name);
            let file = fs::File::open(&path)
                .map_err(|_| PipelineError::state(format!("missing {}", path.display()), PREP_HINT))?;
            FeatureMatrix::read_csv(BufReader::new(file))
                .map_err(|e| PipelineError::state(format!("{}: {e}", path.display()), PREP_HINT))
        };
        let x_train = read_matrix("prep/features_train.csv")?;
        let x_test = read_matrix("prep/features_test.csv")?;
        let keep_text = read_required(&dir.path("prep/iqr_keep.csv"), PREP_HINT)?;
        let keep: Vec<bool> = keep_text.lines().skip(1).map(|l| l.ends_with(",1")).collect();
        if keep.len() != bundle.train.len() || x_train.n_rows() != bundle.train.len() {
            return Err(PipelineError::state("prep artifacts do not match the training table", PREP_HINT));
        }
        let kept: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        let (fit, hold) = holdout_split(kept.len(), record.config.holdout_frac, record.seed);
        Ok(Context {
            dir,
            seed: record.seed,
            config: record.config,
            bundle,
            exec: args.exec,
            x_train,
            x_test,
            fit_idx: fit.iter().map(|&i| kept[i]).collect(),
            holdout_idx: hold.iter().map(|&i| kept[i]).collect(),
        })
    }

    fn ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.bundle.train.rows[i].video_id.clone()).collect()
    }

    fn raw_targets(&self, t: Target, idx: &[usize]) -> Result<Vec<f64>> {
        let col = self
            .bundle
            .train
            .target_column(t)
            .ok_or_else(|| PipelineError::input("training table has no targets"))?;
        Ok(idx.iter().map(|&i| col[i]).collect())
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub missing_embedding_frac: f64,
    pub outlier_frac: f64,
    pub test_targets: bool,
}

/// Writes a synthetic bundle and returns its manifest path.
pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut cfg = SynthConfig::new(args.seed, args.n_train, args.n_test, args.dim);
    cfg.missing_embedding_frac = args.missing_embedding_frac;
    cfg.outlier_frac = args.outlier_frac;
    cfg.test_targets = args.test_targets;
    let bundle = generate_synthetic(&cfg)?;
    Ok(write_bundle(&bundle, &args.out)?)
}

pub fn cmd_prepare(args: &RunArgs) -> Result<()> {
    let manifest = args
        .manifest
        .clone()
        .ok_or_else(|| PipelineError::input("`prepare` needs --manifest"))?;
    let config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !(config.holdout_frac > 0.0 && config.holdout_frac < 1.0) {
        return Err(PipelineError::input("holdout_frac must lie in (0, 1)"));
    }
    let bundle = validate_bundle_exec(&manifest, args.exec)?;
    let daypart = config.daypart.or(bundle.manifest.daypart).unwrap_or_default();
    let pipeline = FeaturePipeline::fit(&bundle.train, &bundle.test, config.frequency_corpus, daypart)?;
    let x_train = assemble_feature_matrix(&bundle.train, &pipeline, args.exec)?;
    let x_test = assemble_feature_matrix(&bundle.test, &pipeline, args.exec)?;
    let keep = iqr_keep_rows(&bundle.train, config.iqr_k)?;

    let dir = RunDir(args.out.clone());
    write_json(&dir.path("prep/pipeline.json"), &pipeline)?;
    write_json(&dir.path("prep/median_stats.json"), &pipeline.medians)?;
    write_json(&dir.path("prep/frequency.json"), &pipeline.frequencies)?;
    for (name, x) in [("prep/features_train.csv", &x_train), ("prep/features_test.csv", &x_test)] {
        let mut buf = Vec::new();
        x.write_csv(&mut buf).expect("writing to memory");
        write_text(&dir.path(name), &String::from_utf8(buf).expect("csv is utf-8"))?;
    }
    let mut keep_csv = String::from("video_id,keep\n");
    for (r, k) in bundle.train.rows.iter().zip(&keep) {
        keep_csv.push_str(&format!("{},{}\n", r.video_id, u8::from(*k)));
    }
    write_text(&dir.path("prep/iqr_keep.csv"), &keep_csv)?;

    let mut bounds = BTreeMap::new();
    for t in Target::ALL {
        let col = bundle.train.target_column(t).ok_or(FeatureError::EmptyTable)?;
        let (lo, hi) = iqr_bounds(&col, config.iqr_k)?;
        bounds.insert(t, json!({ "lower": lo, "upper": hi }));
    }
    let dropped: Vec<&str> = bundle
        .train
        .rows
        .iter()
        .zip(&keep)
        .filter(|(_, k)| !**k)
        .map(|(r, _)| r.video_id.as_str())
        .collect();
    let coverage: BTreeMap<String, _> = bundle
        .coverage
        .iter()
        .map(|(s, c)| {
            (
                s.get().to_string(),
                json!({
                    "name": s.name(),
                    "missing_train": c.missing_train.len(),
                    "missing_test": c.missing_test.len(),
                    "missing_frac": c.missing_frac,
                }),
            )
        })
        .collect();
    let report = json!({
        "rows_train": bundle.train.len(),
        "rows_test": bundle.test.len(),
        "rows_kept": bundle.train.len() - dropped.len(),
        "rows_dropped": dropped.len(),
        "dropped_ids": dropped,
        "iqr_k": config.iqr_k,
        "iqr_bounds": bounds,
        "daypart": daypart,
        "embedding_coverage": coverage,
    });
    write_json(&dir.path("prep/prep_report.json"), &report)?;

    let record = RunRecord {
        seed: args.seed,
        manifest,
        inputs: input_digests(&bundle)?,
        config,
    };
    write_json(&dir.path("run.json"), &record)
}

pub fn cmd_train_tabular(args: &RunArgs) -> Result<()> {
    let ctx = Context::open(args)?;
    let x_fit = ctx.x_train.select_rows(&ctx.fit_idx);
    let x_hold = ctx.x_train.select_rows(&ctx.holdout_idx);
    let mut per_target = BTreeMap::new();
    for t in Target::ALL {
        let y_fit = ctx.raw_targets(t, &ctx.fit_idx)?;
        let (mut params, tuning) = if ctx.config.tune_budget == 0 {
            (ctx.config.gbdt.clone(), json!("skipped: tune_budget is 0, configured parameters used"))
        } else {
            let res = tune_gbdt(
                &x_fit,
                &y_fit,
                &ctx.config.search_space,
                ctx.config.tune_budget,
                ctx.config.cv_folds,
                sub_seed(ctx.seed, &format!("tune/{t}")),
                ctx.exec,
            )?;
            let trials = serde_json::to_value(&res.trials).expect("trials serialize");
            (res.best, json!({ "best_index": res.best_index, "trials": trials }))
        };
        params.seed = sub_seed(ctx.seed, &format!("gbdt/{t}"));
        let model = fit_gbdt_raw(&x_fit, &y_fit, &params, ctx.exec)?;
        write_text(&ctx.dir.path(&format!("models/gbdt_{t}.json")), &model.to_json())?;
        let holdout = if ctx.holdout_idx.is_empty() {
            None
        } else {
            let pred = predict_gbdt_raw(&model, &x_hold)?;
            Some(TargetMetrics::compute(&ctx.raw_targets(t, &ctx.holdout_idx)?, &pred)?)
        };
        per_target.insert(t, json!({ "params": params, "tuning": tuning, "holdout": holdout }));
    }
    let report = json!({
        "label": "Tabular",
        "rows_fit": ctx.fit_idx.len(),
        "rows_holdout": ctx.holdout_idx.len(),
        "targets": per_target,
    });
    write_json(&ctx.dir.path("reports/metrics_tabular.json"), &report)
}

pub fn cmd_train_fusion(args: &RunArgs) -> Result<()> {
    let ctx = Context::open(args)?;
    let sources = ctx.bundle.sources();
    if sources.is_empty() {
        let report = json!({ "label": "Video", "skipped": "bundle declares no embedding sources" });
        return write_json(&ctx.dir.path("reports/metrics_fusion.json"), &report);
    }
    let specs: Vec<BranchSpec> = sources
        .iter()
        .map(|s| BranchSpec::new(*s, ctx.bundle.embeddings[s].dim, ctx.config.fusion.unified_width))
        .collect();
    let fit_ids = ctx.ids(&ctx.fit_idx);
    let (data, dropped) = FusionData::from_embeddings(&fit_ids, &ctx.bundle.embeddings, &sources);
    let hold_ids = ctx.ids(&ctx.holdout_idx);
    let (hold, _) = FusionData::from_embeddings(&hold_ids, &ctx.bundle.embeddings, &sources);
    let row_of: BTreeMap<&str, usize> = ctx.bundle.train.ids().enumerate().map(|(i, id)| (id, i)).collect();
    let idx_of = |ids: &[String]| -> Vec<usize> { ids.iter().map(|id| row_of[id.as_str()]).collect() };

    let results = ctx.exec.map(&Target::ALL, |&t| -> Result<(Target, FusionNet, serde_json::Value)> {
        let y: Vec<f64> = ctx.raw_targets(t, &idx_of(&data.row_ids))?.iter().map(|v| v.ln_1p()).collect();
        let seed = sub_seed(ctx.seed, &format!("fusion/{t}"));
        let net = build_fusion_net(&specs, &ctx.config.fusion.head_widths, seed)?;
        let cfg = TrainConfig {
            seed,
            ..ctx.config.fusion.train.clone()
        };
        let out = train_fusion(net, &data, &y, &cfg)?;
        let holdout = if hold.n_rows() == 0 {
            None
        } else {
            let pred = predict_fusion(&out.net, &hold.inputs)?;
            Some(TargetMetrics::compute(&ctx.raw_targets(t, &idx_of(&hold.row_ids))?, &pred)?)
        };
        let info = json!({
            "best_epoch": out.best_epoch,
            "best_val_mse": out.best_val_mse,
            "epochs_run": out.history.len(),
            "history": out.history,
            "holdout": holdout,
        });
        Ok((t, out.net, info))
    });
    let mut per_target = BTreeMap::new();
    for r in results {
        let (t, net, info) = r?;
        write_text(&ctx.dir.path(&format!("models/fusion_{t}.json")), &net.to_json())?;
        per_target.insert(t, info);
    }
    let report = json!({
        "label": "Video",
        "sources": sources.iter().map(|s| s.get()).collect::<Vec<_>>(),
        "rows_fit": data.n_rows(),
        "rows_holdout": hold.n_rows(),
        "dropped_missing_embeddings": dropped,
        "targets": per_target,
    });
    write_json(&ctx.dir.path("reports/metrics_fusion.json"), &report)
}

pub fn cmd_ablate(args: &RunArgs, cell_limit: Option<usize>) -> Result<()> {
    let ctx = Context::open(args)?;
    if ctx.bundle.embeddings.is_empty() {
        return Err(PipelineError::input("bundle declares no embedding sources to ablate"));
    }
    let mut kept: Vec<usize> = ctx.fit_idx.iter().chain(&ctx.holdout_idx).copied().collect();
    kept.sort_unstable();
    let mut targets = BTreeMap::new();
    for t in Target::ALL {
        targets.insert(t, ctx.raw_targets(t, &kept)?);
    }
    let input = AblationInput {
        row_ids: ctx.ids(&kept),
        targets,
        embeddings: ctx.bundle.embeddings.clone(),
    };
    let settings = &ctx.config.ablation;
    let mode = match settings.mode {
        AblationMode::All => SubsetMode::All,
        AblationMode::Listed if !settings.labels.is_empty() => SubsetMode::Listed(settings.labels.clone()),
        AblationMode::Listed => {
            let path = settings
                .labels_file
                .as_ref()
                .ok_or_else(|| PipelineError::input("listed ablation needs `labels` or `labels_file`"))?;
            SubsetMode::Listed(read_label_file(path)?)
        }
    };
    let subsets = enumerate_subsets(&input.sources(), &mode)?;
    let opts = RunOptions {
        exec: ctx.exec,
        checkpoint_dir: Some(ctx.dir.path("ablation/cells")),
        cell_limit,
    };
    let table = run_ablation(&input, &subsets, &settings.targets, &ctx.config.ablation_config(), ctx.seed, &opts)?;
    write_text(&ctx.dir.path("reports/ablation.csv"), &table.to_csv())?;
    write_json(&ctx.dir.path("reports/ablation.json"), &table)?;
    write_json(&ctx.dir.path("reports/ablation_best.json"), &highlight_best(&table)?)
}

/// One row of a predictions file.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub video_id: String,
    pub target: Target,
    pub tabular: f64,
    pub fusion: Option<f64>,
    pub ensemble: f64,
}

struct Models {
    gbdt: BTreeMap<Target, TreeEnsemble>,
    fusion: Option<BTreeMap<Target, FusionNet>>,
}

fn load_models(ctx: &Context) -> Result<Models> {
    let mut gbdt = BTreeMap::new();
    for t in Target::ALL {
        let text = read_required(
            &ctx.dir.path(&format!("models/gbdt_{t}.json")),
            "run `popfusion train-tabular` first",
        )?;
        gbdt.insert(t, TreeEnsemble::from_json(&text)?);
    }
    let fusion = if ctx.bundle.embeddings.is_empty() {
        None
    } else {
        let mut nets = BTreeMap::new();
        for t in Target::ALL {
            let text = read_required(
                &ctx.dir.path(&format!("models/fusion_{t}.json")),
                "run `popfusion train-fusion` first",
            )?;
            nets.insert(t, FusionNet::from_json(&text)?);
        }
        Some(nets)
    };
    Ok(Models { gbdt, fusion })
}

fn predict_matrix(ctx: &Context, models: &Models, x: &FeatureMatrix) -> Result<Vec<PredictionRow>> {
    let ids = &x.row_ids;
    let mut by_target = BTreeMap::new();
    for t in Target::ALL {
        let tab = predict_gbdt_raw(&models.gbdt[&t], x)?;
        let mut fus: Vec<Option<f64>> = vec![None; ids.len()];
        if let Some(nets) = &models.fusion {
            let net = &nets[&t];
            let (data, _) = FusionData::from_embeddings(ids, &ctx.bundle.embeddings, &net.sources());
            if data.n_rows() > 0 {
                let pred = predict_fusion(net, &data.inputs)?;
                let pos: BTreeMap<&str, f64> = data.row_ids.iter().map(String::as_str).zip(pred).collect();
                for (slot, id) in fus.iter_mut().zip(ids) {
                    *slot = pos.get(id.as_str()).copied();
                }
            }
        }
        let both: Vec<usize> = (0..ids.len()).filter(|&i| fus[i].is_some()).collect();
        let a = Predictions {
            row_ids: both.iter().map(|&i| ids[i].clone()).collect(),
            values: both.iter().map(|&i| tab[i]).collect(),
        };
        let b = Predictions {
            row_ids: a.row_ids.clone(),
            values: both.iter().map(|&i| fus[i].expect("filtered")).collect(),
        };
        let avg = average_ensemble_in(&a, &b, ctx.config.ensemble_space)?;
        let mut ens = tab.clone();
        for (&i, v) in both.iter().zip(avg.averaged) {
            ens[i] = v;
        }
        by_target.insert(t, (tab, fus, ens));
    }
    let mut rows = Vec::with_capacity(ids.len() * 4);
    for (i, id) in ids.iter().enumerate() {
        for t in Target::ALL {
            let (tab, fus, ens) = &by_target[&t];
            rows.push(PredictionRow {
                video_id: id.clone(),
                target: t,
                tabular: tab[i],
                fusion: fus[i],
                ensemble: ens[i],
            });
        }
    }
    Ok(rows)
}

fn split_matrix(ctx: &Context, split: Split) -> FeatureMatrix {
    match split {
        Split::Train => ctx.x_train.select_rows(&ctx.fit_idx),
        Split::Holdout => ctx.x_train.select_rows(&ctx.holdout_idx),
        Split::Test => ctx.x_test.clone(),
        Split::All => {
            let parts = [
                ctx.x_train.select_rows(&ctx.fit_idx),
                ctx.x_train.select_rows(&ctx.holdout_idx),
                ctx.x_test.clone(),
            ];
            let mut row_ids = Vec::new();
            let mut values = Vec::new();
            for p in parts {
                row_ids.extend(p.row_ids);
                values.extend(p.values);
            }
            FeatureMatrix::new(ctx.x_train.names.clone(), row_ids, values)
        }
    }
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("video_id,target,pred_tabular,pred_fusion,pred_ensemble\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.video_id,
            r.target,
            format_f64(r.tabular),
            r.fusion.map(format_f64).unwrap_or_default(),
            format_f64(r.ensemble)
        ));
    }
    out
}

pub fn cmd_predict(args: &RunArgs, split: Split) -> Result<PathBuf> {
    let ctx = Context::open(args)?;
    let models = load_models(&ctx)?;
    let rows = predict_matrix(&ctx, &models, &split_matrix(&ctx, split))?;
    let path = ctx.dir.path(&format!("predictions_{}.csv", split.name()));
    write_text(&path, &predictions_csv(&rows))?;
    Ok(path)
}

fn column(rows: &[PredictionRow], t: Target, pick: impl Fn(&PredictionRow) -> Option<f64>) -> Vec<f64> {
    rows.iter().filter(|r| r.target == t).filter_map(pick).collect()
}

pub fn cmd_report(args: &RunArgs) -> Result<()> {
    let ctx = Context::open(args)?;
    let models = load_models(&ctx)?;
    let hold = predict_matrix(&ctx, &models, &split_matrix(&ctx, Split::Holdout))?;
    if hold.is_empty() {
        return Err(PipelineError::input("holdout split is empty; raise holdout_frac"));
    }
    let row_of: BTreeMap<&str, usize> = ctx.bundle.train.ids().enumerate().map(|(i, id)| (id, i)).collect();

    // All three rows are scored on the holdout rows the fusion model covers,
    // so the comparison is like for like.
    let has_fusion = models.fusion.is_some() && hold.iter().any(|r| r.fusion.is_some());
    let mut video = MetricReport::new("Video");
    let mut tabular = MetricReport::new("Tabular");
    let mut final_fusion = MetricReport::new("Final Fusion");
    let mut beats_both = BTreeMap::new();
    for t in Target::ALL {
        let rows: Vec<&PredictionRow> = hold
            .iter()
            .filter(|r| r.target == t && (!has_fusion || r.fusion.is_some()))
            .collect();
        let idx: Vec<usize> = rows.iter().map(|r| row_of[r.video_id.as_str()]).collect();
        let truth = ctx.raw_targets(t, &idx)?;
        let tab: Vec<f64> = rows.iter().map(|r| r.tabular).collect();
        let ens: Vec<f64> = rows.iter().map(|r| r.ensemble).collect();
        let m_tab = TargetMetrics::compute(&truth, &tab)?;
        let m_ens = TargetMetrics::compute(&truth, &ens)?;
        tabular.targets.insert(t, m_tab);
        final_fusion.targets.insert(t, m_ens);
        if has_fusion {
            let fus: Vec<f64> = rows.iter().map(|r| r.fusion.expect("filtered")).collect();
            let m_fus = TargetMetrics::compute(&truth, &fus)?;
            video.targets.insert(t, m_fus);
            beats_both.insert(t, m_ens.mape < m_tab.mape && m_ens.mape < m_fus.mape);
        }
    }
    let mut reports = Vec::new();
    if has_fusion {
        reports.push(video);
    }
    reports.push(tabular);
    reports.push(final_fusion);
    let board = leaderboard_report(&reports)?;
    write_text(&ctx.dir.path("reports/leaderboard.csv"), &board.to_csv())?;
    write_text(&ctx.dir.path("reports/leaderboard.txt"), &board.to_text())?;
    write_json(
        &ctx.dir.path("reports/metrics_holdout.json"),
        &json!({
            "split": "holdout",
            "fusion_available": has_fusion,
            "reports": reports,
            "ensemble_beats_both": beats_both,
        }),
    )?;

    let train = predict_matrix(&ctx, &models, &split_matrix(&ctx, Split::Train))?;
    let test = predict_matrix(&ctx, &models, &split_matrix(&ctx, Split::Test))?;
    let mut series = Vec::new();
    for t in Target::ALL {
        for (split, rows) in [("train", &train), ("test", &test)] {
            let members: [(&str, Vec<f64>); 3] = [
                ("tabular", column(rows, t, |r| Some(r.tabular))),
                ("fusion", column(rows, t, |r| r.fusion)),
                ("ensemble", column(rows, t, |r| Some(r.ensemble))),
            ];
            for (model, values) in members {
                if !values.is_empty() {
                    series.push(DensitySeries {
                        model: model.to_string(),
                        split: split.to_string(),
                        target: t,
                        values,
                    });
                }
            }
        }
    }
    let density = density_export(&series)?;
    write_text(&ctx.dir.path("reports/density.csv"), &density.to_csv())?;

    for (t, model) in &models.gbdt {
        write_text(
            &ctx.dir.path(&format!("reports/importance_{t}.csv")),
            &feature_importance(model).to_csv(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_accepts_partial_overrides() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"tune_budget": 0, "gbdt": {"n_rounds": 5}, "fusion": {"unified_width": 8}}"#)
                .unwrap();
        assert_eq!(cfg.tune_budget, 0);
        assert_eq!(cfg.gbdt.n_rounds, 5);
        assert_eq!(cfg.gbdt.max_depth, GbdtParams::default().max_depth);
        assert_eq!(cfg.fusion.unified_width, 8);
        assert_eq!(cfg.fusion.head_widths, vec![512, 128, 32, 1]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"tune_budgett": 0}"#).is_err());
    }

    #[test]
    fn sub_seeds_differ_by_tag() {
        assert_ne!(sub_seed(7, "gbdt/share"), sub_seed(7, "gbdt/heart"));
        assert_eq!(sub_seed(7, "x"), sub_seed(7, "x"));
    }

    #[test]
    fn prediction_csv_leaves_missing_fusion_empty() {
        let rows = [PredictionRow {
            video_id: "v1".into(),
            target: Target::Play,
            tabular: 12.5,
            fusion: None,
            ensemble: 12.5,
        }];
        assert_eq!(
            predictions_csv(&rows),
            "video_id,target,pred_tabular,pred_fusion,pred_ensemble\nv1,play,12.5,,12.5\n"
        );
    }

    #[test]
    fn error_codes() {
        assert_eq!(PipelineError::input("x").exit_code(), 2);
        assert_eq!(PipelineError::state("x", "y").exit_code(), 3);
        assert_eq!(PipelineError::numeric("x").exit_code(), 4);
        let e: PipelineError = FusionError::DivergedLoss {
            epoch: 1,
            batch: 0,
            loss: f64::NAN,
        }
        .into();
        assert_eq!(e.kind, ErrorKind::Numeric);
    }
}

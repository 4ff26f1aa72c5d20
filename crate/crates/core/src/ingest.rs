//! Dataset bundle: tabular CSVs, per-source embedding files and the JSON
//! manifest tying them together, plus a seeded synthetic bundle generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::DaypartHours;
use crate::par::Exec;
use crate::textfmt::format_f64;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}`")]
    UnexpectedColumn(String),
    #[error("duplicate video id `{0}`")]
    DuplicateVideoId(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("bad embedding header: {0}")]
    BadHeader(String),
    #[error("line {line}: expected {expected} values, found {found}")]
    DimMismatch {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {0}: non-finite value")]
    NonFiniteValue(u64),
    #[error("line {line}: {reason}")]
    BadLine { line: u64, reason: String },
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("manifest declares source {0} but its embedding file is absent")]
    ManifestMissingSource(u8),
    #[error("embedding file for source {expected} declares source {found}")]
    SourceMismatch { expected: u8, found: u8 },
    #[error(
        "source {source_id}: {missing} of {total} ids lack a vector ({frac:.4} > max_missing_frac {max})"
    )]
    CoverageBelowThreshold {
        source_id: u8,
        missing: usize,
        total: usize,
        frac: f64,
        max: f64,
    },
    #[error("synthetic bundles need n_train >= 10, got {0}")]
    TooFewSyntheticRows(usize),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Registries
// ---------------------------------------------------------------------------

/// One of the six embedding sources, identified 1..=6.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SourceId(u8);

/// Which encoder family produced an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Pooled features of a video classification backbone.
    Video,
    /// Sentence encoding of a generated video description.
    Text,
}

impl SourceId {
    pub const ALL: [SourceId; 6] = [
        SourceId(1),
        SourceId(2),
        SourceId(3),
        SourceId(4),
        SourceId(5),
        SourceId(6),
    ];

    pub fn new(id: u8) -> Option<Self> {
        (1..=6).contains(&id).then_some(SourceId(id))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            1 => "VideoMAE",
            2 => "ViViT",
            3 => "TimeSformer",
            4 => "X-CLIP",
            5 => "LLaVA-NeXT",
            _ => "InternVideo2",
        }
    }

    pub fn kind(self) -> SourceKind {
        if self.0 >= 5 {
            SourceKind::Text
        } else {
            SourceKind::Video
        }
    }
}

impl TryFrom<u8> for SourceId {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        SourceId::new(v).ok_or_else(|| format!("source id {v} outside 1..=6"))
    }
}

impl From<SourceId> for u8 {
    fn from(s: SourceId) -> u8 {
        s.0
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The four engagement metrics, in report-column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Comment,
    Heart,
    Play,
    Share,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Comment, Target::Heart, Target::Play, Target::Share];

    pub fn name(self) -> &'static str {
        match self {
            Target::Comment => "comment",
            Target::Heart => "heart",
            Target::Play => "play",
            Target::Share => "share",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Target::Comment => "Comment",
            Target::Heart => "Heart",
            Target::Play => "Play",
            Target::Share => "Share",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Target::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// The five per-video container fields; any of them can be missing for a
/// damaged file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaField {
    DurationS,
    FrameCount,
    Fps,
    Width,
    Height,
}

impl MetaField {
    pub const ALL: [MetaField; 5] = [
        MetaField::DurationS,
        MetaField::FrameCount,
        MetaField::Fps,
        MetaField::Width,
        MetaField::Height,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaField::DurationS => "duration_s",
            MetaField::FrameCount => "frame_count",
            MetaField::Fps => "fps",
            MetaField::Width => "width",
            MetaField::Height => "height",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VideoMeta {
    pub duration_s: Option<f64>,
    pub frame_count: Option<f64>,
    pub fps: Option<f64>,
    pub width: Option<f64>,
    pub height: Option<f64>,
}

impl VideoMeta {
    pub fn get(&self, field: MetaField) -> Option<f64> {
        match field {
            MetaField::DurationS => self.duration_s,
            MetaField::FrameCount => self.frame_count,
            MetaField::Fps => self.fps,
            MetaField::Width => self.width,
            MetaField::Height => self.height,
        }
    }

    pub fn slot(&mut self, field: MetaField) -> &mut Option<f64> {
        match field {
            MetaField::DurationS => &mut self.duration_s,
            MetaField::FrameCount => &mut self.frame_count,
            MetaField::Fps => &mut self.fps,
            MetaField::Width => &mut self.width,
            MetaField::Height => &mut self.height,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuthorCounts {
    pub follower: f64,
    pub following: f64,
    pub total_heart: f64,
    pub total_video: f64,
}

impl AuthorCounts {
    pub fn as_array(&self) -> [f64; 4] {
        [self.follower, self.following, self.total_heart, self.total_video]
    }
}

/// Engagement counts, indexed by [`Target`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets(pub [f64; 4]);

impl Targets {
    pub fn get(&self, t: Target) -> f64 {
        self.0[t.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub video_id: String,
    pub author_id: String,
    /// Unix seconds, UTC.
    pub create_time: i64,
    pub caption: String,
    pub author: AuthorCounts,
    pub meta: VideoMeta,
    pub targets: Option<Targets>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordTable {
    pub rows: Vec<Record>,
}

impl RecordTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_targets(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.targets.is_some())
    }

    /// Target column for rows that carry targets; `None` if any row lacks them.
    pub fn target_column(&self, t: Target) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.targets.map(|x| x.get(t)))
            .collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|r| r.video_id.as_str())
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> RecordTable {
        RecordTable {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

pub const BASE_COLUMNS: [&str; 13] = [
    "video_id",
    "author_id",
    "create_time",
    "caption",
    "author_follower_count",
    "author_following_count",
    "author_total_heart_count",
    "author_total_video_count",
    "duration_s",
    "frame_count",
    "fps",
    "width",
    "height",
];

pub const TARGET_COLUMNS: [&str; 4] = ["comment", "heart", "play", "share"];

/// Reads a tabular CSV. With `has_targets`, the four target columns are
/// required on every row; otherwise they are optional as a block.
pub fn load_tabular(path: &Path, has_targets: bool) -> Result<RecordTable, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_tabular(BufReader::new(file), has_targets)
}

pub fn read_tabular<R: Read>(reader: R, has_targets: bool) -> Result<RecordTable, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| IngestError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    for (i, expected) in BASE_COLUMNS.iter().enumerate() {
        if header.get(i).map(str::trim) != Some(*expected) {
            return Err(IngestError::MissingColumn(expected.to_string()));
        }
    }
    let with_target_cols = header.len() > BASE_COLUMNS.len();
    if with_target_cols || has_targets {
        for (i, expected) in TARGET_COLUMNS.iter().enumerate() {
            if header.get(BASE_COLUMNS.len() + i).map(str::trim) != Some(*expected) {
                return Err(IngestError::MissingColumn(expected.to_string()));
            }
        }
    }
    let width = if with_target_cols || has_targets { 17 } else { 13 };
    if let Some(extra) = header.get(width) {
        return Err(IngestError::UnexpectedColumn(extra.to_string()));
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| IngestError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| IngestError::MalformedRow { line, reason };
        if rec.len() != width {
            return Err(bad(format!("expected {width} fields, found {}", rec.len())));
        }
        let video_id = rec[0].to_string();
        if video_id.is_empty() {
            return Err(bad("empty video_id".into()));
        }
        let author_id = rec[1].to_string();
        let create_time: i64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("create_time `{}` is not an integer", &rec[2])))?;
        let caption = rec[3].to_string();
        let count = |i: usize| -> Result<f64, IngestError> {
            parse_non_negative(&rec[i])
                .ok_or_else(|| bad(format!("{} `{}` is not a non-negative number", header[i].trim(), &rec[i])))
        };
        let author = AuthorCounts {
            follower: count(4)?,
            following: count(5)?,
            total_heart: count(6)?,
            total_video: count(7)?,
        };
        let meta = VideoMeta {
            duration_s: parse_non_negative(&rec[8]),
            frame_count: parse_non_negative(&rec[9]),
            fps: parse_non_negative(&rec[10]),
            width: parse_non_negative(&rec[11]),
            height: parse_non_negative(&rec[12]),
        };
        let targets = if width == 17 {
            let cells: Vec<&str> = (13..17).map(|i| rec[i].trim()).collect();
            if cells.iter().all(|c| c.is_empty()) && !has_targets {
                None
            } else {
                let mut t = [0.0; 4];
                for (k, slot) in t.iter_mut().enumerate() {
                    *slot = count(13 + k)?;
                }
                Some(Targets(t))
            }
        } else {
            None
        };
        if !seen.insert(video_id.clone()) {
            return Err(IngestError::DuplicateVideoId(video_id));
        }
        rows.push(Record {
            video_id,
            author_id,
            create_time,
            caption,
            author,
            meta,
            targets,
        });
    }
    Ok(RecordTable { rows })
}

fn parse_non_negative(cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v)
}

fn csv_quote(field: &str) -> String {
    format!("\"{}\"", field.replace('"', "\"\""))
}

fn csv_plain(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        csv_quote(field)
    } else {
        field.to_string()
    }
}

/// Writes a table in the canonical column layout. Target columns are emitted
/// when any row has targets.
pub fn write_tabular<W: Write>(table: &RecordTable, mut w: W) -> io::Result<()> {
    let with_targets = table.rows.iter().any(|r| r.targets.is_some());
    let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
    if with_targets {
        header.extend(TARGET_COLUMNS);
    }
    writeln!(w, "{}", header.join(","))?;
    let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    for r in &table.rows {
        let mut cells = vec![
            csv_plain(&r.video_id),
            csv_plain(&r.author_id),
            r.create_time.to_string(),
            csv_quote(&r.caption),
        ];
        cells.extend(r.author.as_array().iter().map(|&v| format_f64(v)));
        cells.extend(MetaField::ALL.iter().map(|&f| opt(r.meta.get(f))));
        if with_targets {
            match r.targets {
                Some(t) => cells.extend(t.0.iter().map(|&v| format_f64(v))),
                None => cells.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embedding files
// ---------------------------------------------------------------------------

/// One source's embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub source: SourceId,
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(source: SourceId, dim: usize) -> Self {
        EmbeddingSet {
            source,
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn source_name(&self) -> &'static str {
        self.source.name()
    }

    pub fn get(&self, video_id: &str) -> Option<&[f64]> {
        self.vectors.get(video_id).map(Vec::as_slice)
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_embeddings(BufReader::new(file))
}

fn parse_header(line: &str) -> Result<(SourceId, usize), IngestError> {
    let bad = || IngestError::BadHeader(line.to_string());
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("#popembed") || tokens.next() != Some("v1") {
        return Err(bad());
    }
    let mut name = None;
    let mut id = None;
    let mut dim = None;
    // Trailing key=value pairs (e.g. a pooling note) are tolerated.
    for tok in tokens {
        let Some((k, v)) = tok.split_once('=') else {
            continue;
        };
        match k {
            "source" => name = Some(v.to_string()),
            "id" => id = v.parse::<u8>().ok().and_then(SourceId::new),
            "dim" => dim = v.parse::<usize>().ok().filter(|&d| d > 0),
            _ => {}
        }
    }
    let (Some(name), Some(id), Some(dim)) = (name, id, dim) else {
        return Err(bad());
    };
    if name != id.name() {
        return Err(IngestError::BadHeader(format!(
            "source name `{name}` does not match id {id} ({})",
            id.name()
        )));
    }
    Ok((id, dim))
}

pub fn read_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingSet, IngestError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| IngestError::BadHeader(e.to_string()))?,
        None => return Err(IngestError::BadHeader("empty file".into())),
    };
    let (source, dim) = parse_header(header.trim_end_matches('\r'))?;
    let mut set = EmbeddingSet::new(source, dim);
    for (i, line) in lines.enumerate() {
        let line_no = i as u64 + 2;
        let line = line.map_err(|e| IngestError::BadLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let Some((id, rest)) = line.split_once('\t') else {
            return Err(IngestError::BadLine {
                line: line_no,
                reason: "missing TAB after video id".into(),
            });
        };
        let mut v = Vec::with_capacity(dim);
        for tok in rest.split(' ').filter(|t| !t.is_empty()) {
            let x: f64 = tok.parse().map_err(|_| IngestError::BadLine {
                line: line_no,
                reason: format!("`{tok}` is not a number"),
            })?;
            if !x.is_finite() {
                return Err(IngestError::NonFiniteValue(line_no));
            }
            v.push(x);
        }
        if v.len() != dim {
            return Err(IngestError::DimMismatch {
                line: line_no,
                expected: dim,
                found: v.len(),
            });
        }
        if set.vectors.insert(id.to_string(), v).is_some() {
            return Err(IngestError::DuplicateVideoId(id.to_string()));
        }
    }
    Ok(set)
}

pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "#popembed v1 source={} id={} dim={}",
        set.source.name(),
        set.source,
        set.dim
    )?;
    for (id, v) in &set.vectors {
        let cells: Vec<String> = v.iter().map(|&x| format_f64(x)).collect();
        writeln!(w, "{id}\t{}", cells.join(" "))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest and bundle
// ---------------------------------------------------------------------------

pub const DEFAULT_MAX_MISSING_FRAC: f64 = 0.25;

fn default_max_missing() -> f64 {
    DEFAULT_MAX_MISSING_FRAC
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    /// Keys are source ids "1".."6".
    pub embeddings: BTreeMap<String, PathBuf>,
    #[serde(default = "default_max_missing")]
    pub max_missing_frac: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub daypart: Option<DaypartHours>,
}

impl Manifest {
    pub fn sources(&self) -> Result<BTreeMap<SourceId, PathBuf>, IngestError> {
        self.embeddings
            .iter()
            .map(|(k, p)| {
                let id = k
                    .parse::<u8>()
                    .ok()
                    .and_then(SourceId::new)
                    .ok_or_else(|| IngestError::BadManifest(format!("embedding key `{k}` is not a source id 1-6")))?;
                Ok((id, p.clone()))
            })
            .collect()
    }
}

/// Ids lacking a vector for one source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub missing_train: Vec<String>,
    pub missing_test: Vec<String>,
    pub missing_frac: f64,
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: RecordTable,
    pub test: RecordTable,
    pub embeddings: BTreeMap<SourceId, EmbeddingSet>,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub coverage: BTreeMap<SourceId, Coverage>,
}

impl DatasetBundle {
    pub fn sources(&self) -> Vec<SourceId> {
        self.embeddings.keys().copied().collect()
    }
}

fn compute_coverage(
    train: &RecordTable,
    test: &RecordTable,
    set: &EmbeddingSet,
) -> Coverage {
    let missing = |t: &RecordTable| -> Vec<String> {
        t.ids()
            .filter(|id| !set.vectors.contains_key(*id))
            .map(str::to_string)
            .collect()
    };
    let missing_train = missing(train);
    let missing_test = missing(test);
    let total = train.len() + test.len();
    let missing_frac = if total == 0 {
        0.0
    } else {
        (missing_train.len() + missing_test.len()) as f64 / total as f64
    };
    Coverage {
        missing_train,
        missing_test,
        missing_frac,
    }
}

/// Loads and checks everything a manifest references. Relative paths are
/// resolved against the manifest's directory.
pub fn validate_bundle(manifest_path: &Path) -> Result<DatasetBundle, IngestError> {
    validate_bundle_exec(manifest_path, Exec::default())
}

pub fn validate_bundle_exec(manifest_path: &Path, exec: Exec) -> Result<DatasetBundle, IngestError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| IngestError::BadManifest(e.to_string()))?;
    if !(0.0..=1.0).contains(&manifest.max_missing_frac) {
        return Err(IngestError::BadManifest(format!(
            "max_missing_frac {} outside [0, 1]",
            manifest.max_missing_frac
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let sources: Vec<(SourceId, PathBuf)> = manifest.sources()?.into_iter().collect();
    for (id, p) in &sources {
        if !resolve(p).is_file() {
            return Err(IngestError::ManifestMissingSource(id.get()));
        }
    }
    let train = load_tabular(&resolve(&manifest.train_csv), true)?;
    let test = load_tabular(&resolve(&manifest.test_csv), false)?;

    let loaded = exec.map(&sources, |(id, p)| {
        let set = load_embeddings(&resolve(p))?;
        if set.source != *id {
            return Err(IngestError::SourceMismatch {
                expected: id.get(),
                found: set.source.get(),
            });
        }
        Ok(set)
    });
    let mut embeddings = BTreeMap::new();
    let mut coverage = BTreeMap::new();
    for set in loaded {
        let set = set?;
        let cov = compute_coverage(&train, &test, &set);
        if cov.missing_frac > manifest.max_missing_frac {
            return Err(IngestError::CoverageBelowThreshold {
                source_id: set.source.get(),
                missing: cov.missing_train.len() + cov.missing_test.len(),
                total: train.len() + test.len(),
                frac: cov.missing_frac,
                max: manifest.max_missing_frac,
            });
        }
        coverage.insert(set.source, cov);
        embeddings.insert(set.source, set);
    }
    Ok(DatasetBundle {
        train,
        test,
        embeddings,
        manifest,
        manifest_path: manifest_path.to_path_buf(),
        coverage,
    })
}

// ---------------------------------------------------------------------------
// Synthetic bundles
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub dims: BTreeMap<SourceId, usize>,
    /// Fraction of ids dropped from each embedding file.
    pub missing_embedding_frac: f64,
    /// Fraction of container meta cells blanked.
    pub missing_meta_frac: f64,
    /// Fraction of training rows whose targets are inflated into outliers.
    pub outlier_frac: f64,
    pub test_targets: bool,
}

impl SynthConfig {
    pub fn new(seed: u64, n_train: usize, n_test: usize, dim: usize) -> Self {
        SynthConfig {
            seed,
            n_train,
            n_test,
            dims: SourceId::ALL.iter().map(|&s| (s, dim)).collect(),
            missing_embedding_frac: 0.0,
            missing_meta_frac: 0.05,
            outlier_frac: 0.02,
            test_targets: false,
        }
    }
}

/// Number of latent factors behind both the targets and the embeddings.
const LATENT: usize = 3;
/// 2022-01-01T00:00:00Z.
const SYNTH_T0: i64 = 1_640_995_200;
const SYNTH_SPAN: i64 = 180 * 86_400;

const WORDS: [&str; 16] = [
    "today", "my", "new", "look", "wait", "for", "it", "so", "good", "lol", "when", "you", "the",
    "best", "day", "ever",
];
const RESOLUTIONS: [(f64, f64); 4] = [(540.0, 960.0), (576.0, 1024.0), (720.0, 1280.0), (1080.0, 1920.0)];
const FPS: [f64; 5] = [24.0, 25.0, 30.0, 30.0, 60.0];

fn zipf_pick(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let total: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for k in 1..=n {
        u -= 1.0 / k as f64;
        if u <= 0.0 {
            return k - 1;
        }
    }
    n - 1
}

fn synth_caption(rng: &mut ChaCha8Rng) -> String {
    let mut parts: Vec<String> = Vec::new();
    for _ in 0..rng.random_range(1..6) {
        parts.push(WORDS[rng.random_range(0..WORDS.len())].to_string());
    }
    for _ in 0..rng.random_range(0..5) {
        let k = zipf_pick(rng, 30);
        let tag = match rng.random_range(0..3) {
            0 => format!("#Trend{k}"),
            _ => format!("#trend{k}"),
        };
        parts.push(tag);
    }
    for _ in 0..rng.random_range(0..3) {
        let k = zipf_pick(rng, 12);
        let handle = if k.is_multiple_of(4) {
            format!("@crew.{k}")
        } else {
            format!("@user_{k}")
        };
        parts.push(handle);
    }
    // Shuffle token order a little so tags are not always trailing.
    let n = parts.len();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        parts.swap(i, j);
    }
    let mut caption = parts.join(" ");
    if rng.random::<f64>() < 0.2 {
        caption.push_str(", \"quoted\" too!");
    }
    caption
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Generates a deterministic bundle whose targets follow a known function of
/// the tabular features and latent factors (also visible through the
/// embeddings), with lognormal noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle, IngestError> {
    if cfg.n_train < 10 {
        return Err(IngestError::TooFewSyntheticRows(cfg.n_train));
    }
    let n_total = cfg.n_train + cfg.n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lognorm = |mu: f64, sd: f64| LogNormal::new(mu, sd).expect("valid lognormal");

    struct Author {
        id: String,
        counts: AuthorCounts,
        duration_mu: f64,
        res: (f64, f64),
    }
    let n_authors = (n_total / 6).max(3);
    let authors: Vec<Author> = (0..n_authors)
        .map(|k| {
            let follower = lognorm(8.0, 1.5).sample(&mut rng).round();
            let counts = AuthorCounts {
                follower,
                following: lognorm(5.0, 1.0).sample(&mut rng).round(),
                total_heart: (follower * lognorm(2.0, 0.7).sample(&mut rng)).round(),
                total_video: lognorm(4.0, 0.8).sample(&mut rng).round() + 1.0,
            };
            Author {
                id: format!("a{k:04}"),
                counts,
                duration_mu: rng.random_range(8.0..50.0),
                res: RESOLUTIONS[rng.random_range(0..RESOLUTIONS.len())],
            }
        })
        .collect();

    let noise = |rng: &mut ChaCha8Rng, sd: f64| -> f64 { sd * rng.sample::<f64, _>(StandardNormal) };
    let mut latents: Vec<[f64; LATENT]> = Vec::with_capacity(n_total);
    let mut train = RecordTable::default();
    let mut test = RecordTable::default();
    for i in 0..n_total {
        let author = &authors[rng.random_range(0..n_authors)];
        let create_time = SYNTH_T0 + rng.random_range(0..SYNTH_SPAN);
        let duration = round_to(
            (author.duration_mu * lognorm(0.0, 0.3).sample(&mut rng)).clamp(3.0, 180.0),
            2,
        );
        let fps = FPS[rng.random_range(0..FPS.len())];
        let mut meta = VideoMeta {
            duration_s: Some(duration),
            frame_count: Some((duration * fps).round()),
            fps: Some(fps),
            width: Some(author.res.0),
            height: Some(author.res.1),
        };
        for f in MetaField::ALL {
            if rng.random::<f64>() < cfg.missing_meta_frac {
                *meta.slot(f) = None;
            }
        }
        let caption = synth_caption(&mut rng);
        let latent: [f64; LATENT] = std::array::from_fn(|_| rng.sample(StandardNormal));

        let age = (create_time - SYNTH_T0) as f64 / SYNTH_SPAN as f64;
        let n_tags = caption.matches('#').count() as f64;
        let signal = 0.45 * author.counts.follower.ln_1p() + 1.2 * (1.0 - age) + 0.02 * duration
            + 0.15 * n_tags
            + 0.6 * latent[0]
            + 0.4 * latent[1];
        let play = (3.0 + signal + noise(&mut rng, 0.35)).exp();
        let heart = play * (-2.3 + 0.3 * latent[2] + noise(&mut rng, 0.3)).exp();
        let comment = heart * (-3.6 + 0.2 * latent[0] + noise(&mut rng, 0.4)).exp();
        let share = heart * (-4.2 + 0.4 * latent[1] + noise(&mut rng, 0.5)).exp();
        let mut t = [comment, heart, play, share];
        let is_train = i < cfg.n_train;
        if is_train && rng.random::<f64>() < cfg.outlier_frac {
            let boost = rng.random_range(20.0..60.0);
            t.iter_mut().for_each(|x| *x *= boost);
        }
        let t = t.map(|x| x.round().max(1.0));

        let record = Record {
            video_id: format!("v{i:05}"),
            author_id: author.id.clone(),
            create_time,
            caption,
            author: author.counts,
            meta,
            targets: (is_train || cfg.test_targets).then_some(Targets(t)),
        };
        if is_train {
            train.rows.push(record);
        } else {
            test.rows.push(record);
        }
        latents.push(latent);
    }

    let all_ids: Vec<String> = train.ids().chain(test.ids()).map(str::to_string).collect();
    let mut embeddings = BTreeMap::new();
    for (&source, &dim) in &cfg.dims {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed);
        erng.set_stream(u64::from(source.get()));
        let mixing: Vec<f64> = (0..dim * LATENT).map(|_| erng.sample(StandardNormal)).collect();
        // Sources differ in how much of the latent signal survives.
        let noise_sd = [1.0, 0.9, 0.8, 0.5, 0.7, 0.9][usize::from(source.get() - 1)];
        let normal = Normal::new(0.0, noise_sd).expect("valid normal");
        let mut set = EmbeddingSet::new(source, dim);
        for (id, latent) in all_ids.iter().zip(&latents) {
            let v: Vec<f64> = (0..dim)
                .map(|d| {
                    let clean: f64 = (0..LATENT).map(|k| mixing[d * LATENT + k] * latent[k]).sum();
                    round_to(clean + normal.sample(&mut erng), 6)
                })
                .collect();
            if erng.random::<f64>() < cfg.missing_embedding_frac {
                continue;
            }
            set.vectors.insert(id.clone(), v);
        }
        embeddings.insert(source, set);
    }

    let manifest = Manifest {
        train_csv: "train.csv".into(),
        test_csv: "test.csv".into(),
        embeddings: embeddings
            .keys()
            .map(|s| (s.to_string(), PathBuf::from(format!("emb_{s}.txt"))))
            .collect(),
        max_missing_frac: DEFAULT_MAX_MISSING_FRAC,
        daypart: None,
    };
    let coverage = embeddings
        .iter()
        .map(|(&s, set)| (s, compute_coverage(&train, &test, set)))
        .collect();
    Ok(DatasetBundle {
        train,
        test,
        embeddings,
        manifest,
        manifest_path: PathBuf::from("manifest.json"),
        coverage,
    })
}

/// Writes the bundle's files and its manifest into `dir`; returns the
/// manifest path.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf, IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |rel: &Path, f: &dyn Fn(&mut Vec<u8>) -> io::Result<()>| -> Result<(), IngestError> {
        let path = dir.join(rel);
        let mut buf = Vec::new();
        f(&mut buf).map_err(io_err(&path))?;
        fs::write(&path, buf).map_err(io_err(&path))
    };
    write(&bundle.manifest.train_csv, &|b| write_tabular(&bundle.train, b))?;
    write(&bundle.manifest.test_csv, &|b| write_tabular(&bundle.test, b))?;
    let sources = bundle.manifest.sources()?;
    for (id, set) in &bundle.embeddings {
        let rel = sources
            .get(id)
            .cloned()
            .unwrap_or_else(|| PathBuf::from(format!("emb_{id}.txt")));
        write(&rel, &|b| write_embeddings(set, b))?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&bundle.manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

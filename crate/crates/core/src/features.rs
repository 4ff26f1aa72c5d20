//! Tabular feature engineering: per-author median imputation of container
//! meta, calendar/daypart/holiday/post-age features, hashtag and mention
//! frequency features, log transforms and IQR target filtering.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::ingest::{MetaField, Record, RecordTable, Target};
use crate::par::Exec;
use crate::textfmt::format_f64;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("cannot fit on an empty table")]
    EmptyTable,
    #[error("field `{}` has no non-missing training values", .0.name())]
    AllMissing(MetaField),
    #[error("degenerate time range: min {min} == max {max}")]
    DegenerateRange { min: i64, max: i64 },
    #[error("timestamp {0} is outside the supported calendar range")]
    InvalidTimestamp(i64),
    #[error("log1p/expm1 domain error: {0} is negative")]
    DomainError(f64),
    #[error("IQR factor must be positive, got {0}")]
    BadIqrFactor(f64),
    #[error("bad daypart hours: {0}")]
    BadDaypart(String),
    #[error("feature matrix csv: {0}")]
    MatrixCsv(String),
}

// ---------------------------------------------------------------------------
// Medians and imputation
// ---------------------------------------------------------------------------

/// Median with the midpoint rule for even counts. `None` for empty input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianStats {
    /// Only fields with at least one observed value for that author.
    pub per_author: BTreeMap<String, BTreeMap<MetaField, f64>>,
    pub global: BTreeMap<MetaField, f64>,
}

impl MedianStats {
    pub fn lookup(&self, author_id: &str, field: MetaField) -> f64 {
        self.per_author
            .get(author_id)
            .and_then(|m| m.get(&field))
            .or_else(|| self.global.get(&field))
            .copied()
            .expect("global median exists for every field")
    }
}

pub fn fit_median_stats(train: &RecordTable) -> Result<MedianStats, FeatureError> {
    if train.is_empty() {
        return Err(FeatureError::EmptyTable);
    }
    let mut by_author: BTreeMap<&str, BTreeMap<MetaField, Vec<f64>>> = BTreeMap::new();
    let mut all: BTreeMap<MetaField, Vec<f64>> = BTreeMap::new();
    for r in &train.rows {
        for f in MetaField::ALL {
            if let Some(v) = r.meta.get(f) {
                by_author
                    .entry(r.author_id.as_str())
                    .or_default()
                    .entry(f)
                    .or_default()
                    .push(v);
                all.entry(f).or_default().push(v);
            }
        }
    }
    let mut global = BTreeMap::new();
    for f in MetaField::ALL {
        let m = all.get(&f).and_then(|v| median(v)).ok_or(FeatureError::AllMissing(f))?;
        global.insert(f, m);
    }
    let per_author = by_author
        .into_iter()
        .map(|(a, fields)| {
            let meds = fields
                .into_iter()
                .filter_map(|(f, v)| median(&v).map(|m| (f, m)))
                .collect();
            (a.to_string(), meds)
        })
        .collect();
    Ok(MedianStats { per_author, global })
}

/// Fills missing meta fields: the author's training median first, then the
/// global training median. Present values are never touched.
pub fn impute_record(record: &Record, stats: &MedianStats) -> Record {
    let mut r = record.clone();
    for f in MetaField::ALL {
        let slot = r.meta.slot(f);
        if slot.is_none() {
            *slot = Some(stats.lookup(&record.author_id, f));
        }
    }
    r
}

pub fn impute_video_meta(table: &RecordTable, stats: &MedianStats) -> RecordTable {
    RecordTable {
        rows: table.rows.iter().map(|r| impute_record(r, stats)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Time features
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Daypart {
    Working,
    Leisure,
    Sleeping,
}

/// Half-open hour ranges for the sleeping and working buckets; every other
/// hour is leisure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaypartHours {
    pub sleeping: [u8; 2],
    pub working: [u8; 2],
}

impl Default for DaypartHours {
    fn default() -> Self {
        DaypartHours {
            sleeping: [0, 7],
            working: [9, 17],
        }
    }
}

impl DaypartHours {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let ok = |[a, b]: [u8; 2]| a < b && b <= 24;
        if !ok(self.sleeping) || !ok(self.working) {
            return Err(FeatureError::BadDaypart(format!("{self:?}: ranges must satisfy start < end <= 24")));
        }
        let [s0, s1] = self.sleeping;
        let [w0, w1] = self.working;
        if s0 < w1 && w0 < s1 {
            return Err(FeatureError::BadDaypart(format!("{self:?}: sleeping and working overlap")));
        }
        Ok(())
    }

    pub fn classify(&self, hour: u32) -> Daypart {
        let inside = |[a, b]: [u8; 2]| (u32::from(a)..u32::from(b)).contains(&hour);
        if inside(self.sleeping) {
            Daypart::Sleeping
        } else if inside(self.working) {
            Daypart::Working
        } else {
            Daypart::Leisure
        }
    }
}

/// Default buckets: sleeping [0,7), working [9,17), leisure otherwise.
pub fn classify_daypart(hour: u32) -> Daypart {
    DaypartHours::default().classify(hour)
}

/// Fixed-date and nth-weekday US federal holidays, without observed-day
/// shifting.
pub fn is_us_holiday(date: NaiveDate) -> bool {
    let (m, d) = (date.month(), date.day());
    if matches!((m, d), (1, 1) | (6, 19) | (7, 4) | (11, 11) | (12, 25)) {
        return true;
    }
    let nth = (d - 1) / 7 + 1;
    let last_in_month = d + 7 > days_in_month(date.year(), m);
    match (m, date.weekday()) {
        (1, Weekday::Mon) => nth == 3,
        (2, Weekday::Mon) => nth == 3,
        (5, Weekday::Mon) => last_in_month,
        (9, Weekday::Mon) => nth == 1,
        (10, Weekday::Mon) => nth == 2,
        (11, Weekday::Thu) => nth == 4,
        _ => false,
    }
}

fn days_in_month(year: i32, month: u32) -> u32 {
    let (ny, nm) = if month == 12 { (year + 1, 1) } else { (year, month + 1) };
    let first_next = NaiveDate::from_ymd_opt(ny, nm, 1).expect("valid date");
    first_next.pred_opt().expect("valid date").day()
}

/// Training-time span used for post-age normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub min: i64,
    pub max: i64,
}

impl TimeRange {
    pub fn of(table: &RecordTable) -> Result<TimeRange, FeatureError> {
        let min = table.rows.iter().map(|r| r.create_time).min().ok_or(FeatureError::EmptyTable)?;
        let max = table.rows.iter().map(|r| r.create_time).max().ok_or(FeatureError::EmptyTable)?;
        if min == max {
            return Err(FeatureError::DegenerateRange { min, max });
        }
        Ok(TimeRange { min, max })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeFeatures {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    pub is_us_holiday: bool,
    pub daypart: Daypart,
    /// 0 at the earliest training video, 1 at the latest; unclamped.
    pub post_age_norm: f64,
}

pub fn derive_time_features(
    create_time: i64,
    range: TimeRange,
    hours: &DaypartHours,
) -> Result<TimeFeatures, FeatureError> {
    if range.min >= range.max {
        return Err(FeatureError::DegenerateRange {
            min: range.min,
            max: range.max,
        });
    }
    let dt = DateTime::from_timestamp(create_time, 0).ok_or(FeatureError::InvalidTimestamp(create_time))?;
    let date = dt.date_naive();
    let hour = dt.hour();
    Ok(TimeFeatures {
        year: date.year(),
        month: date.month(),
        day: date.day(),
        hour,
        is_us_holiday: is_us_holiday(date),
        daypart: hours.classify(hour),
        post_age_norm: (create_time - range.min) as f64 / (range.max - range.min) as f64,
    })
}

// ---------------------------------------------------------------------------
// Hashtags and mentions
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TagTokens {
    pub hashtags: Vec<String>,
    pub mentions: Vec<String>,
}

fn is_word(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Extracts `#tag` (run of `[A-Za-z0-9_]`) and `@handle` (run of
/// `[A-Za-z0-9_.]`) tokens. A marker only counts at the start of the string or
/// after a character outside `[A-Za-z0-9_]`, so `a@b` is not a mention.
/// Output is lowercased, in order, duplicates kept.
pub fn tokenize_tags(caption: &str) -> TagTokens {
    let chars: Vec<char> = caption.chars().collect();
    let mut out = TagTokens::default();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let at_boundary = i == 0 || !is_word(chars[i - 1]);
        if at_boundary && (c == '#' || c == '@') {
            let accepts = |ch: char| is_word(ch) || (c == '@' && ch == '.');
            let end = (i + 1..chars.len()).find(|&j| !accepts(chars[j])).unwrap_or(chars.len());
            if end > i + 1 {
                let token: String = chars[i + 1..end].iter().collect::<String>().to_ascii_lowercase();
                if c == '#' {
                    out.hashtags.push(token);
                } else {
                    out.mentions.push(token);
                }
                i = end;
                continue;
            }
        }
        i += 1;
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub hashtag_freq: BTreeMap<String, u64>,
    pub mention_freq: BTreeMap<String, u64>,
    pub corpus_size: usize,
}

/// Total occurrence counts (not per-caption presence) over the corpus.
pub fn fit_tag_frequency<'a, I>(captions: I) -> FrequencyTable
where
    I: IntoIterator<Item = &'a str>,
{
    let mut table = FrequencyTable::default();
    for caption in captions {
        table.corpus_size += 1;
        let tokens = tokenize_tags(caption);
        for h in tokens.hashtags {
            *table.hashtag_freq.entry(h).or_insert(0) += 1;
        }
        for m in tokens.mentions {
            *table.mention_freq.entry(m).or_insert(0) += 1;
        }
    }
    table
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TagFeatures {
    pub hashtag_count: f64,
    pub mention_count: f64,
    pub hashtag_freq_sum: f64,
    pub mention_freq_sum: f64,
}

pub fn tag_features(caption: &str, freq: &FrequencyTable) -> TagFeatures {
    let tokens = tokenize_tags(caption);
    let sum = |toks: &[String], table: &BTreeMap<String, u64>| -> f64 {
        toks.iter().map(|t| table.get(t).copied().unwrap_or(0) as f64).sum()
    };
    TagFeatures {
        hashtag_count: tokens.hashtags.len() as f64,
        mention_count: tokens.mentions.len() as f64,
        hashtag_freq_sum: sum(&tokens.hashtags, &freq.hashtag_freq),
        mention_freq_sum: sum(&tokens.mentions, &freq.mention_freq),
    }
}

// ---------------------------------------------------------------------------
// Log transforms and IQR filtering
// ---------------------------------------------------------------------------

pub fn log1p(x: f64) -> Result<f64, FeatureError> {
    if x < 0.0 || x.is_nan() {
        return Err(FeatureError::DomainError(x));
    }
    Ok(x.ln_1p())
}

pub fn expm1(y: f64) -> Result<f64, FeatureError> {
    if y < 0.0 || y.is_nan() {
        return Err(FeatureError::DomainError(y));
    }
    Ok(y.exp_m1())
}

/// Linear-interpolation quantile over an ascending slice, at position
/// `p * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// `[Q1 - k·IQR, Q3 + k·IQR]`.
pub fn iqr_bounds(values: &[f64], k: f64) -> Result<(f64, f64), FeatureError> {
    if !(k > 0.0) {
        return Err(FeatureError::BadIqrFactor(k));
    }
    if values.is_empty() {
        return Err(FeatureError::EmptyTable);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    Ok((q1 - k * iqr, q3 + k * iqr))
}

/// Keep mask: `true` where the value lies inside the IQR fence.
pub fn iqr_filter(values: &[f64], k: f64) -> Result<Vec<bool>, FeatureError> {
    let (lo, hi) = iqr_bounds(values, k)?;
    Ok(values.iter().map(|&v| v >= lo && v <= hi).collect())
}

/// Joint keep mask over the four targets: a row survives only if no target
/// is flagged.
pub fn iqr_keep_rows(train: &RecordTable, k: f64) -> Result<Vec<bool>, FeatureError> {
    let mut keep = vec![true; train.len()];
    for t in Target::ALL {
        let col = train.target_column(t).ok_or(FeatureError::EmptyTable)?;
        for (slot, ok) in keep.iter_mut().zip(iqr_filter(&col, k)?) {
            *slot &= ok;
        }
    }
    Ok(keep)
}

// ---------------------------------------------------------------------------
// Feature matrix
// ---------------------------------------------------------------------------

pub const FEATURE_NAMES: [&str; 22] = [
    "log_author_follower_count",
    "log_author_following_count",
    "log_author_total_heart_count",
    "log_author_total_video_count",
    "duration_s",
    "frame_count",
    "fps",
    "width",
    "height",
    "year",
    "month",
    "day",
    "hour",
    "is_holiday",
    "daypart_working",
    "daypart_leisure",
    "daypart_sleeping",
    "post_age_norm",
    "hashtag_count",
    "mention_count",
    "hashtag_freq_sum",
    "mention_freq_sum",
];

/// Dense row-major matrix with named columns and row ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub row_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, row_ids: Vec<String>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), names.len() * row_ids.len(), "matrix shape mismatch");
        FeatureMatrix { names, row_ids, values }
    }

    /// Columns named `f0, f1, ...` and rows `r0, r1, ...`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        FeatureMatrix::new(
            (0..n_cols).map(|j| format!("f{j}")).collect(),
            (0..rows.len()).map(|i| format!("r{i}")).collect(),
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.n_cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let values = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let row_ids = indices.iter().map(|&i| self.row_ids[i].clone()).collect();
        FeatureMatrix::new(self.names.clone(), row_ids, values)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "video_id,{}", self.names.join(","))?;
        for (i, id) in self.row_ids.iter().enumerate() {
            let cells: Vec<String> = self.row(i).iter().map(|&x| format_f64(x)).collect();
            writeln!(w, "{id},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<FeatureMatrix, FeatureError> {
        let bad = |m: String| FeatureError::MatrixCsv(m);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("video_id") {
            return Err(bad("first column must be video_id".into()));
        }
        let names: Vec<String> = cols.map(str::to_string).collect();
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            row_ids.push(cells.next().unwrap_or_default().to_string());
            let before = values.len();
            for c in cells {
                values.push(c.parse::<f64>().map_err(|_| bad(format!("line {}: bad value `{c}`", i + 2)))?);
            }
            if values.len() - before != names.len() {
                return Err(bad(format!("line {}: wrong cell count", i + 2)));
            }
        }
        Ok(FeatureMatrix::new(names, row_ids, values))
    }
}

/// Everything fitted on training data that the feature assembly needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub medians: MedianStats,
    pub frequencies: FrequencyTable,
    pub time_range: TimeRange,
    pub daypart: DaypartHours,
}

/// Which captions feed the hashtag/mention frequency table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyCorpus {
    /// Train and test captions together.
    #[default]
    All,
    TrainOnly,
}

impl FeaturePipeline {
    pub fn fit(
        train: &RecordTable,
        test: &RecordTable,
        corpus: FrequencyCorpus,
        daypart: DaypartHours,
    ) -> Result<FeaturePipeline, FeatureError> {
        daypart.validate()?;
        let captions = train.rows.iter().map(|r| r.caption.as_str());
        let frequencies = match corpus {
            FrequencyCorpus::All => fit_tag_frequency(captions.chain(test.rows.iter().map(|r| r.caption.as_str()))),
            FrequencyCorpus::TrainOnly => fit_tag_frequency(captions),
        };
        Ok(FeaturePipeline {
            medians: fit_median_stats(train)?,
            frequencies,
            time_range: TimeRange::of(train)?,
            daypart,
        })
    }

    pub fn row_features(&self, record: &Record) -> Result<[f64; 22], FeatureError> {
        let r = impute_record(record, &self.medians);
        let mut out = [0.0; 22];
        for (slot, &c) in out.iter_mut().zip(&r.author.as_array()) {
            *slot = log1p(c)?;
        }
        for (k, f) in MetaField::ALL.iter().enumerate() {
            out[4 + k] = r.meta.get(*f).expect("imputed");
        }
        let t = derive_time_features(r.create_time, self.time_range, &self.daypart)?;
        out[9] = f64::from(t.year);
        out[10] = f64::from(t.month);
        out[11] = f64::from(t.day);
        out[12] = f64::from(t.hour);
        out[13] = if t.is_us_holiday { 1.0 } else { 0.0 };
        out[14] = f64::from(u8::from(t.daypart == Daypart::Working));
        out[15] = f64::from(u8::from(t.daypart == Daypart::Leisure));
        out[16] = f64::from(u8::from(t.daypart == Daypart::Sleeping));
        out[17] = t.post_age_norm;
        let tags = tag_features(&r.caption, &self.frequencies);
        out[18] = tags.hashtag_count;
        out[19] = tags.mention_count;
        out[20] = tags.hashtag_freq_sum;
        out[21] = tags.mention_freq_sum;
        Ok(out)
    }
}

/// Builds the canonical 22-column matrix for `table`. Rows may be computed in
/// parallel; output order always follows `table`.
pub fn assemble_feature_matrix(
    table: &RecordTable,
    pipeline: &FeaturePipeline,
    exec: Exec,
) -> Result<FeatureMatrix, FeatureError> {
    let rows = exec.map(&table.rows, |r| pipeline.row_features(r));
    let mut values = Vec::with_capacity(rows.len() * FEATURE_NAMES.len());
    for row in rows {
        values.extend_from_slice(&row?);
    }
    Ok(FeatureMatrix::new(
        FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        table.rows.iter().map(|r| r.video_id.clone()).collect(),
        values,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AuthorCounts, VideoMeta};

    fn rec(id: &str, author: &str, duration: Option<f64>) -> Record {
        Record {
            video_id: id.into(),
            author_id: author.into(),
            create_time: 1_700_000_000,
            caption: String::new(),
            author: AuthorCounts::default(),
            meta: VideoMeta {
                duration_s: duration,
                frame_count: Some(300.0),
                fps: Some(30.0),
                width: Some(540.0),
                height: Some(960.0),
            },
            targets: None,
        }
    }

    #[test]
    fn median_examples() {
        let t = RecordTable {
            rows: vec![
                rec("1", "a1", Some(10.0)),
                rec("2", "a1", Some(30.0)),
                rec("3", "a1", Some(20.0)),
                rec("4", "a2", Some(10.0)),
                rec("5", "a2", Some(20.0)),
                rec("6", "a3", None),
            ],
        };
        let s = fit_median_stats(&t).unwrap();
        assert_eq!(s.per_author["a1"][&MetaField::DurationS], 20.0);
        assert_eq!(s.per_author["a2"][&MetaField::DurationS], 15.0);
        assert!(!s.per_author["a3"].contains_key(&MetaField::DurationS));
        // Global over [10, 30, 20, 10, 20] -> 20.
        assert_eq!(s.global[&MetaField::DurationS], 20.0);

        let single = RecordTable { rows: vec![rec("1", "a", Some(7.0))] };
        let s = fit_median_stats(&single).unwrap();
        assert_eq!(s.per_author["a"][&MetaField::DurationS], 7.0);
        assert_eq!(s.global[&MetaField::DurationS], 7.0);
    }

    #[test]
    fn all_missing_field_fails_at_fit() {
        let t = RecordTable { rows: vec![rec("1", "a", None)] };
        assert!(matches!(fit_median_stats(&t), Err(FeatureError::AllMissing(MetaField::DurationS))));
        assert!(matches!(fit_median_stats(&RecordTable::default()), Err(FeatureError::EmptyTable)));
    }

    #[test]
    fn imputation_fill_order() {
        let train = RecordTable {
            rows: vec![
                rec("1", "a1", Some(10.0)),
                rec("2", "a1", Some(30.0)),
                rec("3", "a1", Some(20.0)),
                rec("4", "a9", Some(100.0)),
                rec("5", "a9", Some(100.0)),
            ],
        };
        let mut s = fit_median_stats(&train).unwrap();
        let filled = impute_record(&rec("x", "a1", None), &s);
        assert_eq!(filled.meta.duration_s, Some(20.0));

        s.global.insert(MetaField::Fps, 30.0);
        let mut unseen = rec("y", "nobody", Some(5.0));
        unseen.meta.fps = None;
        let filled = impute_record(&unseen, &s);
        assert_eq!(filled.meta.fps, Some(30.0));
        assert_eq!(filled.meta.duration_s, Some(5.0));

        let full = rec("z", "a1", Some(11.0));
        assert_eq!(impute_record(&full, &s), full);
    }

    #[test]
    fn dayparts() {
        assert_eq!(classify_daypart(3), Daypart::Sleeping);
        assert_eq!(classify_daypart(10), Daypart::Working);
        assert_eq!(classify_daypart(20), Daypart::Leisure);
        assert_eq!(classify_daypart(7), Daypart::Leisure);
        assert_eq!(classify_daypart(17), Daypart::Leisure);
        let custom = DaypartHours { sleeping: [1, 6], working: [8, 18] };
        assert_eq!(custom.classify(0), Daypart::Leisure);
        assert_eq!(custom.classify(17), Daypart::Working);
        assert!(DaypartHours { sleeping: [0, 10], working: [9, 17] }.validate().is_err());
        assert!(DaypartHours { sleeping: [5, 5], working: [9, 17] }.validate().is_err());
    }

    #[test]
    fn holidays() {
        let d = |y, m, dd| NaiveDate::from_ymd_opt(y, m, dd).unwrap();
        assert!(is_us_holiday(d(2022, 7, 4)));
        assert!(!is_us_holiday(d(2022, 7, 5)));
        assert!(is_us_holiday(d(2022, 11, 24)));
        assert!(is_us_holiday(d(2022, 5, 30))); // last Monday of May
        assert!(!is_us_holiday(d(2022, 5, 23)));
        assert!(is_us_holiday(d(2023, 1, 16))); // MLK
        assert!(!is_us_holiday(d(2022, 12, 26))); // no observed shift
    }

    #[test]
    fn holiday_rules_match_calendar_oracle() {
        // Independent route: chrono's nth-weekday lookup.
        let nth = |y, m, wd, n| NaiveDate::from_weekday_of_month_opt(y, m, wd, n).unwrap();
        for y in 1990..2040 {
            let last_may_monday = NaiveDate::from_weekday_of_month_opt(y, 5, Weekday::Mon, 5)
                .unwrap_or_else(|| nth(y, 5, Weekday::Mon, 4));
            let expected: Vec<NaiveDate> = [
                NaiveDate::from_ymd_opt(y, 1, 1).unwrap(),
                NaiveDate::from_ymd_opt(y, 6, 19).unwrap(),
                NaiveDate::from_ymd_opt(y, 7, 4).unwrap(),
                NaiveDate::from_ymd_opt(y, 11, 11).unwrap(),
                NaiveDate::from_ymd_opt(y, 12, 25).unwrap(),
                nth(y, 1, Weekday::Mon, 3),
                nth(y, 2, Weekday::Mon, 3),
                last_may_monday,
                nth(y, 9, Weekday::Mon, 1),
                nth(y, 10, Weekday::Mon, 2),
                nth(y, 11, Weekday::Thu, 4),
            ]
            .to_vec();
            let mut day = NaiveDate::from_ymd_opt(y, 1, 1).unwrap();
            while day.year() == y {
                assert_eq!(is_us_holiday(day), expected.contains(&day), "{day}");
                day = day.succ_opt().unwrap();
            }
        }
    }

    #[test]
    fn time_features() {
        let h = DaypartHours::default();
        let r = TimeRange { min: 100, max: 200 };
        assert_eq!(derive_time_features(100, r, &h).unwrap().post_age_norm, 0.0);
        assert_eq!(derive_time_features(150, r, &h).unwrap().post_age_norm, 0.5);
        assert_eq!(derive_time_features(250, r, &h).unwrap().post_age_norm, 1.5);
        assert!(matches!(
            derive_time_features(1, TimeRange { min: 5, max: 5 }, &h),
            Err(FeatureError::DegenerateRange { .. })
        ));
        // 2022-07-04T20:30:00Z
        let t = derive_time_features(1_656_966_600, TimeRange { min: 0, max: 1 }, &h).unwrap();
        assert_eq!((t.year, t.month, t.day, t.hour), (2022, 7, 4, 20));
        assert!(t.is_us_holiday);
        assert_eq!(t.daypart, Daypart::Leisure);
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_tags(""), TagTokens::default());
        let t = tokenize_tags("Go #Fun #fun @Bob_1 now");
        assert_eq!(t.hashtags, ["fun", "fun"]);
        assert_eq!(t.mentions, ["bob_1"]);
        let t = tokenize_tags("mail a@b #x9!");
        assert_eq!(t.hashtags, ["x9"]);
        assert!(t.mentions.is_empty());
        let t = tokenize_tags("#a#b @c.d, (#e) # @");
        assert_eq!(t.hashtags, ["a", "e"]);
        assert_eq!(t.mentions, ["c.d"]);
        let t = tokenize_tags("ünï#ok é@x");
        assert_eq!(t.hashtags, ["ok"]);
        assert_eq!(t.mentions, ["x"]);
    }

    #[test]
    fn frequency_examples() {
        let f = fit_tag_frequency(["#a #a", "#a @b"]);
        assert_eq!(f.hashtag_freq, BTreeMap::from([("a".to_string(), 3)]));
        assert_eq!(f.mention_freq, BTreeMap::from([("b".to_string(), 1)]));
        assert_eq!(f.corpus_size, 2);
        let f = fit_tag_frequency(Vec::<&str>::new());
        assert_eq!(f, FrequencyTable::default());
        let f = fit_tag_frequency(["no tags here"]);
        assert!(f.hashtag_freq.is_empty() && f.mention_freq.is_empty());
        assert_eq!(f.corpus_size, 1);
    }

    #[test]
    fn tag_feature_examples() {
        let freq = FrequencyTable {
            hashtag_freq: BTreeMap::from([("a".to_string(), 10)]),
            ..Default::default()
        };
        let f = tag_features("#a and #A", &freq);
        assert_eq!(
            (f.hashtag_count, f.mention_count, f.hashtag_freq_sum, f.mention_freq_sum),
            (2.0, 0.0, 20.0, 0.0)
        );
        let f = tag_features("@x", &FrequencyTable::default());
        assert_eq!((f.hashtag_count, f.mention_count, f.hashtag_freq_sum), (0.0, 1.0, 0.0));
        assert_eq!(tag_features("", &freq), TagFeatures::default());
    }

    #[test]
    fn log_transforms() {
        assert_eq!(log1p(0.0).unwrap(), 0.0);
        assert!((log1p(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        let x = 12345.678;
        assert!((expm1(log1p(x).unwrap()).unwrap() - x).abs() < 1e-6);
        assert!(matches!(log1p(-1.0), Err(FeatureError::DomainError(_))));
        assert!(matches!(expm1(-0.5), Err(FeatureError::DomainError(_))));
        for e in 0..=12 {
            let x = 10f64.powi(e) * 1.2345;
            if x > 1e12 {
                continue;
            }
            let back = expm1(log1p(x).unwrap()).unwrap();
            assert!(((back - x) / x).abs() < 1e-9);
        }
    }

    #[test]
    fn iqr_examples() {
        let keep = iqr_filter(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.5).unwrap();
        assert_eq!(keep, [true, true, true, true, false]);
        assert_eq!(iqr_bounds(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.5).unwrap(), (-1.0, 7.0));
        assert_eq!(iqr_filter(&[5.0; 4], 1.5).unwrap(), [true; 4]);
        assert_eq!(iqr_filter(&[1.0], 1.5).unwrap(), [true]);
        assert!(matches!(iqr_filter(&[1.0], 0.0), Err(FeatureError::BadIqrFactor(_))));
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = FeatureMatrix::from_rows(&[vec![0.1, -2.0], vec![1e-300, 3.5]]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(FeatureMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }
}

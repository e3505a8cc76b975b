//! Flight ingestion, eligibility, windowing, normalization, tail-grouped
//! folds and synthetic long-range fixtures.
//!
//! On-disk layout of a dataset directory:
//!
//! * `manifest.csv` with header
//!   `flight_id,tail_id,cluster,label,day_offset,duration_seconds,path`
//!   (`path` relative to the manifest's directory unless absolute);
//! * one CSV per flight: a header of 23 channel names, then one row of
//!   decimal readings per second.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const CHANNELS: usize = 23;
pub const DEFAULT_WINDOW: usize = 4096;
pub const MIN_DURATION_SECONDS: u64 = 1800;
pub const MAX_DAYS_FROM_MAINTENANCE: i64 = 2;
pub const STD_FLOOR: f64 = 1e-6;
pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: [&str; 7] = [
    "flight_id",
    "tail_id",
    "cluster",
    "label",
    "day_offset",
    "duration_seconds",
    "path",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: manifest line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate flight_id {0}")]
    DuplicateFlight(String),
    #[error("{path}: expected {expected} channels, found {found}")]
    ChannelCount {
        path: PathBuf,
        found: usize,
        expected: usize,
    },
    #[error("{path}: duplicate channel name {name}")]
    DuplicateChannel { path: PathBuf, name: String },
    #[error("{path}: row {row}, column {column}: non-numeric value {value:?}")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: column {column} has no numeric values to impute from")]
    EmptyColumn { path: PathBuf, column: String },
    #[error("{0}: no data rows")]
    EmptyFile(PathBuf),
    #[error("{tails} distinct tails cannot fill {folds} folds")]
    TooFewTails { tails: usize, folds: usize },
    #[error("fold plan does not cover flight {0}")]
    Unassigned(String),
    #[error("matrix has {found} channels, statistics have {expected}")]
    ChannelMismatch { found: usize, expected: usize },
    #[error("normalization needs at least one non-padded timestep")]
    NoTrainingData,
    #[error("invalid synthetic geometry: {0}")]
    Geometry(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

impl DatasetError {
    /// True when the failure came from the filesystem rather than file contents.
    pub fn is_io(&self) -> bool {
        match self {
            DatasetError::Io { .. } => true,
            DatasetError::Csv { source, .. } => source.is_io_error(),
            _ => false,
        }
    }
}

/// Maintenance-issue category defining a sub-dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cluster {
    C28,
    C37,
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cluster::C28 => "C28",
            Cluster::C37 => "C37",
        })
    }
}

impl FromStr for Cluster {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C28" | "28" => Ok(Cluster::C28),
            "C37" | "37" => Ok(Cluster::C37),
            other => Err(format!("unknown cluster {other:?} (expected C28 or C37)")),
        }
    }
}

/// One flight: `T×23` readings plus label metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightSeries {
    pub flight_id: String,
    pub tail_id: String,
    pub cluster: Cluster,
    /// 1 = before maintenance, 0 = after.
    pub label: u8,
    pub day_offset: i64,
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
}

impl FlightSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

fn absolute(p: &Path) -> PathBuf {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub flight_id: String,
    pub tail_id: String,
    pub cluster: Cluster,
    pub label: u8,
    pub day_offset: i64,
    pub duration_seconds: u64,
    /// Resolved path of the flight CSV.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Canonicalizes order by flight id and rejects duplicates.
    pub fn new(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.flight_id.cmp(&b.flight_id));
        for pair in entries.windows(2) {
            if pair[0].flight_id == pair[1].flight_id {
                return Err(DatasetError::DuplicateFlight(pair[0].flight_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, flight_id: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.flight_id.as_str().cmp(flight_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Flights per (cluster, label).
    pub fn counts(&self) -> BTreeMap<(Cluster, u8), usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry((e.cluster, e.label)).or_insert(0) += 1;
        }
        out
    }

    pub fn filter<F: Fn(&ManifestEntry) -> bool>(&self, keep: F) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Entries passing [`check_eligibility`].
    pub fn eligible(&self) -> Self {
        self.filter(|e| check_eligibility(e.duration_seconds, e.day_offset))
    }

    pub fn cluster(&self, cluster: Cluster) -> Self {
        self.filter(|e| e.cluster == cluster)
    }

    pub fn tails(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.tail_id.as_str()).collect()
    }

    /// Writes `manifest.csv` with absolute or `base`-relative paths.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let base = absolute(path.parent().unwrap_or(Path::new(".")));
        let mut w = csv::Writer::from_path(path).map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let csv_err = |source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        };
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for e in &self.entries {
            let full = absolute(&e.path);
            let p = full.strip_prefix(&base).unwrap_or(&full);
            w.write_record([
                e.flight_id.as_str(),
                e.tail_id.as_str(),
                &e.cluster.to_string(),
                &e.label.to_string(),
                &e.day_offset.to_string(),
                &e.duration_seconds.to_string(),
                &p.to_string_lossy(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Per-(cluster,label) counts as CSV.
    pub fn write_counts_csv(&self, path: &Path) -> Result<()> {
        let io = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(f, "cluster,label,count").map_err(io)?;
        for ((c, l), n) in self.counts() {
            writeln!(f, "{c},{l},{n}").map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Forward-fill non-numeric cells instead of rejecting the file.
    pub impute: bool,
}

/// True iff the flight lasted at least 30 minutes and happened within two
/// days of the maintenance date, but not on the same day.
pub fn check_eligibility(duration_seconds: u64, day_offset: i64) -> bool {
    duration_seconds >= MIN_DURATION_SECONDS
        && day_offset != 0
        && day_offset.abs() <= MAX_DAYS_FROM_MAINTENANCE
}

fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rdr = csv::Reader::from_path(path).map_err(|source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let headers = rdr
        .headers()
        .map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::Manifest {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("missing column {name}"),
            })
    };
    let idx: Vec<usize> = MANIFEST_HEADER
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| DatasetError::Manifest {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let field = |k: usize| rec.get(idx[k]).map(str::trim).unwrap_or("");
        let flight_id = field(0).to_string();
        if flight_id.is_empty() {
            return Err(bad("empty flight_id".into()));
        }
        let label: u8 = field(3)
            .parse()
            .ok()
            .filter(|l| *l <= 1)
            .ok_or_else(|| bad(format!("label {:?} is not 0 or 1", field(3))))?;
        let p = PathBuf::from(field(6));
        out.push(ManifestEntry {
            flight_id,
            tail_id: field(1).to_string(),
            cluster: field(2).parse().map_err(bad)?,
            label,
            day_offset: field(4)
                .parse()
                .map_err(|_| bad(format!("day_offset {:?}", field(4))))?,
            duration_seconds: field(5)
                .parse()
                .map_err(|_| bad(format!("duration_seconds {:?}", field(5))))?,
            path: if p.is_absolute() { p } else { base.join(p) },
        });
    }
    Ok(out)
}

/// Reads a flight CSV into a `T×23` matrix and its channel names.
pub fn read_flight_csv(path: &Path, opts: IngestOptions) -> Result<(Array2<f64>, Vec<String>)> {
    let csv_err = |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if names.len() != CHANNELS {
        return Err(DatasetError::ChannelCount {
            path: path.to_path_buf(),
            found: names.len(),
            expected: CHANNELS,
        });
    }
    let mut seen = HashSet::new();
    for n in &names {
        if !seen.insert(n.as_str()) {
            return Err(DatasetError::DuplicateChannel {
                path: path.to_path_buf(),
                name: n.clone(),
            });
        }
    }
    let mut data: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != CHANNELS {
            return Err(DatasetError::ChannelCount {
                path: path.to_path_buf(),
                found: rec.len(),
                expected: CHANNELS,
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ if opts.impute => data.push(f64::NAN),
                _ => {
                    return Err(DatasetError::NonNumeric {
                        path: path.to_path_buf(),
                        row: r + 1,
                        column: names[c].clone(),
                        value: cell.to_string(),
                    })
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DatasetError::EmptyFile(path.to_path_buf()));
    }
    let mut values = Array2::from_shape_vec((rows, CHANNELS), data).expect("rows × channels");
    if opts.impute {
        for (c, mut col) in values.columns_mut().into_iter().enumerate() {
            let first = col.iter().copied().find(|v| v.is_finite()).ok_or_else(|| {
                DatasetError::EmptyColumn {
                    path: path.to_path_buf(),
                    column: names[c].clone(),
                }
            })?;
            let mut last = first;
            for v in col.iter_mut() {
                if v.is_finite() {
                    last = *v;
                } else {
                    *v = last;
                }
            }
        }
    }
    Ok((values, names))
}

/// Reads and validates `root/manifest.csv` and every flight file it names.
pub fn ingest(root: &Path, opts: IngestOptions) -> Result<DatasetManifest> {
    ingest_manifest(&root.join(MANIFEST_FILE), opts)
}

/// As [`ingest`], for a manifest at an arbitrary path.
pub fn ingest_manifest(manifest_path: &Path, opts: IngestOptions) -> Result<DatasetManifest> {
    let entries = parse_manifest(manifest_path)?;
    let manifest = DatasetManifest::new(entries)?;
    for e in manifest.entries() {
        read_flight_csv(&e.path, opts)?;
    }
    Ok(manifest)
}

pub fn load_flight(entry: &ManifestEntry, opts: IngestOptions) -> Result<FlightSeries> {
    let (values, channel_names) = read_flight_csv(&entry.path, opts)?;
    Ok(FlightSeries {
        flight_id: entry.flight_id.clone(),
        tail_id: entry.tail_id.clone(),
        cluster: entry.cluster,
        label: entry.label,
        day_offset: entry.day_offset,
        values,
        channel_names,
    })
}

pub fn load_all(manifest: &DatasetManifest, opts: IngestOptions) -> Result<Vec<FlightSeries>> {
    manifest.entries().iter().map(|e| load_flight(e, opts)).collect()
}

pub fn write_flight_csv(path: &Path, names: &[String], values: ArrayView2<'_, f64>) -> Result<()> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(f, "{}", names.join(",")).map_err(io)?;
    let mut line = String::new();
    for row in values.rows() {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Writes flights plus a manifest into `dir` in the canonical layout.
pub fn write_dataset(dir: &Path, flights: &[FlightSeries]) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("flights")).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(flights.len());
    for f in flights {
        let path = dir.join("flights").join(format!("{}.csv", f.flight_id));
        write_flight_csv(&path, &f.channel_names, f.values.view())?;
        entries.push(ManifestEntry {
            flight_id: f.flight_id.clone(),
            tail_id: f.tail_id.clone(),
            cluster: f.cluster,
            label: f.label,
            day_offset: f.day_offset,
            duration_seconds: f.len() as u64,
            path,
        });
    }
    let manifest = DatasetManifest::new(entries)?;
    manifest.write_csv(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Keeps the last `len` rows; shorter inputs are left-padded with zero rows
/// so that flight ends line up. Returns the window and the pad count.
pub fn window<T: Clone + Zero>(values: ArrayView2<'_, T>, len: usize) -> (Array2<T>, usize) {
    assert!(len >= 1, "window length must be positive");
    let (t, c) = values.dim();
    if t >= len {
        (values.slice(s![t - len.., ..]).to_owned(), 0)
    } else {
        let pad = len - t;
        let mut out = Array2::zeros((len, c));
        out.slice_mut(s![pad.., ..]).assign(&values);
        (out, pad)
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Population mean/std per channel over all non-padded rows; std floored at 1e-6.
pub fn fit_normalization<'a, I>(windows: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = (ArrayView2<'a, f64>, usize)>,
{
    let mut count = 0usize;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for (w, pad) in windows {
        if mean.is_empty() {
            mean = vec![0.0; w.ncols()];
            m2 = vec![0.0; w.ncols()];
        }
        if w.ncols() != mean.len() {
            return Err(DatasetError::ChannelMismatch {
                found: w.ncols(),
                expected: mean.len(),
            });
        }
        for row in w.rows().into_iter().skip(pad) {
            count += 1;
            let n = count as f64;
            for (c, &v) in row.iter().enumerate() {
                let d = v - mean[c];
                mean[c] += d / n;
                m2[c] += d * (v - mean[c]);
            }
        }
    }
    if count == 0 {
        return Err(DatasetError::NoTrainingData);
    }
    let std = m2
        .iter()
        .map(|&s| (s / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormalizationStats { mean, std })
}

/// `(x − mean) / std` per channel. With `pad_rows = Some(n)` the first `n`
/// rows are left at zero.
pub fn apply_normalization(
    values: ArrayView2<'_, f64>,
    stats: &NormalizationStats,
    pad_rows: Option<usize>,
) -> Result<Array2<f64>> {
    if values.ncols() != stats.channels() {
        return Err(DatasetError::ChannelMismatch {
            found: values.ncols(),
            expected: stats.channels(),
        });
    }
    let mut out = values.to_owned();
    for mut row in out.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    if let Some(pad) = pad_rows {
        let pad = pad.min(out.nrows());
        out.slice_mut(s![..pad, ..]).fill(0.0);
    }
    Ok(out)
}

pub fn invert_normalization(values: ArrayView2<'_, f64>, stats: &NormalizationStats) -> Result<Array2<f64>> {
    if values.ncols() != stats.channels() {
        return Err(DatasetError::ChannelMismatch {
            found: values.ncols(),
            expected: stats.channels(),
        });
    }
    let mut out = values.to_owned();
    for mut row in out.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = *v * stats.std[c] + stats.mean[c];
        }
    }
    Ok(out)
}

/// Assignment of flights to folds such that each tail occupies one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_of(&self, flight_id: &str) -> Option<usize> {
        self.assignment.get(flight_id).copied()
    }

    pub fn val_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Splits `flights` into (train, validation) for `fold`, each ordered by flight id.
    pub fn split<'a>(
        &self,
        flights: &'a [FlightSeries],
        fold: usize,
    ) -> Result<(Vec<&'a FlightSeries>, Vec<&'a FlightSeries>)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for f in flights {
            match self.fold_of(&f.flight_id) {
                Some(k) if k == fold => val.push(f),
                Some(_) => train.push(f),
                None => return Err(DatasetError::Unassigned(f.flight_id.clone())),
            }
        }
        train.sort_by(|a, b| a.flight_id.cmp(&b.flight_id));
        val.sort_by(|a, b| a.flight_id.cmp(&b.flight_id));
        Ok((train, val))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(f, "flight_id,fold").map_err(io)?;
        for (id, k) in &self.assignment {
            writeln!(f, "{id},{k}").map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|source| DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let mut assignment = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|source| DatasetError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            let bad = |reason: String| DatasetError::Manifest {
                path: path.to_path_buf(),
                line: i + 2,
                reason,
            };
            let id = rec.get(0).unwrap_or("").trim().to_string();
            let k: usize = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| bad("fold is not an integer".into()))?;
            if assignment.insert(id.clone(), k).is_some() {
                return Err(DatasetError::DuplicateFlight(id));
            }
        }
        let fold_count = assignment.values().max().map_or(0, |m| m + 1);
        Ok(Self {
            fold_count,
            assignment,
            seed: 0,
        })
    }
}

/// Shuffles tails with a seeded RNG, then gives each tail to the fold that
/// currently holds the fewest flights (lowest index on ties).
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut by_tail: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in manifest.entries() {
        by_tail
            .entry(e.tail_id.as_str())
            .or_default()
            .push(e.flight_id.as_str());
    }
    if k == 0 || by_tail.len() < k {
        return Err(DatasetError::TooFewTails {
            tails: by_tail.len(),
            folds: k,
        });
    }
    let mut tails: Vec<(&str, Vec<&str>)> = by_tail.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tails.shuffle(&mut rng);
    let mut load = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for (_, flights) in tails {
        let fold = (0..k).min_by_key(|&f| (load[f], f)).expect("k >= 1");
        load[fold] += flights.len();
        for id in flights {
            assignment.insert(id.to_string(), fold);
        }
    }
    Ok(FoldPlan {
        fold_count: k,
        assignment,
        seed,
    })
}

pub const PULSE_WIDTH: usize = 64;
pub const PULSE_AMPLITUDE: f64 = 5.0;
pub const PULSE_CHANNEL: usize = 0;
/// Per-flight noise on the other channels, on top of a background shared by
/// every flight of one generated set.
pub const DISTRACTOR_NOISE: f64 = 0.3;

/// A synthetic flight and the start indices of its two pulses.
#[derive(Debug, Clone)]
pub struct SyntheticFlight {
    pub series: FlightSeries,
    pub markers: [usize; 2],
}

pub fn synthetic_channel_names() -> Vec<String> {
    (0..CHANNELS).map(|c| format!("ch{c:02}")).collect()
}

/// Gaussian noise on 23 channels with two rectangular pulses of random sign on
/// the pulse channel, at least `gap` steps apart. The pulse channel carries unit
/// white noise; every other channel is a shared random background plus
/// `DISTRACTOR_NOISE` white noise per flight. Label 1 iff both pulses share a
/// sign; exactly half the samples are positive.
pub fn synth_longrange(n: usize, len: usize, gap: usize, seed: u64) -> Result<Vec<SyntheticFlight>> {
    if n % 2 != 0 {
        return Err(DatasetError::Geometry(format!("n = {n} must be even")));
    }
    if len < gap + PULSE_WIDTH {
        return Err(DatasetError::Geometry(format!(
            "length {len} must be at least gap {gap} + {PULSE_WIDTH}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
    labels.shuffle(&mut rng);
    let background = Array2::<f64>::from_shape_fn((len, CHANNELS), |_| rng.sample(StandardNormal));
    let names = synthetic_channel_names();
    let mut out = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut values = Array2::<f64>::from_shape_fn((len, CHANNELS), |(t, c)| {
            let e: f64 = rng.sample(StandardNormal);
            if c == PULSE_CHANNEL {
                e
            } else {
                background[[t, c]] + DISTRACTOR_NOISE * e
            }
        });
        let first = rng.random_range(0..=len - gap - PULSE_WIDTH);
        let second = rng.random_range(first + gap..=len - PULSE_WIDTH);
        let s1 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let s2 = if label == 1 { s1 } else { -s1 };
        for (start, sign) in [(first, s1), (second, s2)] {
            values
                .slice_mut(s![start..start + PULSE_WIDTH, PULSE_CHANNEL])
                .mapv_inplace(|v| v + sign * PULSE_AMPLITUDE);
        }
        out.push(SyntheticFlight {
            series: FlightSeries {
                flight_id: format!("syn-{i:05}"),
                tail_id: format!("syn-tail-{i:05}"),
                cluster: Cluster::C28,
                label,
                day_offset: if label == 1 { -1 } else { 1 },
                values,
                channel_names: names.clone(),
            },
            markers: [first, second],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn eligibility_boundaries() {
        assert!(!check_eligibility(1799, -1));
        assert!(!check_eligibility(3600, 0));
        assert!(check_eligibility(3600, -2));
        assert!(check_eligibility(1800, 1));
        assert!(!check_eligibility(3600, 3));
    }

    #[test]
    fn window_cases() {
        let x = Array2::from_shape_fn((5000, 2), |(t, c)| (t * 2 + c) as f64);
        let (w, pad) = window(x.view(), 4096);
        assert_eq!(pad, 0);
        assert_eq!(w[[0, 0]], x[[904, 0]]);
        assert_eq!(w[[4095, 1]], x[[4999, 1]]);

        let x = Array2::from_shape_fn((4096, 2), |(t, c)| (t + c) as f64);
        let (w, pad) = window(x.view(), 4096);
        assert_eq!((pad, &w), (0, &x));

        let x = Array2::from_elem((100, 2), 1.0);
        let (w, pad) = window(x.view(), 4096);
        assert_eq!(pad, 3996);
        assert!(w.slice(s![..3996, ..]).iter().all(|&v| v == 0.0));
        assert!(w.slice(s![3996.., ..]).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalization_single_channel() {
        let x = ndarray::arr2(&[[1.0], [2.0], [3.0]]);
        let stats = fit_normalization([(x.view(), 0)]).unwrap();
        let brute_mean = (1.0 + 2.0 + 3.0) / 3.0;
        let brute_var = [1.0f64, 2.0, 3.0]
            .iter()
            .map(|v| (v - brute_mean).powi(2))
            .sum::<f64>()
            / 3.0;
        assert!((stats.mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.std[0] - brute_var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_floored() {
        let x = Array2::from_elem((10, 1), 7.0);
        let stats = fit_normalization([(x.view(), 0)]).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        let y = apply_normalization(x.view(), &stats, None).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_rows_do_not_count() {
        let x = ndarray::arr2(&[[0.0], [0.0], [4.0], [6.0]]);
        let stats = fit_normalization([(x.view(), 2)]).unwrap();
        assert!((stats.mean[0] - 5.0).abs() < 1e-12);
        let y = apply_normalization(x.view(), &stats, Some(2)).unwrap();
        assert_eq!(y[[0, 0]], 0.0);
        assert!((y[[3, 0]] - 1.0).abs() < 1e-12);
        assert!(fit_normalization(std::iter::empty()).is_err());
    }

    #[test]
    fn normalization_arithmetic_and_mismatch() {
        let stats = NormalizationStats {
            mean: vec![3.0],
            std: vec![2.0],
        };
        let y = apply_normalization(ndarray::arr2(&[[5.0]]).view(), &stats, None).unwrap();
        assert_eq!(y[[0, 0]], 1.0);
        assert!(apply_normalization(Array2::zeros((2, 3)).view(), &stats, None).is_err());
    }

    #[test]
    fn cluster_parsing() {
        assert_eq!("c28".parse::<Cluster>().unwrap(), Cluster::C28);
        assert_eq!("C37".parse::<Cluster>().unwrap(), Cluster::C37);
        assert!("c12".parse::<Cluster>().is_err());
    }
}

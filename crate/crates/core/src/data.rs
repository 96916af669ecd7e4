//! Dataset ingestion: a subset of the UEA `.ts` format, a synthetic sinusoid
//! generator, z-score normalization, padding and few-shot subsampling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisor floor for channels whose training standard deviation is zero.
pub const STD_EPSILON: f64 = 1e-8;

/// One multivariate series stored channel-major, unpadded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesInstance {
    /// `values[channel][timestep]`.
    pub values: Vec<Vec<f64>>,
    pub label_id: usize,
    /// True (pre-padding) number of timesteps.
    pub length: usize,
}

impl TimeSeriesInstance {
    pub fn new(values: Vec<Vec<f64>>, label_id: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("instance has no channels"));
        }
        let length = values[0].len();
        if length == 0 {
            return Err(Error::invalid("instance has no timesteps"));
        }
        if values.iter().any(|c| c.len() != length) {
            return Err(Error::invalid("channels of one instance differ in length"));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("instance contains non-finite values"));
        }
        Ok(Self {
            values,
            label_id,
            length,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.values.len()
    }

    /// Number of stored columns (equals `length` unless padded).
    pub fn width(&self) -> usize {
        self.values[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-channel moments over the real (non-padded) positions of `instances`.
    pub fn from_instances(instances: &[TimeSeriesInstance], channels: usize) -> Self {
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for inst in instances {
            for (c, row) in inst.values.iter().enumerate() {
                sum[c] += row[..inst.length].iter().sum::<f64>();
                count[c] += inst.length;
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        let mut sq = vec![0.0; channels];
        for inst in instances {
            for (c, row) in inst.values.iter().enumerate() {
                sq[c] += row[..inst.length]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
            .collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub name: String,
    pub train: Vec<TimeSeriesInstance>,
    pub test: Vec<TimeSeriesInstance>,
    pub num_classes: usize,
    pub label_texts: Vec<String>,
    pub num_channels: usize,
    pub max_length: usize,
    pub norm_stats: NormStats,
}

impl DatasetBundle {
    /// Validates the bundle invariants and computes train-split statistics.
    pub fn new(
        name: impl Into<String>,
        train: Vec<TimeSeriesInstance>,
        test: Vec<TimeSeriesInstance>,
        label_texts: Vec<String>,
    ) -> Result<Self> {
        let num_classes = label_texts.len();
        if num_classes == 0 {
            return Err(Error::invalid("bundle has no classes"));
        }
        for (i, t) in label_texts.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(Error::invalid(format!("label text {i} is empty")));
            }
            if label_texts[..i].contains(t) {
                return Err(Error::invalid(format!("duplicate label text {t:?}")));
            }
        }
        let first = train
            .first()
            .or(test.first())
            .ok_or_else(|| Error::invalid("bundle has no instances"))?;
        let num_channels = first.num_channels();
        let mut max_length = 0;
        for inst in train.iter().chain(&test) {
            if inst.num_channels() != num_channels {
                return Err(Error::invalid(format!(
                    "instance has {} channels, expected {num_channels}",
                    inst.num_channels()
                )));
            }
            if inst.label_id >= num_classes {
                return Err(Error::invalid(format!(
                    "label id {} out of range for {num_classes} classes",
                    inst.label_id
                )));
            }
            max_length = max_length.max(inst.length);
        }
        let norm_stats = NormStats::from_instances(&train, num_channels);
        Ok(Self {
            name: name.into(),
            train,
            test,
            num_classes,
            label_texts,
            num_channels,
            max_length,
            norm_stats,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for inst in &self.train {
            counts[inst.label_id] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
    #[serde(default = "default_min_per_class")]
    pub min_per_class: usize,
}

fn default_min_per_class() -> usize {
    1
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config(format!(
                "few-shot fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        if self.min_per_class == 0 {
            return Err(Error::config("min_per_class must be at least 1"));
        }
        Ok(())
    }

    /// Target subsample size for a train split of `train_size` instances.
    pub fn target_size(&self, train_size: usize, num_classes: usize) -> usize {
        let scaled = (self.fraction * train_size as f64).floor() as usize;
        scaled.max(num_classes * self.min_per_class).min(train_size)
    }
}

// ---------------------------------------------------------------------------
// .ts format

#[derive(Default)]
struct TsHeader {
    problem_name: Option<String>,
    dimensions: Option<usize>,
    series_length: Option<usize>,
    equal_length: Option<bool>,
    univariate: Option<bool>,
    class_labels: Option<Vec<String>>,
}

struct TsFile {
    header: TsHeader,
    /// `(line number, channels, label)`.
    rows: Vec<(usize, Vec<Vec<f64>>, String)>,
}

fn parse_bool(path: &str, line: usize, v: Option<&str>) -> Result<bool> {
    match v.map(str::to_ascii_lowercase).as_deref() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        other => Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("expected true/false, found {other:?}"),
        }),
    }
}

fn parse_ts_text(path: &str, text: &str) -> Result<TsFile> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut header = TsHeader::default();
    let mut rows = Vec::new();
    let mut in_data = false;
    let mut dims_seen: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if !line.starts_with('@') {
                return Err(perr(line_no, format!("expected header tag, found {line:?}")));
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap_or_default().to_ascii_lowercase();
            match tag.as_str() {
                "@problemname" => {
                    let name: Vec<&str> = parts.collect();
                    if name.is_empty() {
                        return Err(perr(line_no, "@problemName without a value".into()));
                    }
                    header.problem_name = Some(name.join(" "));
                }
                "@univariate" => header.univariate = Some(parse_bool(path, line_no, parts.next())?),
                "@equallength" => {
                    header.equal_length = Some(parse_bool(path, line_no, parts.next())?)
                }
                "@dimensions" | "@dimension" => {
                    let v = parts.next().and_then(|s| s.parse().ok()).filter(|&d| d >= 1);
                    header.dimensions =
                        Some(v.ok_or_else(|| perr(line_no, "bad @dimensions value".into()))?);
                }
                "@serieslength" => {
                    let v = parts.next().and_then(|s| s.parse().ok());
                    header.series_length =
                        Some(v.ok_or_else(|| perr(line_no, "bad @seriesLength value".into()))?);
                }
                "@classlabel" => {
                    if !parse_bool(path, line_no, parts.next())? {
                        return Err(perr(line_no, "unlabelled (regression) files unsupported".into()));
                    }
                    let labels: Vec<String> = parts.map(str::to_string).collect();
                    if labels.is_empty() {
                        return Err(perr(line_no, "@classLabel true without labels".into()));
                    }
                    header.class_labels = Some(labels);
                }
                "@timestamps" | "@missing" => {
                    if parse_bool(path, line_no, parts.next())? {
                        return Err(perr(line_no, format!("{tag} true is not supported")));
                    }
                }
                "@data" => in_data = true,
                _ => return Err(perr(line_no, format!("unknown header tag {tag}"))),
            }
            continue;
        }

        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(perr(line_no, "data line needs at least one dimension and a label".into()));
        }
        let (label, dims) = fields.split_last().expect("checked length");
        let label = label.trim();
        if label.is_empty() {
            return Err(perr(line_no, "missing class label".into()));
        }
        let mut channels = Vec::with_capacity(dims.len());
        for dim in dims {
            let vals = dim
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| perr(line_no, format!("bad value {v:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            channels.push(vals);
        }
        match dims_seen {
            None => dims_seen = Some(channels.len()),
            Some(d) if d != channels.len() => {
                return Err(perr(
                    line_no,
                    format!("instance has {} dimensions, previous had {d}", channels.len()),
                ))
            }
            _ => {}
        }
        if let Some(d) = header.dimensions {
            if d != channels.len() {
                return Err(perr(
                    line_no,
                    format!("instance has {} dimensions, header says {d}", channels.len()),
                ));
            }
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(perr(line_no, "dimensions of one instance differ in length".into()));
        }
        if header.equal_length == Some(true) {
            if let Some(sl) = header.series_length {
                if sl != len {
                    return Err(perr(
                        line_no,
                        format!("series length {len} differs from @seriesLength {sl}"),
                    ));
                }
            }
        }
        rows.push((line_no, channels, label.to_string()));
    }
    if !in_data {
        return Err(perr(text.lines().count(), "missing @data section".into()));
    }
    if rows.is_empty() {
        return Err(perr(text.lines().count(), "empty data section".into()));
    }
    if header.univariate == Some(true) && dims_seen != Some(1) {
        return Err(perr(rows[0].0, "@univariate true but instance has several dimensions".into()));
    }
    Ok(TsFile { header, rows })
}

fn read_to_string(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

/// Parses a train/test pair of `.ts` files into one bundle.
///
/// Class labels become `label_texts` in order of first appearance in the
/// train split; a test label absent from train is a parse error.
pub fn parse_ts_dataset(train_path: &Path, test_path: &Path) -> Result<DatasetBundle> {
    let train_name = train_path.display().to_string();
    let test_name = test_path.display().to_string();
    let train = parse_ts_text(&train_name, &read_to_string(train_path)?)?;
    let test = parse_ts_text(&test_name, &read_to_string(test_path)?)?;
    bundle_from_ts(train, &train_name, test, &test_name)
}

/// Same as [`parse_ts_dataset`], from in-memory text.
pub fn parse_ts_str(train_text: &str, test_text: &str) -> Result<DatasetBundle> {
    let train = parse_ts_text("<train>", train_text)?;
    let test = parse_ts_text("<test>", test_text)?;
    bundle_from_ts(train, "<train>", test, "<test>")
}

fn bundle_from_ts(train: TsFile, train_name: &str, test: TsFile, test_name: &str) -> Result<DatasetBundle> {
    let mut label_texts: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let declared = train.header.class_labels.clone();

    let mut convert = |file: TsFile, path: &str, allow_new: bool| -> Result<Vec<TimeSeriesInstance>> {
        let mut out = Vec::with_capacity(file.rows.len());
        for (line, channels, label) in file.rows {
            if let Some(decl) = &declared {
                if !decl.contains(&label) {
                    return Err(Error::Parse {
                        path: path.into(),
                        line,
                        msg: format!("class label {label:?} not declared in @classLabel"),
                    });
                }
            }
            let id = match index.get(&label) {
                Some(&id) => id,
                None if allow_new => {
                    let id = label_texts.len();
                    index.insert(label.clone(), id);
                    label_texts.push(label.clone());
                    id
                }
                None => {
                    return Err(Error::Parse {
                        path: path.into(),
                        line,
                        msg: format!("unknown class label {label:?} in test split"),
                    })
                }
            };
            let inst = TimeSeriesInstance::new(channels, id).map_err(|e| Error::Parse {
                path: path.into(),
                line,
                msg: e.to_string(),
            })?;
            out.push(inst);
        }
        Ok(out)
    };

    let train_dims = train.rows[0].1.len();
    let test_dims = test.rows[0].1.len();
    if train_dims != test_dims {
        return Err(Error::Parse {
            path: test_name.into(),
            line: test.rows[0].0,
            msg: format!("test instances have {test_dims} dimensions, train has {train_dims}"),
        });
    }
    let name = train
        .header
        .problem_name
        .clone()
        .unwrap_or_else(|| train_name.to_string());
    let train_set = convert(train, train_name, true)?;
    let test_set = convert(test, test_name, false)?;
    DatasetBundle::new(name, train_set, test_set, label_texts)
}

/// Serializes one split back to the supported `.ts` subset.
///
/// Values use Rust's shortest round-trip float formatting, so re-parsing
/// reproduces them exactly. Fails if a label text is not a single
/// whitespace-free token.
pub fn write_ts(bundle: &DatasetBundle, instances: &[TimeSeriesInstance]) -> Result<String> {
    if let Some(bad) = bundle
        .label_texts
        .iter()
        .find(|t| t.is_empty() || t.chars().any(|c| c.is_whitespace() || c == ':' || c == ','))
    {
        return Err(Error::invalid(format!("label {bad:?} cannot be written to a .ts file")));
    }
    let equal = instances.iter().all(|i| i.length == bundle.max_length);
    let mut out = String::new();
    let _ = writeln!(out, "@problemName {}", bundle.name);
    let _ = writeln!(out, "@univariate {}", bundle.num_channels == 1);
    let _ = writeln!(out, "@dimensions {}", bundle.num_channels);
    let _ = writeln!(out, "@equalLength {equal}");
    if equal {
        let _ = writeln!(out, "@seriesLength {}", bundle.max_length);
    }
    let _ = writeln!(out, "@classLabel true {}", bundle.label_texts.join(" "));
    out.push_str("@data\n");
    for inst in instances {
        for row in &inst.values {
            let vals: Vec<String> = row[..inst.length].iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(","));
            out.push(':');
        }
        out.push_str(&bundle.label_texts[inst.label_id]);
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON-lines interchange

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceRecord {
    pub name: String,
    pub values: Vec<Vec<f64>>,
    pub label_id: usize,
    pub label_text: String,
}

pub fn write_jsonl(bundle: &DatasetBundle, instances: &[TimeSeriesInstance], mut out: impl Write) -> Result<()> {
    for inst in instances {
        let rec = InstanceRecord {
            name: bundle.name.clone(),
            values: inst.values.iter().map(|r| r[..inst.length].to_vec()).collect(),
            label_id: inst.label_id,
            label_text: bundle.label_texts[inst.label_id].clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl std::io::Read) -> Result<Vec<InstanceRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Label text used for class `k` of the synthetic generator.
pub fn synthetic_label_text(k: usize) -> String {
    format!("class-{k} frequency pattern")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub channels: usize,
    pub length: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<DatasetBundle> {
        generate_synthetic(
            self.num_classes,
            self.per_class_train,
            self.per_class_test,
            self.channels,
            self.length,
            self.noise_sigma,
            self.seed,
        )
    }
}

/// Class `k` is a sinusoid with `2^k` cycles per window (channel `c` phase
/// shifted by `c·π/(2·channels)`) plus i.i.d. Gaussian noise.
pub fn generate_synthetic(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    channels: usize,
    length: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    if num_classes == 0 || per_class_train == 0 || per_class_test == 0 || channels == 0 || length == 0 {
        return Err(Error::config("synthetic generator counts must all be >= 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma must be finite and >= 0"));
    }
    if num_classes > 60 {
        return Err(Error::config("at most 60 synthetic classes are supported"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let make = |k: usize, rng: &mut ChaCha8Rng| {
        let cycles = 2f64.powi(k as i32);
        let values = (0..channels)
            .map(|c| {
                let phase = c as f64 * std::f64::consts::PI / (2.0 * channels as f64);
                (0..length)
                    .map(|t| {
                        let x = 2.0 * std::f64::consts::PI * cycles * t as f64 / length as f64;
                        (x + phase).sin() + noise_sigma * normal.sample(rng)
                    })
                    .collect()
            })
            .collect();
        TimeSeriesInstance {
            values,
            label_id: k,
            length,
        }
    };
    let mut train = Vec::with_capacity(num_classes * per_class_train);
    let mut test = Vec::with_capacity(num_classes * per_class_test);
    for k in 0..num_classes {
        for _ in 0..per_class_train {
            train.push(make(k, &mut rng));
        }
    }
    for k in 0..num_classes {
        for _ in 0..per_class_test {
            test.push(make(k, &mut rng));
        }
    }
    let labels = (0..num_classes).map(synthetic_label_text).collect();
    DatasetBundle::new("Synthetic", train, test, labels)
}

// ---------------------------------------------------------------------------
// Transforms

/// Standardizes every channel with the train split's statistics.
pub fn zscore_normalize(bundle: &DatasetBundle) -> DatasetBundle {
    let stats = &bundle.norm_stats;
    let apply = |inst: &TimeSeriesInstance| {
        let values = inst
            .values
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let div = if stats.std[c] == 0.0 { STD_EPSILON } else { stats.std[c] };
                row.iter()
                    .enumerate()
                    .map(|(t, v)| if t < inst.length { (v - stats.mean[c]) / div } else { 0.0 })
                    .collect()
            })
            .collect();
        TimeSeriesInstance {
            values,
            label_id: inst.label_id,
            length: inst.length,
        }
    };
    let train: Vec<_> = bundle.train.iter().map(apply).collect();
    let test: Vec<_> = bundle.test.iter().map(apply).collect();
    let norm_stats = NormStats::from_instances(&train, bundle.num_channels);
    DatasetBundle {
        train,
        test,
        norm_stats,
        ..bundle.clone()
    }
}

/// Stratified subsample of the train split; the test split is untouched.
///
/// Each class receives a quota proportional to its frequency, raised to
/// `min_per_class` (capped by availability), with the remainder distributed by
/// largest fractional share.
pub fn few_shot_subsample(bundle: &DatasetBundle, spec: &SplitSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let n = bundle.train.len();
    let c = bundle.num_classes;
    if n < c * spec.min_per_class {
        return Err(Error::config(format!(
            "train split of {n} cannot hold {} per class for {c} classes",
            spec.min_per_class
        )));
    }
    let target = spec.target_size(n, c);
    let counts = bundle.class_counts();
    let mut quota: Vec<usize> = counts.iter().map(|&k| spec.min_per_class.min(k)).collect();
    let mut assigned: usize = quota.iter().sum();
    if assigned > target {
        return Err(Error::config("per-class minimum exceeds subsample size"));
    }
    // Proportional top-up via largest remainder.
    let mut shares: Vec<(f64, usize)> = counts
        .iter()
        .enumerate()
        .map(|(k, &cnt)| (target as f64 * cnt as f64 / n as f64, k))
        .collect();
    for &(share, k) in &shares {
        let want = (share.floor() as usize).min(counts[k]);
        if want > quota[k] && assigned < target {
            let add = (want - quota[k]).min(target - assigned);
            quota[k] += add;
            assigned += add;
        }
    }
    shares.sort_by(|a, b| {
        let fa = a.0 - a.0.floor();
        let fb = b.0 - b.0.floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
    });
    while assigned < target {
        let mut progressed = false;
        for &(_, k) in &shares {
            if assigned == target {
                break;
            }
            if quota[k] < counts[k] {
                quota[k] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, inst) in bundle.train.iter().enumerate() {
        by_class[inst.label_id].push(i);
    }
    let mut chosen = Vec::with_capacity(target);
    for (k, idxs) in by_class.iter_mut().enumerate() {
        idxs.shuffle(&mut rng);
        chosen.extend_from_slice(&idxs[..quota[k]]);
    }
    chosen.sort_unstable();
    let train = chosen.iter().map(|&i| bundle.train[i].clone()).collect();
    DatasetBundle::new(bundle.name.clone(), train, bundle.test.clone(), bundle.label_texts.clone())
}

/// Right-pads with zeros to `target` columns; the mask marks real timesteps.
pub fn pad_to_length(instance: &TimeSeriesInstance, target: usize) -> Result<(TimeSeriesInstance, Vec<bool>)> {
    if target < instance.length {
        return Err(Error::invalid(format!(
            "pad target {target} shorter than series length {}",
            instance.length
        )));
    }
    let values = instance
        .values
        .iter()
        .map(|row| {
            let mut r = row[..instance.length].to_vec();
            r.resize(target, 0.0);
            r
        })
        .collect();
    let mask = (0..target).map(|t| t < instance.length).collect();
    Ok((
        TimeSeriesInstance {
            values,
            label_id: instance.label_id,
            length: instance.length,
        },
        mask,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FIXTURE_TRAIN: &str = "\
# tiny fixture
@problemName Tiny
@univariate false
@dimensions 2
@equalLength true
@seriesLength 4
@classLabel true a b
@data
1,2,3,4:5,6,7,8:a
0.5,0.25,0,-1:2,2,2,2:b
";

    const FIXTURE_TEST: &str = "\
@problemName Tiny
@dimensions 2
@equalLength true
@seriesLength 4
@classLabel true a b
@data
4,3,2,1:8,7,6,5:b
";

    #[test]
    fn fixture_dimensions() {
        let b = parse_ts_str(FIXTURE_TRAIN, FIXTURE_TEST).unwrap();
        assert_eq!(b.num_channels, 2);
        assert_eq!(b.max_length, 4);
        assert_eq!(b.num_classes, 2);
        assert_eq!(b.label_texts, vec!["a", "b"]);
        assert_eq!(b.train[1].values[0], vec![0.5, 0.25, 0.0, -1.0]);
        assert_eq!(b.test[0].label_id, 1);
    }

    #[test]
    fn empty_data_section_is_an_error() {
        let text = "@problemName X\n@dimensions 1\n@classLabel true a\n@data\n";
        let err = parse_ts_str(text, FIXTURE_TEST).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn inconsistent_dimensions_name_the_line() {
        let text = "@classLabel true a\n@data\n1,2:3,4:a\n1,2:a\n";
        match parse_ts_str(text, text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_test_label_is_an_error() {
        let train = "@data\n1,2:a\n";
        let test = "@data\n1,2:z\n";
        match parse_ts_str(train, test).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("unknown class label"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_header_is_an_error() {
        let text = "@dimensions lots\n@data\n1:a\n";
        assert!(matches!(parse_ts_str(text, text), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn variable_length_records_true_length() {
        let text = "@equalLength false\n@data\n1,2,3:a\n1,2:b\n";
        let b = parse_ts_str(text, text).unwrap();
        assert_eq!(b.train[0].length, 3);
        assert_eq!(b.train[1].length, 2);
        assert_eq!(b.max_length, 3);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let s = generate_synthetic(3, 4, 2, 2, 16, 0.3, 11).unwrap();
        assert!(write_ts(&s, &s.train).is_err());
        let labels = vec!["c0".to_string(), "c1".into(), "c2".into()];
        let b = DatasetBundle::new("S", s.train, s.test, labels).unwrap();
        let again = parse_ts_str(&write_ts(&b, &b.train).unwrap(), &write_ts(&b, &b.test).unwrap()).unwrap();
        assert_eq!(again.label_texts.len(), 3);
        for (x, y) in b.train.iter().zip(&again.train) {
            assert_eq!(x.values, y.values);
            assert_eq!(b.label_texts[x.label_id], again.label_texts[y.label_id]);
        }
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let b = generate_synthetic(3, 10, 5, 2, 128, 0.1, 7).unwrap();
        assert_eq!(b.train.len(), 30);
        assert_eq!(b.test.len(), 15);
        assert!(b.train.iter().all(|i| i.values.len() == 2 && i.values[0].len() == 128));
        assert_eq!(b.label_texts[2], "class-2 frequency pattern");

        let a = generate_synthetic(3, 10, 5, 2, 128, 0.0, 7).unwrap();
        let c = generate_synthetic(3, 10, 5, 2, 128, 0.0, 7).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn noiseless_synthetic_is_nearest_centroid_separable() {
        let b = generate_synthetic(4, 5, 5, 3, 64, 0.0, 3).unwrap();
        let flat = |i: &TimeSeriesInstance| i.values.concat();
        let dim = 3 * 64;
        let mut centroids = vec![vec![0.0; dim]; 4];
        for inst in &b.train {
            for (c, v) in centroids[inst.label_id].iter_mut().zip(flat(inst)) {
                *c += v / 5.0;
            }
        }
        let correct = b
            .test
            .iter()
            .filter(|inst| {
                let x = flat(inst);
                let best = (0..4)
                    .min_by(|&p, &q| {
                        let d = |k: usize| -> f64 {
                            centroids[k].iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum()
                        };
                        d(p).partial_cmp(&d(q)).unwrap()
                    })
                    .unwrap();
                best == inst.label_id
            })
            .count();
        assert_eq!(correct, b.test.len());
    }

    #[test]
    fn zscore_moments() {
        let b = zscore_normalize(&generate_synthetic(3, 10, 5, 2, 128, 0.5, 1).unwrap());
        for c in 0..2 {
            let vals: Vec<f64> = b.train.iter().flat_map(|i| i.values[c].clone()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zscore_constant_channel_maps_to_zero() {
        let train = vec![
            TimeSeriesInstance::new(vec![vec![3.0; 4], vec![1.0, 2.0, 3.0, 4.0]], 0).unwrap(),
            TimeSeriesInstance::new(vec![vec![3.0; 4], vec![0.0, 2.0, 1.0, 4.0]], 0).unwrap(),
        ];
        let b = DatasetBundle::new("c", train.clone(), train, vec!["x".into()]).unwrap();
        let n = zscore_normalize(&b);
        assert!(n.train.iter().all(|i| i.values[0].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zscore_is_idempotent_on_standardized_data() {
        let once = zscore_normalize(&generate_synthetic(2, 6, 3, 2, 32, 0.4, 5).unwrap());
        let twice = zscore_normalize(&once);
        for (a, b) in once.train.iter().zip(&twice.train) {
            for (x, y) in a.values.concat().iter().zip(b.values.concat()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn norm_stats_ignore_test_split() {
        let b = generate_synthetic(2, 6, 3, 2, 32, 0.4, 5).unwrap();
        let mut test = b.test.clone();
        test[0].values[0][0] += 100.0;
        let b2 = DatasetBundle::new(b.name.clone(), b.train.clone(), test, b.label_texts.clone()).unwrap();
        assert_eq!(b.norm_stats, b2.norm_stats);
    }

    fn epilepsy_shaped() -> DatasetBundle {
        // 137 train instances over 4 classes, unequal class sizes.
        let sizes = [37, 35, 38, 27];
        let mut train = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                train.push(TimeSeriesInstance::new(vec![vec![i as f64, k as f64]], k).unwrap());
            }
        }
        let test = train[..4].to_vec();
        DatasetBundle::new("EP", train, test, (0..4).map(|k| format!("c{k}")).collect()).unwrap()
    }

    #[test]
    fn few_shot_twenty_percent_of_137() {
        let b = epilepsy_shaped();
        assert_eq!(b.train.len(), 137);
        let spec = SplitSpec { fraction: 0.2, seed: 3, min_per_class: 1 };
        let s = few_shot_subsample(&b, &spec).unwrap();
        assert_eq!(s.train.len(), 27);
        assert!(s.class_counts().iter().all(|&c| c >= 1));
        assert_eq!(s.test, b.test);
        let again = few_shot_subsample(&b, &spec).unwrap();
        assert_eq!(s.train, again.train);
    }

    #[test]
    fn few_shot_full_fraction_is_permutation() {
        let b = epilepsy_shaped();
        let s = few_shot_subsample(&b, &SplitSpec { fraction: 1.0, seed: 9, min_per_class: 1 }).unwrap();
        let mut x: Vec<_> = b.train.iter().map(|i| format!("{:?}", i.values)).collect();
        let mut y: Vec<_> = s.train.iter().map(|i| format!("{:?}", i.values)).collect();
        x.sort();
        y.sort();
        assert_eq!(x, y);
    }

    #[test]
    fn few_shot_unsatisfiable_minimum() {
        let b = epilepsy_shaped();
        let spec = SplitSpec { fraction: 0.01, seed: 0, min_per_class: 40 };
        assert!(matches!(few_shot_subsample(&b, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn padding_cases() {
        let inst = TimeSeriesInstance::new(vec![vec![1.0, 2.0, 3.0, 4.0]], 0).unwrap();
        let (same, mask) = pad_to_length(&inst, 4).unwrap();
        assert_eq!(same.values, inst.values);
        assert!(mask.iter().all(|&m| m));

        let short = TimeSeriesInstance::new(vec![vec![1.0, 2.0, 3.0]], 0).unwrap();
        let (p, mask) = pad_to_length(&short, 5).unwrap();
        assert_eq!(p.values[0], vec![1.0, 2.0, 3.0, 0.0, 0.0]);
        assert_eq!(mask, vec![true, true, true, false, false]);
        assert!(pad_to_length(&short, 2).is_err());
    }

    #[test]
    fn jsonl_interchange() {
        let b = generate_synthetic(2, 2, 1, 2, 8, 0.0, 1).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&b, &b.train, &mut buf).unwrap();
        let recs = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[3].label_text, "class-1 frequency pattern");
        assert_eq!(recs[0].values, b.train[0].values);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mask_count_equals_length(len in 1usize..40, extra in 0usize..20, m in 1usize..4) {
                let inst = TimeSeriesInstance::new(vec![vec![1.5; len]; m], 0).unwrap();
                let (p, mask) = pad_to_length(&inst, len + extra).unwrap();
                prop_assert_eq!(mask.iter().filter(|&&b| b).count(), len);
                prop_assert_eq!(p.width(), len + extra);
            }

            #[test]
            fn stratified_minimum_holds(frac in 0.01f64..1.0, seed in 0u64..1000, min in 1usize..5) {
                let b = generate_synthetic(4, 12, 1, 1, 8, 0.1, 2).unwrap();
                let spec = SplitSpec { fraction: frac, seed, min_per_class: min };
                let s = few_shot_subsample(&b, &spec).unwrap();
                prop_assert_eq!(s.train.len(), spec.target_size(48, 4));
                prop_assert!(s.class_counts().iter().all(|&c| c >= min));
            }
        }
    }
}

//! Classification metrics, confusion matrices, attention aggregation and
//! report writers.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::data::TimeSeriesInstance;
use crate::encoders::{encode_hierarchical, DataEncoder, EncoderVariant, PatchBatch, PatchConfig, TaskEncoder};
use crate::lm::{AttentionReport, SpanKind};
use crate::params::Precision;

/// Counts indexed `[true][predicted]`; unparsed generations are kept aside
/// per true class and count as errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub unparsed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
            unparsed: vec![0; num_classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: Option<usize>) -> Result<()> {
        if truth >= self.num_classes {
            return Err(Error::invalid(format!("true label {truth} out of range")));
        }
        match predicted {
            Some(p) if p < self.num_classes => self.counts[truth][p] += 1,
            Some(p) => return Err(Error::invalid(format!("predicted label {p} out of range"))),
            None => self.unparsed[truth] += 1,
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparsed.iter().sum::<u64>()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes).map(|k| self.counts[k][k]).sum()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true".to_string()];
        header.extend((0..self.num_classes).map(|k| format!("pred_{k}")));
        header.push("unparsed".into());
        w.write_record(&header)?;
        for (k, row) in self.counts.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            rec.push(self.unparsed[k].to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn score_predictions(predicted: &[Option<usize>], truth: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub unparsed_rate: f64,
    pub total: u64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy and macro-averaged precision, recall and F1; any 0/0 is 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let n = cm.num_classes;
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("no evaluated instances"));
    }
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|k| {
            let tp = cm.counts[k][k] as f64;
            let predicted: u64 = (0..n).map(|t| cm.counts[t][k]).sum();
            let support = cm.counts[k].iter().sum::<u64>() + cm.unparsed[k];
            let precision = ratio(tp, predicted as f64);
            let recall = ratio(tp, support as f64);
            ClassMetrics {
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| ratio(per_class.iter().map(f).sum(), n as f64);
    Ok(Metrics {
        accuracy: ratio(cm.correct() as f64, total as f64),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        unparsed_rate: ratio(cm.unparsed.iter().sum::<u64>() as f64, total as f64),
        total,
        per_class,
    })
}

/// Everything needed to tie a metrics file to the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub split: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub component_hashes: BTreeMap<String, String>,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `metrics.json` and `confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("metrics.json"), self.to_json()?.as_bytes())?;
        write_atomic(&dir.join("confusion.csv"), self.confusion.to_csv()?.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub fraction: f64,
    pub train_size: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub unparsed_rate: f64,
}

pub fn write_few_shot(rows: &[FewShotRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join("fewshot.csv"), &bytes)?;
    write_atomic(&dir.join("fewshot.json"), serde_json::to_string_pretty(rows)?.as_bytes())?;
    Ok(())
}

/// Mean span masses over instances, per layer and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub order: String,
    pub instances: usize,
    /// `mean_mass[kind][layer][head]`.
    pub mean_mass: BTreeMap<SpanKind, Vec<Vec<f64>>>,
    /// Mean over layers and heads of `mean_mass[kind]`.
    pub overall: BTreeMap<SpanKind, f64>,
}

pub fn aggregate_attention(order: &str, reports: &[AttentionReport]) -> Result<AttentionSummary> {
    let first = reports.first().ok_or_else(|| Error::invalid("no attention reports to aggregate"))?;
    let layers = first.masses.len();
    let heads = first.masses.first().map_or(0, Vec::len);
    let mut mean_mass = BTreeMap::new();
    for kind in [SpanKind::Aligned, SpanKind::Prompt] {
        let mut acc = vec![vec![0.0; heads]; layers];
        for r in reports {
            let m = r.mass_of(kind);
            if m.len() != layers || m.iter().any(|h| h.len() != heads) {
                return Err(Error::invalid("attention reports differ in layer/head shape"));
            }
            for (a, row) in acc.iter_mut().zip(&m) {
                for (x, v) in a.iter_mut().zip(row) {
                    *x += v / reports.len() as f64;
                }
            }
        }
        mean_mass.insert(kind, acc);
    }
    let overall = mean_mass
        .iter()
        .map(|(k, m)| (*k, m.iter().flatten().sum::<f64>() / (layers * heads).max(1) as f64))
        .collect();
    Ok(AttentionSummary {
        order: order.to_string(),
        instances: reports.len(),
        mean_mass,
        overall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Data,
    Task,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub source: EmbeddingSource,
    pub split: String,
    pub index: usize,
    pub label_id: usize,
    pub vector: Vec<f64>,
}

/// Mean-pooled projected tokens of the selected branch; `Concat` pools the
/// full hierarchical embedding.
pub fn export_embeddings(
    instances: &[TimeSeriesInstance],
    pad_to: usize,
    patch: &PatchConfig,
    precision: Precision,
    data_enc: &DataEncoder,
    task_enc: &TaskEncoder,
    source: EmbeddingSource,
    split: &str,
) -> Result<Vec<EmbeddingRecord>> {
    let variant = match source {
        EmbeddingSource::Data => EncoderVariant::DataOnly,
        EmbeddingSource::Task => EncoderVariant::TaskOnly,
        EmbeddingSource::Concat => EncoderVariant::Hierarchical,
    };
    let mut out = Vec::with_capacity(instances.len());
    for (c, chunk) in instances.chunks(64).enumerate() {
        let refs: Vec<&TimeSeriesInstance> = chunk.iter().collect();
        let batch = PatchBatch::new(&refs, pad_to, patch, precision)?;
        let z = encode_hierarchical(&batch, data_enc, task_enc, variant)?;
        let pooled = z.pooled()?.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (i, vector) in pooled.into_iter().enumerate() {
            out.push(EmbeddingRecord {
                source,
                split: split.to_string(),
                index: c * 64 + i,
                label_id: chunk[i].label_id,
                vector,
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

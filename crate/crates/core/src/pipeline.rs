//! Run configuration and the three training stages: encoders (E), alignment
//! (A) and generative fine-tuning (G), with per-stage freeze flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    self, total_alignment_loss, AlignmentConfig, AlignmentModule, PairBatch, TextVocab, ALIGNMENT_ID,
};
use crate::checkpoint::{write_atomic, Checkpoint, TrainingProgress};
use crate::data::{few_shot_subsample, parse_ts_dataset, zscore_normalize, DatasetBundle, SplitSpec, SyntheticSpec, TimeSeriesInstance};
use crate::encoders::{
    encode_hierarchical, masked_reconstruction_loss, supervised_loss, DataEncoder, EncoderConfig, EncoderVariant,
    HierarchicalEmbedding, MaskSpec, PatchBatch, TaskEncoder, DATA_ENCODER_ID, TASK_ENCODER_ID,
};
use crate::error::{Error, Result};
use crate::eval::{
    self, compute_metrics, export_embeddings, score_predictions, AttentionSummary, EmbeddingSource, FewShotRow,
    MetricsReport,
};
use crate::lm::{
    self, assemble_input, generate_batch, sft_loss, GenerationResult, InputMode, LmConfig, LmHead, LoraConfig,
    MultimodalInput, ToyLm, LM_ID,
};
use crate::optim::{OptimConfig, Schedule, Trainer};
use crate::params::{ParamStore, Precision};
use crate::prompting::{
    bare_prompt, register_label_texts, render_prompt, LabelSpec, PromptBundle, PromptConfig, SlotOrder,
};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Stage {
    E,
    A,
    G,
}

/// Component names used in hash tables and checkpoint file names.
pub const LM_BASE: &str = "lm-base";
pub const LORA: &str = "lora";
pub const ALIGNED_PROJECTION: &str = "aligned-projection";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tunable {
    pub data_encoder: bool,
    pub task_encoder: bool,
    pub alignment: bool,
    pub lora: bool,
    pub aligned_projection: bool,
}

impl Tunable {
    pub fn default_for(stage: Stage) -> Self {
        match stage {
            Stage::E => Self { data_encoder: true, task_encoder: true, alignment: false, lora: false, aligned_projection: false },
            Stage::A => Self { data_encoder: false, task_encoder: false, alignment: true, lora: false, aligned_projection: false },
            Stage::G => Self { data_encoder: true, task_encoder: true, alignment: true, lora: true, aligned_projection: true },
        }
    }

    pub fn encoders(&self) -> bool {
        self.data_encoder || self.task_encoder
    }

    /// Component names flagged frozen at `stage`; components a stage
    /// does not touch are always frozen.
    pub fn frozen(&self, stage: Stage) -> Vec<&'static str> {
        let mut out = Vec::new();
        let relevant = |name: &str| match stage {
            Stage::E => name == DATA_ENCODER_ID || name == TASK_ENCODER_ID,
            Stage::A => name != LORA && name != ALIGNED_PROJECTION && name != LM_BASE,
            Stage::G => name != LM_BASE,
        };
        for (name, tuned) in [
            (DATA_ENCODER_ID, self.data_encoder),
            (TASK_ENCODER_ID, self.task_encoder),
            (ALIGNMENT_ID, self.alignment),
            (LORA, self.lora),
            (ALIGNED_PROJECTION, self.aligned_projection),
            (LM_BASE, false),
        ] {
            if !tuned || !relevant(name) {
                out.push(name);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    /// `None` selects the stage default.
    #[serde(default)]
    pub tunable: Option<Tunable>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Upper bound on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    /// Warmup steps of the cosine schedule (stages A and G).
    #[serde(default = "defaults::warmup")]
    pub warmup: usize,
    /// Per-epoch learning-rate multiplier (stage E).
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    /// Overrides the run seed for this stage.
    #[serde(default)]
    pub seed: Option<u64>,
}

mod defaults {
    pub fn epochs() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn warmup() -> usize {
        100
    }
    pub fn lr_decay() -> f64 {
        0.95
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            tunable: None,
            epochs: defaults::epochs(),
            max_steps: None,
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            weight_decay: defaults::weight_decay(),
            warmup: defaults::warmup(),
            lr_decay: defaults::lr_decay(),
            clip_norm: defaults::clip_norm(),
            seed: None,
        }
    }

    pub fn tunable(&self) -> Tunable {
        self.tunable.unwrap_or_else(|| Tunable::default_for(self.stage))
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tunable();
        if self.stage == Stage::E && !t.encoders() {
            return Err(Error::config("stage E must tune at least one encoder"));
        }
        if self.stage == Stage::G && !t.lora {
            return Err(Error::config("stage G must tune the LoRA adapters"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        Ok(())
    }

    pub fn total_steps(&self, train_size: usize) -> usize {
        let per_epoch = train_size.div_ceil(self.batch_size);
        let n = per_epoch * self.epochs;
        self.max_steps.map_or(n, |m| m.min(n))
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

/// Freeze/tune combinations for the encoders and alignment module across
/// stages A and G. LoRA and the aligned projection always train in G.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    /// A: encoders frozen, alignment tuned. G: both tuned.
    #[default]
    FtTt,
    /// A: encoders frozen, alignment tuned. G: encoders frozen, alignment tuned.
    FtFt,
    /// A: both tuned. G: both tuned.
    TtTt,
    /// A: both tuned. G: encoders frozen, alignment tuned.
    TtFt,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::FtTt, Paradigm::FtFt, Paradigm::TtTt, Paradigm::TtFt];

    /// (encoders tuned in A, encoders tuned in G).
    pub fn encoder_flags(self) -> (bool, bool) {
        match self {
            Paradigm::FtTt => (false, true),
            Paradigm::FtFt => (false, false),
            Paradigm::TtTt => (true, true),
            Paradigm::TtFt => (true, false),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Paradigm::FtTt => "A[F,T] G[T,T]",
            Paradigm::FtFt => "A[F,T] G[F,T]",
            Paradigm::TtTt => "A[T,T] G[T,T]",
            Paradigm::TtFt => "A[T,T] G[F,T]",
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Paradigm::FtTt => "ft-tt",
            Paradigm::FtFt => "ft-ft",
            Paradigm::TtTt => "tt-tt",
            Paradigm::TtFt => "tt-ft",
        }
    }

    pub fn apply(self, stages: &mut [StageConfig]) {
        let (a, g) = self.encoder_flags();
        for s in stages {
            let enc = match s.stage {
                Stage::A => a,
                Stage::G => g,
                Stage::E => continue,
            };
            let mut t = s.tunable();
            t.data_encoder = enc;
            t.task_encoder = enc;
            t.alignment = true;
            s.tunable = Some(t);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Ts {
        name: Option<String>,
        train: PathBuf,
        test: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Domain, prior-knowledge and task segments.
    #[default]
    Full,
    /// A single neutral instruction.
    Bare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub normalize: bool,
    pub few_shot: Option<SplitSpec>,
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub encoder_variant: EncoderVariant,
    pub alignment: AlignmentConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub prompt_path: Option<PathBuf>,
    pub prompt_mode: PromptMode,
    pub slot_order: Option<SlotOrder>,
    /// When false the aligned span is empty (text-only input).
    pub aligned_input: bool,
    pub stages: Vec<StageConfig>,
    pub eval_batch: usize,
    /// Test instances used for attention diagnostics.
    pub attention_instances: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = StageConfig { epochs: 10, lr_decay: 0.9, ..StageConfig::new(Stage::E) };
        let a = StageConfig { epochs: 15, warmup: 20, ..StageConfig::new(Stage::A) };
        let g = StageConfig { epochs: 25, max_steps: Some(200), warmup: 20, ..StageConfig::new(Stage::G) };
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                num_classes: 3,
                per_class_train: 70,
                per_class_test: 35,
                channels: 2,
                length: 128,
                noise_sigma: 0.1,
                seed: 0,
            }),
            normalize: true,
            few_shot: None,
            precision: Precision::F32,
            encoder: EncoderConfig::default(),
            encoder_variant: EncoderVariant::Hierarchical,
            alignment: AlignmentConfig::default(),
            lm: LmConfig::default(),
            lora: LoraConfig::default(),
            prompt_path: None,
            prompt_mode: PromptMode::Full,
            slot_order: None,
            aligned_input: true,
            stages: vec![e, a, g],
            eval_batch: 64,
            attention_instances: 16,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<Stage> = None;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            let expected = [Stage::E, Stage::A, Stage::G][i.min(2)];
            if i > 2 || s.stage != expected {
                return Err(Error::config(format!(
                    "stages must be a prefix of E, A, G; found {:?} after {prev:?}",
                    s.stage
                )));
            }
            prev = Some(s.stage);
        }
        if let DatasetSource::Ts { train, test, .. } = &self.dataset {
            for p in [train, test] {
                if !p.exists() {
                    return Err(Error::config(format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        if let Some(p) = &self.prompt_path {
            if !p.exists() {
                return Err(Error::config(format!("prompt file {} does not exist", p.display())));
            }
        }
        if let Some(f) = &self.few_shot {
            f.validate()?;
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch must be >= 1"));
        }
        if self.encoder.shared_width != self.alignment.width {
            return Err(Error::config("encoder shared_width must equal alignment width"));
        }
        self.alignment.validate()?;
        self.lora.validate(self.lm.width)?;
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn stage_mut(&mut self, stage: Stage) -> Option<&mut StageConfig> {
        self.stages.iter_mut().find(|s| s.stage == stage)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

/// Deterministic per-purpose seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Preparation

/// Dataset, label registry, prompt and vocabularies shared by all stages.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub bundle: DatasetBundle,
    pub labels: Vec<LabelSpec>,
    pub prompt_cfg: PromptConfig,
    pub prompt: PromptBundle,
    pub text_vocab: TextVocab,
    pub tokenizer: Tokenizer,
}

impl Prepared {
    pub fn label_texts(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.canonical_text.clone()).collect()
    }

    /// Prompt rendered with `order`, or the configured one.
    pub fn prompt_with_order(&self, mode: PromptMode, order: SlotOrder) -> Result<PromptBundle> {
        match mode {
            PromptMode::Full => render_prompt(&self.prompt_cfg.template().with_order(order), &self.bundle.name),
            PromptMode::Bare => Ok(bare_prompt(order)),
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetBundle> {
    let mut bundle = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => spec.generate()?,
        DatasetSource::Ts { name, train, test } => {
            let mut b = parse_ts_dataset(train, test)?;
            if let Some(n) = name {
                b.name = n.clone();
            }
            b
        }
    };
    if cfg.normalize {
        bundle = zscore_normalize(&bundle);
    }
    if let Some(spec) = &cfg.few_shot {
        bundle = few_shot_subsample(&bundle, spec)?;
    }
    Ok(bundle)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let bundle = load_dataset(cfg)?;
    cfg.encoder.patch.validate(bundle.max_length)?;
    let prompt_cfg = match &cfg.prompt_path {
        Some(p) => PromptConfig::load(p)?,
        None => PromptConfig::builtin(&bundle.name),
    };
    let overrides = (!prompt_cfg.label_overrides.is_empty()).then_some(&prompt_cfg.label_overrides);
    let labels = register_label_texts(&bundle, overrides)?;
    let order = cfg.slot_order.unwrap_or(prompt_cfg.order);
    let prompt = match cfg.prompt_mode {
        PromptMode::Full => render_prompt(&prompt_cfg.template().with_order(order), &bundle.name)?,
        PromptMode::Bare => bare_prompt(order),
    };
    let text_vocab = TextVocab::build(labels.iter().map(|l| l.canonical_text.as_str()));
    let mut corpus = vec![prompt.prompt_text()];
    for l in &labels {
        corpus.push(crate::prompting::build_training_target(l, &prompt_cfg.answer_template)?);
    }
    let tokenizer = Tokenizer::build(corpus.iter().map(String::as_str));
    Ok(Prepared {
        bundle,
        labels,
        prompt_cfg,
        prompt,
        text_vocab,
        tokenizer,
    })
}

// ---------------------------------------------------------------------------
// Components

pub struct Components {
    pub data_encoder: DataEncoder,
    pub task_encoder: TaskEncoder,
    pub alignment: AlignmentModule,
    pub lm: Option<LmHead>,
}

const CKPT_FILES: [(&str, &str); 4] = [
    (DATA_ENCODER_ID, "data_encoder.ckpt"),
    (TASK_ENCODER_ID, "task_encoder.ckpt"),
    (ALIGNMENT_ID, "alignment.ckpt"),
    (LM_ID, "lm.ckpt"),
];

impl Components {
    pub fn init(cfg: &RunConfig, prep: &Prepared) -> Result<Self> {
        let b = &prep.bundle;
        Ok(Self {
            data_encoder: DataEncoder::new(&cfg.encoder, b.num_channels, cfg.precision, derive_seed(cfg.seed, DATA_ENCODER_ID))?,
            task_encoder: TaskEncoder::new(&cfg.encoder, b.num_channels, b.num_classes, cfg.precision, derive_seed(cfg.seed, TASK_ENCODER_ID))?,
            alignment: AlignmentModule::new(&cfg.alignment, prep.text_vocab.clone(), cfg.precision, derive_seed(cfg.seed, ALIGNMENT_ID))?,
            lm: None,
        })
    }

    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut h = BTreeMap::new();
        h.insert(DATA_ENCODER_ID.to_string(), self.data_encoder.store.hash()?);
        h.insert(TASK_ENCODER_ID.to_string(), self.task_encoder.store.hash()?);
        h.insert(ALIGNMENT_ID.to_string(), self.alignment.store.hash()?);
        if let Some(lm) = &self.lm {
            h.insert(LM_BASE.to_string(), lm.base.store.hash()?);
            h.insert(LORA.to_string(), lm.adapted.lora_store.hash()?);
            h.insert(ALIGNED_PROJECTION.to_string(), lm.projection.store.hash()?);
        }
        Ok(h)
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut v = vec![
            (DATA_ENCODER_ID, &self.data_encoder.store),
            (TASK_ENCODER_ID, &self.task_encoder.store),
            (ALIGNMENT_ID, &self.alignment.store),
        ];
        if let Some(lm) = &self.lm {
            v.push((LM_BASE, &lm.base.store));
            v.push((LORA, &lm.adapted.lora_store));
            v.push((ALIGNED_PROJECTION, &lm.projection.store));
        }
        v
    }

    /// Trainable variables for the flagged components.
    fn vars(&self, t: &Tunable, stage: Stage) -> Vec<Var> {
        let frozen = t.frozen(stage);
        self.stores()
            .into_iter()
            .filter(|(name, _)| !frozen.contains(name))
            .flat_map(|(_, s)| s.vars())
            .collect()
    }

    pub fn save(&self, dir: &Path, progress: &BTreeMap<String, TrainingProgress>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut cks = vec![
            (DATA_ENCODER_ID, self.data_encoder.checkpoint()?),
            (TASK_ENCODER_ID, self.task_encoder.checkpoint()?),
            (ALIGNMENT_ID, self.alignment.checkpoint()?),
        ];
        if let Some(lm) = &self.lm {
            cks.push((LM_ID, lm.checkpoint()?));
        }
        for (id, mut ck) in cks {
            if let Some(p) = progress.get(id) {
                ck.progress = p.clone();
            }
            let file = CKPT_FILES.iter().find(|(c, _)| *c == id).expect("known component").1;
            ck.save(&dir.join(file))?;
        }
        Ok(())
    }

    /// Loads whatever checkpoints exist in `dir`; the encoders and alignment are required.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = |id: &str| dir.join(CKPT_FILES.iter().find(|(c, _)| *c == id).expect("known component").1);
        let data_encoder = DataEncoder::from_checkpoint(&Checkpoint::load_as(&path(DATA_ENCODER_ID), DATA_ENCODER_ID)?)?;
        let task_encoder = TaskEncoder::from_checkpoint(&Checkpoint::load_as(&path(TASK_ENCODER_ID), TASK_ENCODER_ID)?)?;
        let alignment = AlignmentModule::from_checkpoint(&Checkpoint::load_as(&path(ALIGNMENT_ID), ALIGNMENT_ID)?)?;
        let lm_path = path(LM_ID);
        let lm = if lm_path.exists() {
            Some(LmHead::from_checkpoint(&Checkpoint::load_as(&lm_path, LM_ID)?)?)
        } else {
            None
        };
        Ok(Self {
            data_encoder,
            task_encoder,
            alignment,
            lm,
        })
    }
}

// ---------------------------------------------------------------------------
// Stage execution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub frozen: Vec<String>,
    pub hashes_before: BTreeMap<String, String>,
    pub hashes_after: BTreeMap<String, String>,
}

impl StageReport {
    /// Whether every frozen component kept its parameter hash.
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen
            .iter()
            .all(|c| self.hashes_before.get(c) == self.hashes_after.get(c))
    }

    pub fn progress(&self) -> TrainingProgress {
        TrainingProgress {
            stage: Some(format!("{:?}", self.stage)),
            epoch: 0,
            steps: self.steps,
            loss_curve: self.loss_curve.clone(),
        }
    }
}

/// Shuffled mini-batches of indices, epoch by epoch, truncated at `total`.
pub fn epoch_batches(n: usize, batch_size: usize, total: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(total);
    while out.len() < total && n > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(batch_size) {
            if out.len() == total {
                break;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

fn patch_batch(cfg: &RunConfig, bundle: &DatasetBundle, instances: &[TimeSeriesInstance], idx: &[usize]) -> Result<PatchBatch> {
    let refs: Vec<&TimeSeriesInstance> = idx.iter().map(|&i| &instances[i]).collect();
    PatchBatch::new(&refs, bundle.max_length, &cfg.encoder.patch, cfg.precision)
}

fn finish(stage: Stage, frozen: Vec<&str>, before: BTreeMap<String, String>, comps: &Components, losses: Vec<f64>) -> Result<StageReport> {
    let report = StageReport {
        stage,
        steps: losses.len(),
        loss_curve: losses,
        frozen: frozen.iter().map(|s| s.to_string()).collect(),
        hashes_before: before,
        hashes_after: comps.hashes()?,
    };
    if !report.frozen_unchanged() {
        return Err(Error::invalid(format!("a frozen component changed during stage {stage:?}")));
    }
    Ok(report)
}

/// Stage E: masked reconstruction for the data-specific encoder and
/// cross-entropy for the task-specific encoder.
pub fn run_stage_e(sc: &StageConfig, cfg: &RunConfig, prep: &Prepared, comps: &mut Components) -> Result<StageReport> {
    sc.validate()?;
    let t = sc.tunable();
    let seed = sc.seed.unwrap_or(cfg.seed);
    let before = comps.hashes()?;
    let train = &prep.bundle.train;
    let total = sc.total_steps(train.len());
    let schedule = Schedule::Exponential {
        gamma: sc.lr_decay,
        steps_per_epoch: train.len().div_ceil(sc.batch_size),
    };
    let mut data_opt = t
        .data_encoder
        .then(|| Trainer::new("E", comps.data_encoder.store.vars(), sc.optim(), schedule, total))
        .transpose()?;
    let mut task_opt = t
        .task_encoder
        .then(|| Trainer::new("E", comps.task_encoder.store.vars(), sc.optim(), schedule, total))
        .transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage-e"));
    let mut losses = Vec::with_capacity(total);
    for (step, idx) in epoch_batches(train.len(), sc.batch_size, total, &mut rng).iter().enumerate() {
        let batch = patch_batch(cfg, &prep.bundle, train, idx)?;
        let mut loss = 0.0;
        if let Some(opt) = data_opt.as_mut() {
            let masks = MaskSpec::sample_batch(&batch, cfg.encoder.mask_ratio, derive_seed(seed, &format!("mask-{step}")))?;
            loss += opt.step(&masked_reconstruction_loss(&comps.data_encoder, &batch, &masks)?)?;
        }
        if let Some(opt) = task_opt.as_mut() {
            loss += opt.step(&supervised_loss(&comps.task_encoder, &batch)?)?;
        }
        losses.push(loss);
    }
    finish(Stage::E, t.frozen(Stage::E), before, comps, losses)
}

fn hierarchical(cfg: &RunConfig, comps: &Components, batch: &PatchBatch, grad: bool) -> Result<HierarchicalEmbedding> {
    let z = encode_hierarchical(batch, &comps.data_encoder, &comps.task_encoder, cfg.encoder_variant)?;
    Ok(if grad { z } else { HierarchicalEmbedding { tokens: z.tokens.detach(), ..z } })
}

/// Stage A: coarse and fine alignment between query outputs and label texts.
pub fn run_stage_a(sc: &StageConfig, cfg: &RunConfig, prep: &Prepared, comps: &mut Components) -> Result<StageReport> {
    sc.validate()?;
    let t = sc.tunable();
    let seed = sc.seed.unwrap_or(cfg.seed);
    let before = comps.hashes()?;
    let frozen = t.frozen(Stage::A);
    let train = &prep.bundle.train;
    let total = sc.total_steps(train.len());
    let vars = comps.vars(&t, Stage::A);
    let mut opt = (total > 0)
        .then(|| Trainer::new("A", vars, sc.optim(), Schedule::WarmupCosine { warmup: sc.warmup }, total))
        .transpose()?;
    let texts = prep.label_texts();
    let c = texts.len();
    let k = comps.alignment.cfg.negatives_per_positive;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage-a"));
    let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage-a-negatives"));
    let mut losses = Vec::with_capacity(total);
    for idx in epoch_batches(train.len(), sc.batch_size, total, &mut rng) {
        let batch = patch_batch(cfg, &prep.bundle, train, &idx)?;
        let z = hierarchical(cfg, comps, &batch, t.encoders())?;
        let q = comps.alignment.compute_query_output(&z)?;
        let e_t = comps.alignment.embed_texts(&texts)?;
        let (pos, neg) = alignment::sample_negatives(&batch.labels, c, k, &mut neg_rng)?;
        let pairs = PairBatch::new(q, e_t, pos, neg)?;
        let l = total_alignment_loss(&pairs, &comps.alignment.matcher, &comps.alignment.cfg)?;
        losses.push(opt.as_mut().expect("steps imply a trainer").step(&l.total)?);
    }
    finish(Stage::A, frozen, before, comps, losses)
}

/// Per-label train-mode inputs and one infer-mode input, with placeholder aligned rows.
pub struct InputTemplates {
    pub train: Vec<MultimodalInput>,
    pub infer: MultimodalInput,
}

pub fn input_templates(cfg: &RunConfig, prep: &Prepared, prompt: &PromptBundle, tokenizer: &Tokenizer) -> Result<InputTemplates> {
    let s = if cfg.aligned_input { cfg.alignment.num_queries } else { 0 };
    let placeholder = Tensor::zeros((s, cfg.lm.width), cfg.precision.dtype(), &candle_core::Device::Cpu)?;
    let train = prep
        .labels
        .iter()
        .map(|l| {
            let p = prompt.clone().with_target(l, &prep.prompt_cfg.answer_template)?;
            assemble_input(&placeholder, &p, tokenizer, InputMode::Train)
        })
        .collect::<Result<Vec<_>>>()?;
    let infer = assemble_input(&placeholder, prompt, tokenizer, InputMode::Infer)?;
    Ok(InputTemplates { train, infer })
}

/// Text-only next-token training of the base model with zero aligned rows.
pub fn pretrain_base(base: &ToyLm, templates: &InputTemplates, cfg: &LmConfig, seed: u64) -> Result<Vec<f64>> {
    let opt_cfg = OptimConfig {
        learning_rate: cfg.pretrain_lr,
        weight_decay: 0.0,
        clip_norm: 1.0,
    };
    let steps = cfg.pretrain_steps;
    if steps == 0 {
        return Ok(Vec::new());
    }
    let mut opt = Trainer::new("G", base.store.vars(), opt_cfg, Schedule::WarmupCosine { warmup: steps / 10 }, steps)?;
    let c = templates.train.len();
    let mut order: Vec<usize> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(cfg.pretrain_batch);
        while batch.len() < cfg.pretrain_batch.max(1) {
            if order.is_empty() {
                order = (0..c).collect();
                order.shuffle(&mut rng);
            }
            batch.push(templates.train[order.pop().expect("non-empty")].clone());
        }
        losses.push(opt.step(&sft_loss(&base.model, &batch)?)?);
    }
    Ok(losses)
}

/// Builds, pretrains and adapts the language model for `prep`.
pub fn build_lm(cfg: &RunConfig, prep: &Prepared) -> Result<LmHead> {
    let seed = derive_seed(cfg.seed, LM_ID);
    let base = ToyLm::new(&cfg.lm, prep.tokenizer.len(), cfg.precision, seed)?;
    let templates = input_templates(cfg, prep, &prep.prompt, &prep.tokenizer)?;
    pretrain_base(&base, &templates, &cfg.lm, derive_seed(seed, "pretrain"))?;
    LmHead::new(prep.tokenizer.clone(), base, &cfg.lora, cfg.alignment.width, derive_seed(seed, LORA))
}

/// `[B, S, lm_width]` aligned rows for a batch.
fn aligned_rows(cfg: &RunConfig, comps: &Components, batch: &PatchBatch, enc_grad: bool, align_grad: bool) -> Result<Option<Tensor>> {
    if !cfg.aligned_input {
        return Ok(None);
    }
    let lm = comps.lm.as_ref().ok_or_else(|| Error::invalid("language model not built"))?;
    let z = hierarchical(cfg, comps, batch, enc_grad)?;
    let mut q = comps.alignment.compute_query_output(&z)?;
    if !enc_grad && !align_grad {
        q.e_c_tokens = q.e_c_tokens.detach();
    }
    Ok(Some(lm.projection.project(&q)?))
}

fn fill(template: &MultimodalInput, rows: &Option<Tensor>, i: usize) -> Result<MultimodalInput> {
    Ok(match rows {
        Some(r) => template.with_aligned(r.get(i)?),
        None => template.clone(),
    })
}

/// Stage G: next-token fine-tuning with the base model frozen.
pub fn run_stage_g(sc: &StageConfig, cfg: &RunConfig, prep: &Prepared, comps: &mut Components) -> Result<StageReport> {
    sc.validate()?;
    let t = sc.tunable();
    let seed = sc.seed.unwrap_or(cfg.seed);
    if comps.lm.is_none() {
        comps.lm = Some(build_lm(cfg, prep)?);
    }
    let before = comps.hashes()?;
    let frozen = t.frozen(Stage::G);
    let train = &prep.bundle.train;
    let total = sc.total_steps(train.len());
    let vars = comps.vars(&t, Stage::G);
    let mut opt = (total > 0)
        .then(|| Trainer::new("G", vars, sc.optim(), Schedule::WarmupCosine { warmup: sc.warmup }, total))
        .transpose()?;
    let lm = comps.lm.as_ref().expect("built above");
    let templates = input_templates(cfg, prep, &prep.prompt, &lm.tokenizer)?;
    lm.adapted.set_training(true, derive_seed(seed, "lora-dropout"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage-g"));
    let mut losses = Vec::with_capacity(total);
    let result = (|| -> Result<()> {
        for idx in epoch_batches(train.len(), sc.batch_size, total, &mut rng) {
            let batch = patch_batch(cfg, &prep.bundle, train, &idx)?;
            let rows = aligned_rows(cfg, comps, &batch, t.encoders(), t.alignment)?;
            let inputs = batch
                .labels
                .iter()
                .enumerate()
                .map(|(i, &l)| fill(&templates.train[l], &rows, i))
                .collect::<Result<Vec<_>>>()?;
            let loss = sft_loss(&lm.adapted.model, &inputs)?;
            losses.push(opt.as_mut().expect("steps imply a trainer").step(&loss)?);
        }
        Ok(())
    })();
    lm.adapted.set_training(false, 0);
    result?;
    finish(Stage::G, frozen, before, comps, losses)
}

pub fn run_stage(sc: &StageConfig, cfg: &RunConfig, prep: &Prepared, comps: &mut Components) -> Result<StageReport> {
    match sc.stage {
        Stage::E => run_stage_e(sc, cfg, prep, comps),
        Stage::A => run_stage_a(sc, cfg, prep, comps),
        Stage::G => run_stage_g(sc, cfg, prep, comps),
    }
}

// ---------------------------------------------------------------------------
// Inference and evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub true_label: usize,
    #[serde(flatten)]
    pub result: GenerationResult,
}

/// Generates and parses a label for every instance.
pub fn classify(cfg: &RunConfig, prep: &Prepared, comps: &Components, instances: &[TimeSeriesInstance]) -> Result<Vec<Prediction>> {
    let lm = comps.lm.as_ref().ok_or_else(|| Error::invalid("classification needs a trained language model"))?;
    let templates = input_templates(cfg, prep, &prep.prompt, &lm.tokenizer)?;
    let mut out = Vec::with_capacity(instances.len());
    let idx: Vec<usize> = (0..instances.len()).collect();
    for chunk in idx.chunks(cfg.eval_batch) {
        let batch = patch_batch(cfg, &prep.bundle, instances, chunk)?;
        let rows = aligned_rows(cfg, comps, &batch, false, false)?.map(|r| r.detach());
        let inputs = (0..chunk.len()).map(|i| fill(&templates.infer, &rows, i)).collect::<Result<Vec<_>>>()?;
        let generated = generate_batch(&lm.adapted.model, &lm.tokenizer, &inputs, cfg.lm.max_new_tokens)?;
        for (&i, g) in chunk.iter().zip(generated) {
            out.push(Prediction {
                index: i,
                true_label: instances[i].label_id,
                result: GenerationResult::from_text(&g.text, &prep.labels),
            });
        }
    }
    Ok(out)
}

pub fn evaluate(
    cfg: &RunConfig,
    prep: &Prepared,
    comps: &Components,
    split: &str,
    variant: &str,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let instances = match split {
        "train" => &prep.bundle.train,
        "test" => &prep.bundle.test,
        other => return Err(Error::config(format!("unknown split {other:?}"))),
    };
    let preds = classify(cfg, prep, comps, instances)?;
    let parsed: Vec<Option<usize>> = preds.iter().map(|p| p.result.parsed_label_id).collect();
    let truth: Vec<usize> = preds.iter().map(|p| p.true_label).collect();
    let confusion = score_predictions(&parsed, &truth, prep.bundle.num_classes)?;
    let report = MetricsReport {
        dataset: prep.bundle.name.clone(),
        split: split.to_string(),
        variant: variant.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        component_hashes: comps.hashes()?,
        metrics: compute_metrics(&confusion)?,
        confusion,
    };
    Ok((report, preds))
}

/// Span-mass summary over the first instances of `instances`, with the prompt
/// rendered in `order`.
pub fn attention_analysis(
    cfg: &RunConfig,
    prep: &Prepared,
    comps: &Components,
    instances: &[TimeSeriesInstance],
    order: SlotOrder,
) -> Result<AttentionSummary> {
    let lm = comps.lm.as_ref().ok_or_else(|| Error::invalid("attention analysis needs a language model"))?;
    let prompt = prep.prompt_with_order(cfg.prompt_mode, order)?;
    let templates = input_templates(cfg, prep, &prompt, &lm.tokenizer)?;
    let n = cfg.attention_instances.min(instances.len()).max(1);
    let idx: Vec<usize> = (0..n).collect();
    let batch = patch_batch(cfg, &prep.bundle, instances, &idx)?;
    let rows = aligned_rows(cfg, comps, &batch, false, false)?.map(|r| r.detach());
    let reports = (0..n)
        .map(|i| lm::attention_report(&lm.adapted.model, &fill(&templates.infer, &rows, i)?))
        .collect::<Result<Vec<_>>>()?;
    eval::aggregate_attention(order.as_str(), &reports)
}

// ---------------------------------------------------------------------------
// Full runs

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub stages: Vec<StageReport>,
    pub report: Option<MetricsReport>,
}

/// Runs every configured stage, saves checkpoints and, when stage G ran,
/// evaluates on the test split and writes all reports under `output_dir`.
pub fn run_pipeline(cfg: &RunConfig, variant: &str) -> Result<(RunOutcome, Components, Prepared)> {
    let prep = prepare(cfg)?;
    let mut comps = Components::init(cfg, &prep)?;
    let mut stages = Vec::new();
    for sc in &cfg.stages {
        stages.push(run_stage(sc, cfg, &prep, &mut comps)?);
    }
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let progress = progress_map(&stages);
    comps.save(&out.join("checkpoints"), &progress)?;
    write_atomic(&out.join("stages.json"), serde_json::to_string_pretty(&stages)?.as_bytes())?;
    let report = if comps.lm.is_some() {
        let (report, preds) = evaluate(cfg, &prep, &comps, "test", variant)?;
        report.write(out)?;
        write_atomic(&out.join("predictions.json"), serde_json::to_string_pretty(&preds)?.as_bytes())?;
        write_attention(cfg, &prep, &comps, out)?;
        write_embeddings(&out.join("embeddings.jsonl"), cfg, &prep, &comps)?;
        Some(report)
    } else {
        None
    };
    Ok((RunOutcome { stages, report }, comps, prep))
}

/// Writes data, task and concatenated embeddings of both splits as JSON lines.
pub fn write_embeddings(path: &Path, cfg: &RunConfig, prep: &Prepared, comps: &Components) -> Result<()> {
    let mut all = Vec::new();
    for source in [EmbeddingSource::Data, EmbeddingSource::Task, EmbeddingSource::Concat] {
        for (split, insts) in [("train", &prep.bundle.train), ("test", &prep.bundle.test)] {
            all.extend(export_embeddings(
                insts,
                prep.bundle.max_length,
                &cfg.encoder.patch,
                cfg.precision,
                &comps.data_encoder,
                &comps.task_encoder,
                source,
                split,
            )?);
        }
    }
    eval::write_jsonl(path, &all)
}

pub fn progress_map(stages: &[StageReport]) -> BTreeMap<String, TrainingProgress> {
    let mut m = BTreeMap::new();
    for s in stages {
        let owners: &[&str] = match s.stage {
            Stage::E => &[DATA_ENCODER_ID, TASK_ENCODER_ID],
            Stage::A => &[ALIGNMENT_ID],
            Stage::G => &[LM_ID],
        };
        for o in owners {
            m.insert(o.to_string(), s.progress());
        }
    }
    m
}

/// Writes `attention.json` with one summary per slot order.
pub fn write_attention(cfg: &RunConfig, prep: &Prepared, comps: &Components, dir: &Path) -> Result<BTreeMap<String, AttentionSummary>> {
    let mut all = BTreeMap::new();
    for order in [SlotOrder::SlotFirst, SlotOrder::SlotLast] {
        let s = attention_analysis(cfg, prep, comps, &prep.bundle.test, order)?;
        all.insert(order.as_str().to_string(), s);
    }
    write_atomic(&dir.join("attention.json"), serde_json::to_string_pretty(&all)?.as_bytes())?;
    Ok(all)
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentVariant {
    CoarseFine,
    Fine,
    Coarse,
    /// Stage A runs zero steps; the alignment module keeps its initialization.
    Random,
}

impl AlignmentVariant {
    pub const ALL: [AlignmentVariant; 4] = [Self::CoarseFine, Self::Fine, Self::Coarse, Self::Random];

    pub fn apply(self, cfg: &mut RunConfig) {
        let (alpha, beta) = match self {
            Self::CoarseFine | Self::Random => (1.0, 1.0),
            Self::Fine => (0.0, 1.0),
            Self::Coarse => (1.0, 0.0),
        };
        cfg.alignment.alpha = alpha;
        cfg.alignment.beta = beta;
        if self == Self::Random {
            if let Some(a) = cfg.stage_mut(Stage::A) {
                a.epochs = 0;
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::CoarseFine => "coarse+fine",
            Self::Fine => "fine",
            Self::Coarse => "coarse",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Ablation {
    EncoderVariant,
    AlignmentVariant,
    PromptOnOff,
    Paradigm,
    FewShot(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub unparsed_rate: f64,
    /// Whether every frozen component kept its hash in every stage.
    pub frozen_unchanged: bool,
}

fn row(variant: &str, outcome: &RunOutcome) -> Result<AblationRow> {
    let m = &outcome
        .report
        .as_ref()
        .ok_or_else(|| Error::config("ablation runs must include stage G"))?
        .metrics;
    Ok(AblationRow {
        variant: variant.to_string(),
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        unparsed_rate: m.unparsed_rate,
        frozen_unchanged: outcome.stages.iter().all(StageReport::frozen_unchanged),
    })
}

fn sub_run(cfg: &RunConfig, name: &str, edit: impl FnOnce(&mut RunConfig)) -> Result<AblationRow> {
    sub_run_in(cfg, name, name, edit)
}

fn sub_run_in(cfg: &RunConfig, dir: &str, name: &str, edit: impl FnOnce(&mut RunConfig)) -> Result<AblationRow> {
    let mut c = cfg.clone();
    c.output_dir = cfg.output_dir.join(dir);
    edit(&mut c);
    let (outcome, _, _) = run_pipeline(&c, name)?;
    row(name, &outcome)
}

/// Runs one ablation grid and writes `<kind>.csv` and `<kind>.json` under `output_dir`.
pub fn ablate(cfg: &RunConfig, kind: &Ablation) -> Result<Vec<AblationRow>> {
    let (file, rows) = match kind {
        Ablation::EncoderVariant => {
            let rows = [EncoderVariant::Hierarchical, EncoderVariant::DataOnly, EncoderVariant::TaskOnly]
                .into_iter()
                .map(|v| {
                    let name = format!("{v:?}").to_lowercase();
                    sub_run(cfg, &name, |c| c.encoder_variant = v)
                })
                .collect::<Result<Vec<_>>>()?;
            ("encoder_variants", rows)
        }
        Ablation::AlignmentVariant => {
            let rows = AlignmentVariant::ALL
                .into_iter()
                .map(|v| sub_run(cfg, v.label(), |c| v.apply(c)))
                .collect::<Result<Vec<_>>>()?;
            ("alignment_variants", rows)
        }
        Ablation::PromptOnOff => {
            let rows = [("with-prompt", PromptMode::Full), ("without-prompt", PromptMode::Bare)]
                .into_iter()
                .map(|(name, mode)| sub_run(cfg, name, |c| c.prompt_mode = mode))
                .collect::<Result<Vec<_>>>()?;
            ("prompt", rows)
        }
        Ablation::Paradigm => {
            let rows = Paradigm::ALL
                .into_iter()
                .map(|p| sub_run_in(cfg, p.slug(), p.label(), |c| p.apply(&mut c.stages)))
                .collect::<Result<Vec<_>>>()?;
            ("paradigms", rows)
        }
        Ablation::FewShot(fractions) => {
            few_shot_sweep(cfg, fractions)?;
            return Ok(Vec::new());
        }
    };
    write_rows(&cfg.output_dir, file, &rows)?;
    Ok(rows)
}

pub fn write_rows(dir: &Path, file: &str, rows: &[AblationRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join(format!("{file}.csv")), &bytes)?;
    write_atomic(&dir.join(format!("{file}.json")), serde_json::to_string_pretty(rows)?.as_bytes())?;
    Ok(())
}

/// One full run per satisfiable fraction; infeasible fractions are skipped.
pub fn few_shot_sweep(cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<FewShotRow>> {
    let mut rows = Vec::new();
    for &fraction in fractions {
        let mut c = cfg.clone();
        c.output_dir = cfg.output_dir.join(format!("fewshot-{fraction}"));
        c.few_shot = Some(SplitSpec {
            fraction,
            seed: cfg.seed,
            min_per_class: 1,
        });
        match run_pipeline(&c, &format!("fewshot-{fraction}")) {
            Ok((outcome, _, prep)) => {
                let m = &outcome.report.ok_or_else(|| Error::config("few-shot runs must include stage G"))?.metrics;
                rows.push(FewShotRow {
                    fraction,
                    train_size: prep.bundle.train.len(),
                    accuracy: m.accuracy,
                    macro_f1: m.macro_f1,
                    unparsed_rate: m.unparsed_rate,
                });
            }
            Err(Error::Config(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    eval::write_few_shot(&rows, &cfg.output_dir)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order_and_flags_validate() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.stages.swap(0, 1);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut e = StageConfig::new(Stage::E);
        e.tunable = Some(Tunable { data_encoder: false, task_encoder: false, ..Tunable::default_for(Stage::E) });
        assert!(e.validate().is_err());
        let mut g = StageConfig::new(Stage::G);
        g.tunable = Some(Tunable { lora: false, ..Tunable::default_for(Stage::G) });
        assert!(g.validate().is_err());
    }

    #[test]
    fn paradigms_set_encoder_flags() {
        let mut stages = RunConfig::default().stages;
        Paradigm::TtFt.apply(&mut stages);
        assert!(stages[1].tunable().encoders());
        assert!(!stages[2].tunable().encoders());
        assert!(stages[2].tunable().lora);
        assert!(stages[2].tunable().frozen(Stage::G).contains(&DATA_ENCODER_ID));
        assert!(stages[2].tunable().frozen(Stage::G).contains(&LM_BASE));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = epoch_batches(10, 4, 6, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2, 4, 4, 2]);
        let mut first: Vec<usize> = b[..3].iter().flatten().copied().collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn config_json_round_trips_with_partial_input() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "stages": [{"stage": "E", "epochs": 2}]}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.stages[0].batch_size, 16);
        let again: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }
}

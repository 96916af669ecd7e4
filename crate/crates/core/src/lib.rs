//! Generative time-series classification: hierarchical patch encoders, a
//! contrastive query/text alignment module and a LoRA-adapted causal
//! language model that answers with label text.

pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompting;
pub mod tokenizer;

pub use error::{Error, Result};
pub use alignment::{AlignmentConfig, AlignmentModule, Aggregation};
pub use checkpoint::Checkpoint;
pub use data::{generate_synthetic, DatasetBundle, SplitSpec, SyntheticSpec, TimeSeriesInstance};
pub use encoders::{DataEncoder, EncoderConfig, EncoderVariant, PatchConfig, TaskEncoder};
pub use eval::{ConfusionMatrix, Metrics, MetricsReport};
pub use lm::{GenerationResult, LmConfig, LoraConfig, MatchKind};
pub use params::Precision;
pub use pipeline::{Paradigm, RunConfig, Stage, StageConfig, Tunable};
pub use prompting::{LabelSpec, PromptBundle, PromptTemplate, SlotOrder};

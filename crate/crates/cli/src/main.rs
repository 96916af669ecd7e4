use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use chronolm::checkpoint::write_atomic;
use chronolm::data::write_jsonl;
use chronolm::pipeline::{
    self, ablate, evaluate, run_stage, write_attention, write_embeddings, Ablation, Components, DatasetSource,
    Prepared,
};
use chronolm::{Error, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "chronolm", version, about = "Train and evaluate generative time-series classifiers")]
struct Cli {
    /// RunConfig JSON; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, normalize and split the dataset; write JSON-lines splits and the prompt.
    Prepare,
    /// Stage E: train the data- and task-specific encoders.
    TrainEncoders,
    /// Stage A: train the alignment module from saved encoders.
    TrainAlign,
    /// Stage G: fine-tune the language model from saved checkpoints.
    Sft,
    /// Generate labels for a split or a `.ts` file.
    Classify {
        #[arg(long, default_value = "test")]
        split: String,
        /// `.ts` file sharing the configured train split's labels.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score a split and write metrics, attention and embedding reports.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run every configured stage and evaluate on the test split.
    Run,
    /// Run an ablation grid.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        /// Train fractions for the few-shot sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.8, 1.0])]
        fractions: Vec<f64>,
    },
    /// Print a summary of the reports found in the output directory.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    EncoderVariant,
    AlignmentVariant,
    PromptOnOff,
    Paradigm,
    FewShot,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn checkpoints(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn stage(cfg: &RunConfig, stage: Stage, prep: &Prepared, mut comps: Components) -> anyhow::Result<()> {
    let sc = cfg
        .stage(stage)
        .with_context(|| format!("config has no stage {stage:?}"))?;
    let report = run_stage(sc, cfg, prep, &mut comps)?;
    let progress = pipeline::progress_map(std::slice::from_ref(&report));
    comps.save(&checkpoints(cfg), &progress)?;
    std::fs::create_dir_all(cfg.output_dir.join("stages"))?;
    write_json(&cfg.output_dir.join("stages").join(format!("{stage:?}.json")), &report)?;
    println!(
        "stage {stage:?}: {} steps, final loss {:.6}",
        report.steps,
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    match cli.command {
        Command::Prepare => {
            let prep = pipeline::prepare(&cfg)?;
            let dir = cfg.output_dir.join("data");
            std::fs::create_dir_all(&dir)?;
            for (name, split) in [("train", &prep.bundle.train), ("test", &prep.bundle.test)] {
                let mut buf = Vec::new();
                write_jsonl(&prep.bundle, split, &mut buf)?;
                write_atomic(&dir.join(format!("{name}.jsonl")), &buf)?;
            }
            write_json(&dir.join("labels.json"), &prep.labels)?;
            write_json(&dir.join("prompt.json"), &prep.prompt)?;
            write_atomic(&dir.join("tokenizer.json"), prep.tokenizer.to_json()?.as_bytes())?;
            println!(
                "{}: {} train, {} test, {} classes, {} channels, length {}",
                prep.bundle.name,
                prep.bundle.train.len(),
                prep.bundle.test.len(),
                prep.bundle.num_classes,
                prep.bundle.num_channels,
                prep.bundle.max_length
            );
        }
        Command::TrainEncoders => {
            let prep = pipeline::prepare(&cfg)?;
            let comps = Components::init(&cfg, &prep)?;
            stage(&cfg, Stage::E, &prep, comps)?;
        }
        Command::TrainAlign => {
            let prep = pipeline::prepare(&cfg)?;
            stage(&cfg, Stage::A, &prep, Components::load(&checkpoints(&cfg))?)?;
        }
        Command::Sft => {
            let prep = pipeline::prepare(&cfg)?;
            stage(&cfg, Stage::G, &prep, Components::load(&checkpoints(&cfg))?)?;
        }
        Command::Classify { split, input } => {
            let mut cfg = cfg;
            let split = match input {
                Some(path) => {
                    let DatasetSource::Ts { test, .. } = &mut cfg.dataset else {
                        bail!("--input needs a .ts dataset source to supply the label set");
                    };
                    *test = path;
                    cfg.few_shot = None;
                    "test".to_string()
                }
                None => split,
            };
            let prep = pipeline::prepare(&cfg)?;
            let comps = Components::load(&checkpoints(&cfg))?;
            let instances = match split.as_str() {
                "train" => &prep.bundle.train,
                "test" => &prep.bundle.test,
                other => bail!("unknown split {other:?}"),
            };
            let preds = pipeline::classify(&cfg, &prep, &comps, instances)?;
            write_json(&cfg.output_dir.join("predictions.json"), &preds)?;
            println!("{} predictions written", preds.len());
        }
        Command::Evaluate { split } => {
            let prep = pipeline::prepare(&cfg)?;
            let comps = Components::load(&checkpoints(&cfg))?;
            let (report, preds) = evaluate(&cfg, &prep, &comps, &split, "default")?;
            report.write(&cfg.output_dir)?;
            write_json(&cfg.output_dir.join("predictions.json"), &preds)?;
            write_attention(&cfg, &prep, &comps, &cfg.output_dir)?;
            write_embeddings(&cfg.output_dir.join("embeddings.jsonl"), &cfg, &prep, &comps)?;
            print_metrics(&report.metrics);
        }
        Command::Run => {
            let (outcome, _, _) = pipeline::run_pipeline(&cfg, "default")?;
            for s in &outcome.stages {
                println!("stage {:?}: {} steps", s.stage, s.steps);
            }
            if let Some(r) = &outcome.report {
                print_metrics(&r.metrics);
            }
        }
        Command::Ablate { kind, fractions } => {
            let kind = match kind {
                AblationKind::EncoderVariant => Ablation::EncoderVariant,
                AblationKind::AlignmentVariant => Ablation::AlignmentVariant,
                AblationKind::PromptOnOff => Ablation::PromptOnOff,
                AblationKind::Paradigm => Ablation::Paradigm,
                AblationKind::FewShot => Ablation::FewShot(fractions),
            };
            for r in ablate(&cfg, &kind)? {
                println!(
                    "{:<16} accuracy {:.4}  macro-F1 {:.4}  unparsed {:.4}  frozen-unchanged {}",
                    r.variant, r.accuracy, r.macro_f1, r.unparsed_rate, r.frozen_unchanged
                );
            }
        }
        Command::Report => report(&cfg.output_dir)?,
    }
    Ok(())
}

fn print_metrics(m: &chronolm::Metrics) {
    println!(
        "accuracy {:.4}  macro-F1 {:.4}  unparsed {:.4}  (n = {})",
        m.accuracy, m.macro_f1, m.unparsed_rate, m.total
    );
}

fn report(dir: &Path) -> anyhow::Result<()> {
    let metrics = dir.join("metrics.json");
    let mut found = false;
    if metrics.exists() {
        let r: chronolm::MetricsReport = serde_json::from_str(&std::fs::read_to_string(&metrics)?)?;
        println!("{} [{}] config {}", r.dataset, r.split, &r.config_hash[..12]);
        print_metrics(&r.metrics);
        found = true;
    }
    for table in ["encoder_variants", "alignment_variants", "prompt", "paradigms", "fewshot"] {
        let path = dir.join(format!("{table}.csv"));
        if path.exists() {
            println!("\n# {table}\n{}", std::fs::read_to_string(&path)?.trim_end());
            found = true;
        }
    }
    if !found {
        bail!("no reports found in {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Divergence { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

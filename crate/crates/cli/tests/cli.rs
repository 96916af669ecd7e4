use std::path::Path;
use std::process::{Command, Output};

use chronolm::pipeline::DatasetSource;
use chronolm::{
    AlignmentConfig, EncoderConfig, LmConfig, LoraConfig, MetricsReport, PatchConfig, RunConfig, Stage, StageConfig,
    SyntheticSpec,
};

fn tiny_config(out: &Path) -> RunConfig {
    RunConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            num_classes: 2,
            per_class_train: 6,
            per_class_test: 3,
            channels: 1,
            length: 16,
            noise_sigma: 0.1,
            seed: 5,
        }),
        encoder: EncoderConfig {
            patch: PatchConfig { patch_size: 4, stride: 4, embed_width: 16 },
            layers: 1,
            heads: 2,
            ffn_hidden: 32,
            shared_width: 16,
            mask_ratio: 0.25,
        },
        alignment: AlignmentConfig {
            num_queries: 2,
            width: 16,
            heads: 2,
            self_attention_layers: 1,
            ffn_hidden: 32,
            matcher_hidden: 16,
            ..AlignmentConfig::default()
        },
        lm: LmConfig {
            width: 16,
            layers: 1,
            heads: 2,
            ffn_hidden: 32,
            max_positions: 96,
            max_new_tokens: 8,
            pretrain_steps: 5,
            pretrain_lr: 3e-3,
            pretrain_batch: 4,
        },
        lora: LoraConfig { rank: 2, alpha: 4.0, ..LoraConfig::default() },
        stages: vec![
            StageConfig { epochs: 1, ..StageConfig::new(Stage::E) },
            StageConfig { epochs: 1, warmup: 1, ..StageConfig::new(Stage::A) },
            StageConfig { epochs: 1, warmup: 1, ..StageConfig::new(Stage::G) },
        ],
        attention_instances: 2,
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn chronolm(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chronolm"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn stage_commands_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), &tiny_config(&out));
    for cmd in ["prepare", "train-encoders", "train-align", "sft", "evaluate", "report"] {
        let o = chronolm(&config, &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["data/train.jsonl", "data/prompt.json", "checkpoints/lm.ckpt", "metrics.json", "confusion.csv", "attention.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.metrics.total, 6);
    assert_eq!(report.split, "test");
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&dir.path().join("run"));
    cfg.stages.swap(0, 2);
    let config = write_config(dir.path(), &cfg);
    let o = chronolm(&config, &["run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn classify_needs_trained_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config(&dir.path().join("run")));
    let o = chronolm(&config, &["classify"]);
    assert_eq!(o.status.code(), Some(1));
}

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chronolm::alignment::{sample_negatives, total_alignment_loss, PairBatch};
use chronolm::encoders::{encode_hierarchical, masked_reconstruction_loss, MaskSpec, PatchBatch};
use chronolm::pipeline::{build_lm, classify, prepare, Components, Prepared};
use chronolm::{RunConfig, TimeSeriesInstance};

const BATCH: usize = 8;

fn setup() -> (RunConfig, Prepared, Components, PatchBatch) {
    let cfg = RunConfig::default();
    let prep = prepare(&cfg).expect("default config prepares");
    let comps = Components::init(&cfg, &prep).expect("components initialize");
    let refs: Vec<&TimeSeriesInstance> = prep.bundle.train.iter().take(BATCH).collect();
    let batch = PatchBatch::new(&refs, prep.bundle.max_length, &cfg.encoder.patch, cfg.precision).expect("batch");
    (cfg, prep, comps, batch)
}

fn encoders(c: &mut Criterion) {
    let (cfg, _, comps, batch) = setup();
    let masks = MaskSpec::sample_batch(&batch, cfg.encoder.mask_ratio, 1).expect("masks");
    let mut g = c.benchmark_group("encoders");
    g.bench_function("hierarchical_forward", |b| {
        b.iter(|| encode_hierarchical(&batch, &comps.data_encoder, &comps.task_encoder, cfg.encoder_variant).unwrap())
    });
    g.bench_function("reconstruction_backward", |b| {
        b.iter(|| {
            masked_reconstruction_loss(&comps.data_encoder, &batch, &masks)
                .unwrap()
                .backward()
                .unwrap()
        })
    });
    g.finish();
}

fn alignment(c: &mut Criterion) {
    let (cfg, prep, comps, batch) = setup();
    let z = encode_hierarchical(&batch, &comps.data_encoder, &comps.task_encoder, cfg.encoder_variant).unwrap();
    let labels: Vec<usize> = prep.bundle.train.iter().take(BATCH).map(|i| i.label_id).collect();
    let texts = prep.label_texts();
    let mut g = c.benchmark_group("alignment");
    g.bench_function("total_loss_backward", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(7),
            |mut rng| {
                let (pos, neg) = sample_negatives(
                    &labels,
                    texts.len(),
                    cfg.alignment.negatives_per_positive,
                    &mut rng,
                )
                .unwrap();
                let q = comps.alignment.compute_query_output(&z).unwrap();
                let t = comps.alignment.embed_texts(&texts).unwrap();
                let pairs = PairBatch::new(q, t, pos, neg).unwrap();
                let l = total_alignment_loss(&pairs, &comps.alignment.matcher, &cfg.alignment).unwrap();
                l.total.backward().unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn language_model(c: &mut Criterion) {
    let (cfg, prep, mut comps, _) = setup();
    comps.lm = Some(build_lm(&cfg, &prep).expect("base model pretrains"));
    let instances = &prep.bundle.test[..BATCH];
    let mut g = c.benchmark_group("language_model");
    g.sample_size(10);
    g.bench_function("classify_batch", |b| b.iter(|| classify(&cfg, &prep, &comps, instances).unwrap()));
    g.finish();
}

criterion_group!(benches, encoders, alignment, language_model);
criterion_main!(benches);

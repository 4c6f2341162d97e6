//! Sequential vs rayon execution of the hot paths. Without the `parallel`
//! feature both variants run on the calling thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pbd::data::{builtin_words, source_ids, synthesize, Batch, CorruptionConfig, Example, Vocab};
use pbd::inference::{decode_all, Strategy};
use pbd::model::{init_model, ModelConfig, TransformerModel};
use pbd::training::{train_step, OptimState, TrainOptions};
use pbd::{ExecMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn model_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 256,
        max_len: 24,
        ..ModelConfig::default()
    }
}

fn corpus(count: usize) -> Vec<Example> {
    synthesize(&builtin_words(), count, &CorruptionConfig::with_total(0.15, 0)).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::<f32>::normal(&[256, 256], 1.0, &mut rng);
    let b = Tensor::<f32>::normal(&[256, 256], 1.0, &mut rng);
    let mut group = c.benchmark_group("matmul_256");
    for mode in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |bench| {
            bench.iter(|| a.matmul_with(mode, &b).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let vocab = Vocab::from_alphabet("abcdefghijklmnopqrstuvwxyz").unwrap();
    let examples = corpus(64);
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::from_examples(&refs, &vocab);
    let cfg = model_config(&vocab);
    let mut group = c.benchmark_group("train_step_b64");
    group.sample_size(20);
    for mode in MODES {
        let mut model: TransformerModel<f32> = init_model(&cfg, 0).unwrap();
        let mut optim = OptimState::new(model.params(), Default::default());
        let opts = TrainOptions {
            mode,
            ..TrainOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |bench| {
            bench.iter(|| train_step(&mut model, &batch, &mut optim, &opts).unwrap())
        });
    }
    group.finish();
}

fn greedy_batch(c: &mut Criterion) {
    let vocab = Vocab::from_alphabet("abcdefghijklmnopqrstuvwxyz").unwrap();
    let sources: Vec<Vec<u32>> = corpus(64).iter().map(|e| source_ids(&vocab, &e.source)).collect();
    let model: TransformerModel<f32> = init_model(&model_config(&vocab), 0).unwrap();
    let mut group = c.benchmark_group("greedy_decode_64");
    group.sample_size(20);
    for mode in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |bench| {
            bench.iter(|| decode_all(&model, &sources, Strategy::Greedy, 16, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, training_step, greedy_batch);
criterion_main!(benches);

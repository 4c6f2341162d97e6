//! Teacher-forced training: loss, Adam with warmup, gradient clipping and
//! checkpoints.

mod adam;
mod checkpoint;
mod loss;
mod schedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, peek_checkpoint,
    save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use loss::cross_entropy_loss;
pub use schedule::lr_schedule;

use crate::data::{make_batches, Batch, Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{Dropout, TransformerModel};
use crate::parallel::ExecMode;
use crate::scalar::Scalar;
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub label_smoothing: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub warmup: u64,
    /// Multiplier on the warmup schedule.
    pub lr_factor: f64,
    pub adam: AdamConfig,
    /// Seeds the per-step dropout streams.
    pub dropout_seed: u64,
    #[serde(skip)]
    pub mode: ExecMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            label_smoothing: 0.1,
            clip_norm: 1.0,
            warmup: 400,
            lr_factor: 1.0,
            adam: AdamConfig::default(),
            dropout_seed: 0,
            mode: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Mean token loss of `batch` and the gradient of every parameter.
pub fn compute_gradients<F: Scalar>(
    model: &TransformerModel<F>,
    batch: &Batch,
    smoothing: f64,
    drop: &mut Dropout,
    mode: ExecMode,
) -> Result<(f64, Vec<Option<Vec<F>>>)> {
    let mut g = Graph::new(model.params(), true).with_mode(mode);
    let loss = model.loss_graph(&mut g, batch, smoothing, drop)?;
    let value = g.value(loss).item()?.as_f64();
    Ok((value, g.backward(loss)?.into_param_grads()))
}

/// Scales `grads` so their global L2 norm is at most `clip_norm` and
/// returns the norm before scaling. `clip_norm == 0` only measures.
pub fn clip_gradients<F: Scalar>(grads: &mut [Option<Vec<F>>], clip_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum();
    let norm = sq.sqrt();
    if clip_norm > 0.0 && norm > clip_norm {
        let s = F::of_f64(clip_norm / norm);
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Forward, backward, clip and one Adam update. Aliased (shared) tensors
/// receive the sum of the gradients of all their uses.
pub fn train_step<F: Scalar>(
    model: &mut TransformerModel<F>,
    batch: &Batch,
    optim: &mut OptimState<F>,
    opts: &TrainOptions,
) -> Result<StepReport> {
    let step = optim.step + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
    rng.set_stream(step);
    let rate = model.config().dropout;
    let (loss, mut grads) = {
        let mut drop = Dropout::new(rate, &mut rng);
        compute_gradients(model, batch, opts.label_smoothing, &mut drop, opts.mode)?
    };
    let grad_norm = clip_gradients(&mut grads, opts.clip_norm);
    let lr = opts.lr_factor * lr_schedule(step, model.config().d_model, opts.warmup);
    let names = model.names().to_vec();
    adam_step(model.params_mut(), &grads, &names, optim, lr)?;
    Ok(StepReport {
        step,
        loss,
        lr,
        grad_norm,
    })
}

/// Deterministic batch order: epoch `e` is the corpus shuffled with
/// `seed + e`, so the batch for any step can be recomputed after a
/// restart.
pub struct BatchStream<'a> {
    examples: &'a [Example],
    vocab: &'a Vocab,
    batch_size: usize,
    seed: u64,
    max_len: usize,
    epoch: Option<u64>,
    batches: Vec<Batch>,
    per_epoch: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(examples: &'a [Example], vocab: &'a Vocab, batch_size: usize, seed: u64, max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(BatchStream {
            examples,
            vocab,
            batch_size,
            seed,
            max_len,
            epoch: None,
            batches: Vec::new(),
            per_epoch: examples.len().div_ceil(batch_size),
        })
    }

    /// The batch consumed by 1-based `step`.
    pub fn batch(&mut self, step: u64) -> Result<&Batch> {
        let index = (step.max(1) - 1) as usize;
        let epoch = (index / self.per_epoch) as u64;
        if self.epoch != Some(epoch) {
            self.batches = make_batches(
                self.examples,
                self.vocab,
                self.batch_size,
                self.seed.wrapping_add(epoch),
                self.max_len,
            )?;
            self.epoch = Some(epoch);
        }
        Ok(&self.batches[index % self.per_epoch])
    }
}

/// Trains until `optim.step == until_step`, calling `on_step` after every
/// update.
pub fn train_until<F: Scalar>(
    model: &mut TransformerModel<F>,
    optim: &mut OptimState<F>,
    data: &mut BatchStream<'_>,
    opts: &TrainOptions,
    until_step: u64,
    mut on_step: impl FnMut(&StepReport, &TransformerModel<F>, &OptimState<F>) -> Result<()>,
) -> Result<Vec<StepReport>> {
    let mut reports = Vec::new();
    while optim.step < until_step {
        let batch = data.batch(optim.step + 1)?;
        let r = train_step(model, batch, optim, opts)?;
        on_step(&r, model, optim)?;
        reports.push(r);
    }
    Ok(reports)
}

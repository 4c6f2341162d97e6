use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{init_model, Dropout, ModelConfig};
use crate::data::{Batch, BOS, EOS, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::tensor::gradcheck::{check_param_gradients, GroupReport};
use crate::tensor::Graph;

/// Finite-difference check of every parameter of a 64-bit model on one
/// random example with `n` source and `m` target positions.
///
/// Dropout is forced off. `fault` scales the analytic gradients, for
/// demonstrating that a wrong backward pass fails the check.
pub fn gradient_check(
    config: &ModelConfig,
    n: usize,
    m: usize,
    seed: u64,
    fault: Option<f64>,
) -> Result<Vec<GroupReport>> {
    if n == 0 || m == 0 {
        return Err(Error::Contract("gradient check needs non-empty sequences".into()));
    }
    let config = ModelConfig {
        dropout: 0.0,
        ..config.clone()
    };
    let model = init_model::<f64>(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut token = || rng.random_range(NUM_SPECIALS as u32..config.vocab_size as u32);
    let source: Vec<u32> = (0..n).map(|_| token()).collect();
    let target: Vec<u32> = (0..m).map(|_| token()).collect();
    let mut input = vec![BOS];
    input.extend_from_slice(&target[..m - 1]);
    let mut output = target[..m - 1].to_vec();
    output.push(EOS);
    let batch = Batch {
        source_ids: vec![source],
        target_input_ids: vec![input],
        target_output_ids: vec![output],
        source_lengths: vec![n],
        target_lengths: vec![m],
    };
    check_param_gradients(
        model.params(),
        model.names(),
        |g: &mut Graph<'_, f64>| {
            // The closure may see perturbed parameters; the layout is fixed.
            model.loss_graph(g, &batch, 0.1, &mut Dropout::off())
        },
        fault,
    )
}

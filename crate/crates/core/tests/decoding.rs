use pbd::data::{BOS, NUM_SPECIALS};
use pbd::inference::{argmax, beam_search, greedy_decode, DEFAULT_ALPHA};
use pbd::model::{init_model, ModelConfig, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(use_pbd: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        d_model: 12,
        n_heads: 3,
        n_layers: 2,
        d_ff: 20,
        max_len: 10,
        dropout: 0.0,
        use_pbd,
        use_segment: use_pbd,
        ..ModelConfig::default()
    }
}

#[test]
fn greedy_tokens_are_argmax_of_teacher_forced_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..10 {
        for use_pbd in [true, false] {
            let model: TransformerModel<f64> = init_model(&tiny(use_pbd), seed).unwrap();
            let n = rng.random_range(1..=8);
            let src: Vec<u32> = (0..n).map(|_| rng.random_range(NUM_SPECIALS as u32..9)).collect();
            let out = greedy_decode(&model, &src, 9).unwrap();
            let mut prefix = vec![BOS];
            prefix.extend(&out.tokens[..out.tokens.len() - 1]);
            let logits = model.logits(&src, &prefix).unwrap();
            for (t, &tok) in out.tokens.iter().enumerate() {
                assert_eq!(argmax(logits.row(t)) as u32, tok, "seed {seed} step {t}");
            }
        }
    }
}

#[test]
fn width_one_beam_is_greedy() {
    let model: TransformerModel<f32> = init_model(&tiny(true), 11).unwrap();
    for src in [vec![4, 5, 6], vec![8], vec![7, 7, 4, 5, 6, 8]] {
        let g = greedy_decode(&model, &src, 9).unwrap();
        let b = beam_search(&model, &src, 1, DEFAULT_ALPHA, 9).unwrap();
        assert_eq!(g.tokens, b.tokens);
    }
}

#[test]
fn decoding_is_deterministic() {
    let model: TransformerModel<f32> = init_model(&tiny(true), 5).unwrap();
    let src = vec![4, 6, 8, 5];
    let a = beam_search(&model, &src, 4, DEFAULT_ALPHA, 9).unwrap();
    let b = beam_search(&model, &src, 4, DEFAULT_ALPHA, 9).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
}

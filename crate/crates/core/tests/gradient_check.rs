//! Analytic gradients vs central finite differences, in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lilt_core::model::{Batch, ModelConfig, ModelState};

fn check_model(config: ModelConfig, batch: &Batch, coords: usize, seed: u64) {
    let model: ModelState<f64> = ModelState::init(config).unwrap();
    assert!(model.param_count() <= 10_000, "gradient check wants a small model");
    let (_, grads) = model.loss_and_grads(batch, None).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < coords {
        let pi = rng.gen_range(0..model.params().len());
        let ei = rng.gen_range(0..model.params()[pi].len());
        let analytic = grads[pi].as_slice()[ei];

        let mut plus = model.clone();
        plus.params_mut()[pi].as_mut_slice()[ei] += h;
        let (lp, _) = plus.loss_and_grads(batch, None).unwrap();
        let mut minus = model.clone();
        minus.params_mut()[pi].as_mut_slice()[ei] -= h;
        let (lm, _) = minus.loss_and_grads(batch, None).unwrap();
        let numeric = (lp.loss - lm.loss) / (2.0 * h);

        // coordinates the batch never touches have both sides zero
        if analytic == 0.0 && numeric.abs() < 1e-9 {
            checked += 1;
            continue;
        }
        let denom = numeric.abs().max(analytic.abs()).max(1e-6);
        let rel = (numeric - analytic).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel < 1e-3,
            "param {pi} elem {ei}: analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
        );
        checked += 1;
    }
    println!("checked {checked} coordinates, worst relative error {worst:.3e}");
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        max_len: 12,
        src_vocab_size: 12,
        tgt_vocab_size: 10,
        seed,
        shared_src_tgt_embeddings: false,
        label_smoothing: 0.1,
    }
}

#[test]
fn gradients_match_finite_differences() {
    let batch = Batch {
        src: vec![vec![4, 5, 6], vec![7, 8]],
        tgt: vec![vec![4, 7], vec![5, 6, 8]],
        weights: vec![1.0, 1.0],
    };
    check_model(small_config(11), &batch, 50, 101);
}

#[test]
fn gradients_match_with_weights_and_smoothing_off() {
    let mut config = small_config(12);
    config.label_smoothing = 0.0;
    let batch = Batch {
        src: vec![vec![4, 5], vec![6]],
        tgt: vec![vec![9], vec![4, 5]],
        weights: vec![0.25, 2.0],
    };
    check_model(config, &batch, 30, 202);
}

#[test]
fn gradients_match_on_d8_model_per_contract() {
    // the documented contract point: a d_model=8 model, 1e-3 step,
    // relative error below 1e-3 in 64-bit arithmetic
    let batch = Batch {
        src: vec![vec![4, 5, 6, 7]],
        tgt: vec![vec![8, 9, 4]],
        weights: vec![1.0],
    };
    check_model(small_config(13), &batch, 40, 303);
}

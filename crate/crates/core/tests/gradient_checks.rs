mod common;

use common::gradcheck::{attention, denoiser, encoder_rel_err};
use eeg2img::encoder::Mode;

#[test]
fn encoder_gradients_match_finite_differences_training_mode() {
    for seed in 0..3 {
        let err = encoder_rel_err(Mode::Train, 4, seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn encoder_gradients_match_finite_differences_inference_mode() {
    for seed in 0..3 {
        let err = encoder_rel_err(Mode::Inference, 1, seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn decoupled_attention_gradients_match_central_differences() {
    for seed in 0..5 {
        for lambda in [0.0, 0.7, 2.0] {
            let err = attention::rel_err(seed, lambda);
            assert!(err < 1e-5, "seed {seed} λ {lambda}: rel err {err:e}");
        }
    }
}

#[test]
fn toy_denoiser_parameter_gradients_match_central_differences() {
    for seed in 0..3 {
        for lambda in [0.0, 1.0] {
            let err = denoiser::rel_err(seed, lambda);
            assert!(err < 1e-6, "seed {seed} λ {lambda}: rel err {err:e}");
        }
    }
}

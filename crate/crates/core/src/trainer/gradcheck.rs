//! Finite-difference verification of the complete training objective on a
//! tiny 64-bit model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{build_aipa_batch, AugmentConfig, MixBatch};
use crate::data::{batch_from_samples, generate_split, GenConfig};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, ModelParams};
use crate::ndgrad::{grad_check, GradError, Graph};
use crate::trainer::{build_objective, ObjectiveConfig};
use crate::Result;

/// One-layer, width-8 encoder-decoder over a 3-token alphabet.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 4,
        vocab: 7,
        width: 8,
        heads: 2,
        ffn: 16,
        enc_layers: 1,
        dec_layers: 1,
        subsample: 2,
        inter_ctc_layers: vec![1],
        dropout: 0.0,
    }
}

/// Three short utterances plus three interpolated rows.
pub fn tiny_mix_batch(seed: u64) -> Result<MixBatch> {
    let gen = GenConfig {
        alphabet: 3,
        utterances: 3,
        min_tokens: 1,
        max_tokens: 2,
        min_duration: 2,
        max_duration: 3,
        feat_dim: 4,
        noise: 0.3,
        ..GenConfig::default()
    };
    let samples = generate_split(&gen, seed, "check")?;
    let refs: Vec<_> = samples.iter().collect();
    let batch = batch_from_samples(&refs)?;
    let aug = AugmentConfig {
        alpha: 2.0,
        ..AugmentConfig::default()
    };
    build_aipa_batch(batch, &aug, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Max relative error between reverse-mode and central-difference gradients
/// of the full objective with respect to every parameter. COS teachers are
/// read once at the unperturbed parameters and held fixed, as in training.
pub fn check_objective(model: &ModelConfig, mb: &MixBatch, obj: &ObjectiveConfig, seed: u64) -> Result<f64> {
    let params = ModelParams::<f64>::init(model.clone(), seed)?;
    let teachers = {
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g, false);
        build_objective(&mut g, &bound, mb, obj, None)?.teachers
    };
    let err = grad_check(
        |g, vars| {
            let bound = ModelParams::<f64>::bind_vars(model, vars).map_err(|e| GradError::Shape(e.to_string()))?;
            build_objective(g, &bound, mb, obj, Some(&teachers))
                .map(|o| o.total)
                .map_err(|e| GradError::Shape(e.to_string()))
        },
        &params.ordered(),
        1e-6,
    )?;
    Ok(err)
}

/// The four objective variants covered by the gradient suite: EIP on/off,
/// with and without COS.
pub fn objective_variants() -> Vec<(&'static str, ObjectiveConfig)> {
    let with_cos = LossWeights::enc_dec();
    let no_cos = LossWeights {
        ctc_cos: 0.0,
        ce_cos: 0.0,
        ..with_cos
    };
    let mk = |weights, eip, inter_cos| ObjectiveConfig {
        eip,
        inter_cos,
        ..ObjectiveConfig::new(weights)
    };
    vec![
        ("cos+eip", mk(with_cos, true, true)),
        ("cos+two-pass", mk(with_cos, false, true)),
        ("interp+eip", mk(no_cos, true, false)),
        ("interp+two-pass", mk(no_cos, false, false)),
    ]
}

//! Synthetic routing traces.
//!
//! Each layer has a static bias `b` and a latent vector `z`, both with
//! standard normal entries. The first pass draws `z` fresh; later passes
//! follow an AR(1) process `z <- rho * z + sqrt(1 - rho^2) * eta`. Draws for
//! layer L+1 mix layer L's current values with weight `layer_sim`, so
//! adjacent layers route alike. Routing scores are `softmax(skew * b + z)`.

pub mod io;
pub mod stats;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{top_indices, ForwardPass, LayerRequest, ModelConfig, Stage, Trace};

/// Prefill tokens see their own logit perturbation of this many `skew` units.
pub const PREFILL_TOKEN_NOISE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Scale of the static per-layer bias; larger values concentrate routing
    /// on fewer experts over the long run.
    pub skew: f64,
    /// Per-expert latent autocorrelation between consecutive passes.
    pub temporal_rho: f64,
    /// Latent correlation between adjacent layers within a pass.
    pub layer_sim: f64,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("skew must be finite and nonnegative, got {0}")]
    Skew(f64),
    #[error("temporal_rho must lie in [0, 1), got {0}")]
    Rho(f64),
    #[error("layer_sim must lie in [0, 1), got {0}")]
    LayerSim(f64),
    #[error(transparent)]
    Config(#[from] crate::model::ModelError),
}

impl GenParams {
    /// The shipped calibration for a model family: a rising reuse-by-score
    /// curve and an activation distribution flatter than neuron sparsity.
    pub fn calibrated(config: &ModelConfig, seed: u64) -> Self {
        let (skew, temporal_rho, layer_sim) = match config.name.as_str() {
            // Eight experts per layer: any latent persistence makes the
            // previous pass a better predictor than accumulated scores.
            "mixtral" => (1.1, 0.0, 0.6),
            "qwen2" => (0.8, 0.3, 0.6),
            "deepseek" => (0.7, 0.2, 0.6),
            _ => (0.8, 0.3, 0.6),
        };
        GenParams {
            skew,
            temporal_rho,
            layer_sim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(GenError::Skew(self.skew));
        }
        if !(0.0..1.0).contains(&self.temporal_rho) {
            return Err(GenError::Rho(self.temporal_rho));
        }
        if !(0.0..1.0).contains(&self.layer_sim) {
            return Err(GenError::LayerSim(self.layer_sim));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Generates one prefill pass of `prefill_tokens` tokens (skipped when zero)
/// followed by `decode_steps` single-token passes.
pub fn generate_trace(
    config: &ModelConfig,
    params: &GenParams,
    prefill_tokens: u32,
    decode_steps: usize,
) -> Result<Trace, GenError> {
    config.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = config.num_routed;
    let k = config.num_activated;
    let rho = params.temporal_rho;
    let ls = params.layer_sim;
    let rho_c = (1.0 - rho * rho).sqrt();
    let ls_c = (1.0 - ls * ls).sqrt();

    let mixed_draw = |rng: &mut ChaCha8Rng, prev: Option<&Vec<f64>>| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let fresh: f64 = StandardNormal.sample(rng);
                prev.map_or(fresh, |p| ls * p[i] + ls_c * fresh)
            })
            .collect()
    };
    let mut bias: Vec<Vec<f64>> = Vec::with_capacity(config.num_layers);
    let mut latent: Vec<Vec<f64>> = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let b = mixed_draw(&mut rng, l.checked_sub(1).map(|p| &bias[p]));
        bias.push(b);
        let z = mixed_draw(&mut rng, l.checked_sub(1).map(|p| &latent[p]));
        latent.push(z);
    }

    let total = decode_steps + usize::from(prefill_tokens > 0);
    let mut passes = Vec::with_capacity(total);
    for t in 0..total {
        if t > 0 {
            for l in 0..config.num_layers {
                let eta = mixed_draw(&mut rng, l.checked_sub(1).map(|p| &latent[p]));
                for (z, e) in latent[l].iter_mut().zip(eta) {
                    *z = rho * *z + rho_c * e;
                }
            }
        }
        let prefill = t == 0 && prefill_tokens > 0;
        let layers = (0..config.num_layers)
            .map(|l| {
                let logits: Vec<f64> = bias[l]
                    .iter()
                    .zip(&latent[l])
                    .map(|(&b, &z)| params.skew * b + z)
                    .collect();
                if prefill {
                    prefill_layer(l, &logits, k, prefill_tokens, params.skew, &mut rng)
                } else {
                    let scores = softmax(&logits);
                    let mut loads = vec![0u32; n];
                    for i in top_indices(&scores, k) {
                        loads[i] = 1;
                    }
                    LayerRequest::new(l, loads, scores)
                }
            })
            .collect();
        passes.push(ForwardPass {
            stage: if prefill {
                Stage::Prefill
            } else {
                Stage::Decode
            },
            token_count: if prefill { prefill_tokens } else { 1 },
            layers,
        });
    }

    let metadata: BTreeMap<String, String> = [
        ("generator", "latent-gaussian".to_string()),
        ("skew", params.skew.to_string()),
        ("temporal_rho", params.temporal_rho.to_string()),
        ("layer_sim", params.layer_sim.to_string()),
        ("seed", params.seed.to_string()),
        ("prefill_tokens", prefill_tokens.to_string()),
        ("decode_steps", decode_steps.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(Trace {
        config: config.clone(),
        passes,
        metadata,
    })
}

fn prefill_layer(
    layer: usize,
    logits: &[f64],
    k: usize,
    tokens: u32,
    skew: f64,
    rng: &mut ChaCha8Rng,
) -> LayerRequest {
    let n = logits.len();
    let mut loads = vec![0u32; n];
    let mut scores = vec![0.0; n];
    let mut token_logits = vec![0.0; n];
    for _ in 0..tokens {
        for (t, &x) in token_logits.iter_mut().zip(logits) {
            let xi: f64 = StandardNormal.sample(rng);
            *t = x + PREFILL_TOKEN_NOISE * skew * xi;
        }
        let probs = softmax(&token_logits);
        for i in top_indices(&probs, k) {
            loads[i] += 1;
        }
        for (s, p) in scores.iter_mut().zip(&probs) {
            *s += p;
        }
    }
    let sum: f64 = scores.iter().sum();
    for s in &mut scores {
        *s /= sum;
    }
    LayerRequest::new(layer, loads, scores)
}

//! Inter-layer prefetching: predict which experts the next few layers will
//! activate, estimate how much each preload would shorten that layer's plan,
//! and fill idle PCIe time with the most valuable ones.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::CostModel;
use crate::model::{ExpertRef, LayerRequest, Trace};
use crate::scheduler::{select_plan, Residency, WithExtra};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionModel {
    /// Layers ahead to predict.
    pub horizon: usize,
    /// Probability that each truly activated expert is predicted.
    pub accuracy: f64,
}

impl Default for PredictionModel {
    fn default() -> Self {
        Self {
            horizon: 3,
            accuracy: 0.85,
        }
    }
}

impl PredictionModel {
    pub fn validate(&self, num_layers: usize) -> Result<(), String> {
        if self.horizon == 0 || self.horizon > num_layers {
            return Err(format!(
                "prefetch horizon must be in 1..={num_layers}, got {}",
                self.horizon
            ));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(format!(
                "prediction accuracy must be in [0, 1], got {}",
                self.accuracy
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrefetchCandidate {
    pub expert: ExpertRef,
    pub predicted_load: u32,
    /// Estimated makespan reduction of the predicted layer.
    pub gain: f64,
    /// Transfer time.
    pub cost: f64,
}

/// Noisy view of the true routing of the layers after `current_layer`.
///
/// Each activated expert survives with probability `accuracy`. The dropped
/// ones are replaced by a uniformly drawn set of experts outside the
/// survivors (a dropped expert may be drawn back), and loads and scores move
/// with the swap so the score vector still sums to one. At accuracy 0 the
/// prediction is therefore an unbiased random K-subset. The horizon is cut at
/// the last layer. Every target layer draws from its own stream of `seed`.
pub fn predict_activations(
    trace: &Trace,
    pass: usize,
    current_layer: usize,
    model: &PredictionModel,
    seed: u64,
) -> Vec<LayerRequest> {
    let layers = &trace.passes[pass].layers;
    let num_layers = layers.len();
    let last = (current_layer + model.horizon).min(num_layers - 1);
    (current_layer + 1..=last)
        .map(|target| {
            let truth = &layers[target];
            if model.accuracy >= 1.0 {
                return truth.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((pass * num_layers + target) as u64);
            perturb(truth, model.accuracy, &mut rng)
        })
        .collect()
}

fn perturb(truth: &LayerRequest, accuracy: f64, rng: &mut impl Rng) -> LayerRequest {
    let n = truth.loads.len();
    let (kept, dropped): (Vec<usize>, Vec<usize>) = truth
        .activated
        .iter()
        .partition(|_| rng.random::<f64>() < accuracy);
    if dropped.is_empty() {
        return truth.clone();
    }
    let pool: Vec<usize> = (0..n).filter(|i| !kept.contains(i)).collect();
    let drawn: Vec<usize> = sample(rng, pool.len(), dropped.len())
        .into_iter()
        .map(|k| pool[k])
        .collect();

    let mut loads = truth.loads.clone();
    let mut scores = truth.scores.clone();
    // Experts that lose their activation take over the values of the ones
    // that gain it, so the result is a permutation of the original vectors.
    let gained = drawn.iter().filter(|d| !dropped.contains(d));
    let lost = dropped.iter().filter(|d| !drawn.contains(d));
    for (&g, &l) in gained.zip(lost) {
        loads[l] = truth.loads[g];
        scores[l] = truth.scores[g];
    }
    for (&to, &from) in drawn.iter().zip(&dropped) {
        loads[to] = truth.loads[from];
        scores[to] = truth.scores[from];
    }
    LayerRequest::new(truth.layer, loads, scores)
}

/// Makespan of the predicted layer without the candidate minus the makespan
/// with it resident, both from the scheduler's plan selection.
pub fn evaluate_gain(
    candidate: ExpertRef,
    predicted: &LayerRequest,
    cache: &impl Residency,
    cost: &CostModel,
) -> f64 {
    let base = select_plan(predicted, cache, cost).makespan;
    gain_against(base, candidate, predicted, cache, cost)
}

fn gain_against(
    base: f64,
    candidate: ExpertRef,
    predicted: &LayerRequest,
    cache: &impl Residency,
    cost: &CostModel,
) -> f64 {
    let with = WithExtra {
        base: cache,
        extra: candidate,
    };
    base - select_plan(predicted, &with, cost).makespan
}

/// A predicted layer as the scheduler would run it with today's cache.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedLayer {
    pub layer: usize,
    pub makespan: f64,
    /// PCIe time the predicted plan spends on demand transfers.
    pub pcie_busy: f64,
}

/// Candidates for every predicted layer, each evaluated against its own
/// layer, plus a plan summary of every predicted layer.
pub fn build_candidates(
    predicted: &[LayerRequest],
    cache: &impl Residency,
    cost: &CostModel,
) -> (Vec<PrefetchCandidate>, Vec<PredictedLayer>) {
    let mut out = Vec::new();
    let mut layers = Vec::with_capacity(predicted.len());
    for req in predicted {
        let base = select_plan(req, cache, cost);
        layers.push(PredictedLayer {
            layer: req.layer,
            makespan: base.makespan,
            pcie_busy: base.busy_time(crate::model::Device::Pcie),
        });
        for e in req.activated_refs().filter(|&e| !cache.is_resident(e)) {
            out.push(PrefetchCandidate {
                expert: e,
                predicted_load: req.loads[e.expert as usize],
                gain: gain_against(base.makespan, e, req, cache, cost),
                cost: cost.transfer_time(),
            });
        }
    }
    (out, layers)
}

fn rank(candidates: &[PrefetchCandidate]) -> Vec<&PrefetchCandidate> {
    let mut ranked: Vec<&PrefetchCandidate> = candidates.iter().filter(|c| c.gain > 0.0).collect();
    ranked.sort_by(|a, b| b.gain.total_cmp(&a.gain).then(a.expert.cmp(&b.expert)));
    ranked
}

/// Highest gain first (ties: nearer layer, then expert order). A candidate
/// is admitted when it fits in what is left of the budget; candidates
/// without a positive gain are dropped.
pub fn select_prefetches(candidates: &[PrefetchCandidate], idle_budget: f64) -> Vec<ExpertRef> {
    let mut spent = 0.0;
    let mut out = Vec::new();
    for c in rank(candidates) {
        if spent + c.cost <= idle_budget {
            spent += c.cost;
            out.push(c.expert);
        }
    }
    out
}

/// Like [`select_prefetches`], but every candidate has a deadline: its
/// transfer must end before its own layer starts. `window(layer)` is the
/// idle PCIe time available before `layer` starts. Admitted transfers are
/// returned in the order they must be sent (earliest layer first, then by
/// rank), and a candidate is admitted only if every admitted transfer still
/// meets its deadline in that order.
pub fn select_prefetches_by_deadline(
    candidates: &[PrefetchCandidate],
    window: impl Fn(usize) -> f64,
) -> Vec<ExpertRef> {
    let mut admitted: Vec<&PrefetchCandidate> = Vec::new();
    for c in rank(candidates) {
        let pos = admitted
            .iter()
            .position(|a| a.expert.layer > c.expert.layer)
            .unwrap_or(admitted.len());
        admitted.insert(pos, c);
        let mut sent = 0.0;
        let feasible = admitted.iter().all(|a| {
            sent += a.cost;
            sent <= window(a.expert.layer as usize)
        });
        if !feasible {
            admitted.remove(pos);
        }
    }
    admitted.into_iter().map(|c| c.expert).collect()
}

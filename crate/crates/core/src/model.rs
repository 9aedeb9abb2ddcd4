//! Domain types shared by every simulator module: model shapes, expert
//! identities, per-layer routing requests and whole traces.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Score vectors must sum to one within this tolerance.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown model preset `{0}` (expected mixtral, qwen2 or deepseek)")]
    UnknownPreset(String),
}

/// Shape of an MoE model as far as expert offloading is concerned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: usize,
    /// Routed experts per layer (N).
    pub num_routed: usize,
    pub num_shared: usize,
    /// Experts activated per token (K).
    pub num_activated: usize,
    /// (hidden, intermediate) of one routed expert.
    pub routed_expert_dims: (usize, usize),
    pub shared_expert_dims: Option<(usize, usize)>,
    /// Element size after quantization; 0.5 for 4-bit weights.
    pub bytes_per_weight: f64,
}

impl ModelConfig {
    pub fn mixtral() -> Self {
        Self {
            name: "mixtral".into(),
            num_layers: 32,
            num_routed: 8,
            num_shared: 0,
            num_activated: 2,
            routed_expert_dims: (4096, 14336),
            shared_expert_dims: None,
            bytes_per_weight: 0.5,
        }
    }

    pub fn qwen2() -> Self {
        Self {
            name: "qwen2".into(),
            num_layers: 28,
            num_routed: 64,
            num_shared: 1,
            num_activated: 8,
            routed_expert_dims: (3584, 18944),
            shared_expert_dims: Some((3584, 20480)),
            bytes_per_weight: 0.5,
        }
    }

    pub fn deepseek() -> Self {
        Self {
            name: "deepseek".into(),
            num_layers: 26,
            num_routed: 64,
            num_shared: 2,
            num_activated: 6,
            routed_expert_dims: (2048, 1408),
            shared_expert_dims: Some((2048, 1408)),
            bytes_per_weight: 0.5,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name.to_ascii_lowercase().as_str() {
            "mixtral" => Ok(Self::mixtral()),
            "qwen2" => Ok(Self::qwen2()),
            "deepseek" => Ok(Self::deepseek()),
            other => Err(ModelError::UnknownPreset(other.to_string())),
        }
    }

    pub fn presets() -> [Self; 3] {
        [Self::mixtral(), Self::qwen2(), Self::deepseek()]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if self.num_routed == 0 {
            return bad("num_routed must be at least 1");
        }
        if self.num_activated == 0 || self.num_activated > self.num_routed {
            return bad("num_activated must be in 1..=num_routed");
        }
        let (h, i) = self.routed_expert_dims;
        if h == 0 || i == 0 {
            return bad("routed expert dims must be positive");
        }
        if let Some((h, i)) = self.shared_expert_dims {
            if h == 0 || i == 0 {
                return bad("shared expert dims must be positive");
            }
        }
        if !(self.bytes_per_weight.is_finite() && self.bytes_per_weight > 0.0) {
            return bad("bytes_per_weight must be positive");
        }
        Ok(())
    }

    /// Size of one routed expert (gate, up and down projections), rounded up
    /// to whole bytes.
    pub fn expert_bytes(&self) -> u64 {
        projection_bytes(self.routed_expert_dims, self.bytes_per_weight)
    }

    pub fn shared_expert_bytes(&self) -> Option<u64> {
        self.shared_expert_dims
            .map(|dims| projection_bytes(dims, self.bytes_per_weight))
    }

    pub fn total_routed(&self) -> usize {
        self.num_layers * self.num_routed
    }

    /// Global cache capacity for a given GPU expert cache ratio.
    pub fn cache_capacity(&self, ratio: f64) -> usize {
        (ratio * self.total_routed() as f64).floor() as usize
    }

    /// Dense index of an expert, `layer * N + expert`.
    pub fn flat_index(&self, e: ExpertRef) -> usize {
        e.layer as usize * self.num_routed + e.expert as usize
    }

    pub fn from_flat_index(&self, idx: usize) -> ExpertRef {
        ExpertRef::new(idx / self.num_routed, idx % self.num_routed)
    }
}

fn projection_bytes((hidden, intermediate): (usize, usize), bytes_per_weight: f64) -> u64 {
    (3.0 * hidden as f64 * intermediate as f64 * bytes_per_weight).ceil() as u64
}

/// Identity of one routed expert. Ordered lexicographically by
/// `(layer, expert)`, which is the tie-breaker used throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertRef {
    pub layer: u32,
    pub expert: u32,
}

impl ExpertRef {
    pub fn new(layer: usize, expert: usize) -> Self {
        Self {
            layer: layer as u32,
            expert: expert as u32,
        }
    }
}

impl fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}E{}", self.layer, self.expert)
    }
}

/// Hardware lanes of the simulated machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Gpu,
    Pcie,
}

impl Device {
    pub const ALL: [Device; 3] = [Device::Cpu, Device::Gpu, Device::Pcie];

    pub fn as_str(self) -> &'static str {
        match self {
            Device::Cpu => "cpu",
            Device::Gpu => "gpu",
            Device::Pcie => "pcie",
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Device {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpu" => Ok(Device::Cpu),
            "gpu" => Ok(Device::Gpu),
            "pcie" => Ok(Device::Pcie),
            other => Err(format!("unknown device tag `{other}`")),
        }
    }
}

/// One MoE layer's routing outcome for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRequest {
    pub layer: usize,
    /// Tokens routed to each routed expert.
    pub loads: Vec<u32>,
    /// Post-softmax routing score of every routed expert.
    pub scores: Vec<f64>,
    /// Indices with nonzero load, ascending.
    pub activated: Vec<usize>,
}

impl LayerRequest {
    /// Builds a request whose activated set is derived from `loads`.
    pub fn new(layer: usize, loads: Vec<u32>, scores: Vec<f64>) -> Self {
        let activated = loads
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| i)
            .collect();
        Self {
            layer,
            loads,
            scores,
            activated,
        }
    }

    pub fn expert(&self, index: usize) -> ExpertRef {
        ExpertRef::new(self.layer, index)
    }

    pub fn activated_refs(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        self.activated.iter().map(move |&i| self.expert(i))
    }

    pub fn total_load(&self) -> u64 {
        self.loads.iter().map(|&l| l as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        })
    }
}

/// One auto-regressive step: a request per model layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub stage: Stage,
    pub token_count: u32,
    pub layers: Vec<LayerRequest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub config: ModelConfig,
    pub passes: Vec<ForwardPass>,
    pub metadata: BTreeMap<String, String>,
}

impl Trace {
    pub fn decode_passes(&self) -> impl Iterator<Item = (usize, &ForwardPass)> {
        self.passes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.stage == Stage::Decode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Config,
    LayerOrder,
    LoadsLength,
    ScoresLength,
    ActivatedMismatch,
    DecodeCardinality,
    DecodeUnitLoad,
    LoadSum,
    NegativeScore,
    ScoreNormalization,
    ScoreRanking,
}

/// One failed trace invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub pass: Option<usize>,
    pub layer: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.pass, self.layer) {
            (Some(p), Some(l)) => write!(f, "pass {p} layer {l}: ")?,
            (Some(p), None) => write!(f, "pass {p}: ")?,
            _ => {}
        }
        write!(f, "{:?}: {}", self.rule, self.detail)
    }
}

/// Checks every trace invariant and returns the violations found. An empty
/// report means the trace is well formed.
pub fn validate_trace(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(e) = trace.config.validate() {
        out.push(Violation {
            pass: None,
            layer: None,
            rule: Rule::Config,
            detail: e.to_string(),
        });
        return out;
    }
    let cfg = &trace.config;
    for (p, pass) in trace.passes.iter().enumerate() {
        if pass.layers.len() != cfg.num_layers {
            out.push(Violation {
                pass: Some(p),
                layer: None,
                rule: Rule::LayerOrder,
                detail: format!(
                    "expected {} layers, found {}",
                    cfg.num_layers,
                    pass.layers.len()
                ),
            });
        }
        for (pos, req) in pass.layers.iter().enumerate() {
            let mut push = |rule, detail: String| {
                out.push(Violation {
                    pass: Some(p),
                    layer: Some(req.layer),
                    rule,
                    detail,
                })
            };
            if req.layer != pos {
                push(
                    Rule::LayerOrder,
                    format!("layer index {} at position {pos}", req.layer),
                );
            }
            if req.loads.len() != cfg.num_routed {
                push(
                    Rule::LoadsLength,
                    format!("{} loads for {} experts", req.loads.len(), cfg.num_routed),
                );
                continue;
            }
            if req.scores.len() != cfg.num_routed {
                push(
                    Rule::ScoresLength,
                    format!("{} scores for {} experts", req.scores.len(), cfg.num_routed),
                );
                continue;
            }
            let derived: Vec<usize> = (0..cfg.num_routed).filter(|&i| req.loads[i] > 0).collect();
            if derived != req.activated {
                push(
                    Rule::ActivatedMismatch,
                    format!(
                        "activated {:?} but nonzero loads at {:?}",
                        req.activated, derived
                    ),
                );
            }
            let load_sum = req.total_load();
            let expected = pass.token_count as u64 * cfg.num_activated as u64;
            if load_sum != expected {
                push(
                    Rule::LoadSum,
                    format!("loads sum to {load_sum}, expected {expected}"),
                );
            }
            let single_token = pass.stage == Stage::Decode && pass.token_count == 1;
            if single_token {
                if derived.len() != cfg.num_activated {
                    push(
                        Rule::DecodeCardinality,
                        format!(
                            "{} activated, expected {}",
                            derived.len(),
                            cfg.num_activated
                        ),
                    );
                }
                if derived.iter().any(|&i| req.loads[i] != 1) {
                    push(Rule::DecodeUnitLoad, "decode load other than 1".into());
                }
            }
            if let Some(i) = req.scores.iter().position(|s| !(*s >= 0.0)) {
                push(
                    Rule::NegativeScore,
                    format!("score of expert {i} is {}", req.scores[i]),
                );
                continue;
            }
            let sum: f64 = req.scores.iter().sum();
            if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
                push(Rule::ScoreNormalization, format!("scores sum to {sum}"));
            }
            // Ranking only holds by construction for one-token passes; multi-token
            // passes record token-averaged scores.
            if single_token {
                let top = top_indices(&req.scores, derived.len());
                if top != derived {
                    push(
                        Rule::ScoreRanking,
                        format!("activated {derived:?} are not the top scores {top:?}"),
                    );
                }
            }
        }
    }
    out
}

/// Indices of the `k` largest values, ties broken by lower index, returned in
/// ascending index order.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

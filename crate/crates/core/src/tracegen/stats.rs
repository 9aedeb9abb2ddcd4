//! Routing statistics of a trace: how evenly experts are activated, how
//! likely a high-scoring expert is to be used again in the next pass, and
//! how uneven prefill loads are.

use std::fmt::Write as _;

use serde::Serialize;

use crate::model::{Stage, Trace};

/// Fractions of experts at which the activation CDF is reported.
pub const CDF_POINTS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Neuron-level activation sparsity: 20% of neurons carry 80% of
/// activations, `F(x) = x^(ln 0.8 / ln 0.2)`.
pub fn neuron_reference(x: f64) -> f64 {
    x.powf(0.8f64.ln() / 0.2f64.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStats {
    /// `(fraction of experts, fraction of activations)`, most active experts
    /// first, averaged over layers.
    pub activation_cdf: Vec<(f64, f64)>,
    /// Probability that an expert is activated in the next pass, by decile of
    /// its score in the current pass (lowest decile first). Absent with fewer
    /// than two passes.
    pub reuse_by_decile: Option<Vec<f64>>,
    /// Per layer: max load over mean load across routed experts in prefill.
    pub prefill_imbalance: Vec<f64>,
}

impl TraceStats {
    /// Strictly increasing reuse curve.
    pub fn reuse_increasing(&self) -> bool {
        self.reuse_by_decile
            .as_ref()
            .is_some_and(|c| c.windows(2).all(|w| w[1] > w[0]))
    }

    /// Top-decile reuse over bottom-decile reuse.
    pub fn reuse_ratio(&self) -> Option<f64> {
        let c = self.reuse_by_decile.as_ref()?;
        Some(c[c.len() - 1] / c[0])
    }

    /// Whether activations are spread more evenly than the neuron reference:
    /// a smaller concentration index over the reported points.
    pub fn flatter_than_reference(&self) -> bool {
        let reference: Vec<(f64, f64)> = self
            .activation_cdf
            .iter()
            .map(|&(x, _)| (x, neuron_reference(x)))
            .collect();
        concentration(&self.activation_cdf) < concentration(&reference)
    }

    /// Delimited text: `section,key,value` rows.
    pub fn to_text(&self) -> String {
        let mut out = String::from("section,key,value\n");
        for (x, y) in &self.activation_cdf {
            let _ = writeln!(out, "cdf,{x},{y}");
        }
        for (x, _) in &self.activation_cdf {
            let _ = writeln!(out, "cdf_reference,{x},{}", neuron_reference(*x));
        }
        if let Some(curve) = &self.reuse_by_decile {
            for (d, r) in curve.iter().enumerate() {
                let _ = writeln!(out, "reuse,{},{r}", d + 1);
            }
        }
        for (l, v) in self.prefill_imbalance.iter().enumerate() {
            let _ = writeln!(out, "prefill_imbalance,{l},{v}");
        }
        out
    }
}

/// Twice the area between a CDF (points from the origin, most active first)
/// and the diagonal: 0 for perfectly even activation, approaching 1 when a
/// few experts take everything.
pub fn concentration(cdf: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for &(x, y) in cdf {
        area += (x - px) * (y + py) / 2.0;
        (px, py) = (x, y);
    }
    2.0 * (area - px * px / 2.0)
}

pub fn analyze_trace(trace: &Trace) -> TraceStats {
    TraceStats {
        activation_cdf: activation_cdf(trace),
        reuse_by_decile: reuse_by_decile(trace),
        prefill_imbalance: prefill_imbalance(trace),
    }
}

/// Activation counts per expert over decode passes (all passes if there are
/// none), turned into a CDF per layer and averaged. Points between experts
/// are linearly interpolated.
pub fn activation_cdf(trace: &Trace) -> Vec<(f64, f64)> {
    let n = trace.config.num_routed;
    let layers = trace.config.num_layers;
    let has_decode = trace.passes.iter().any(|p| p.stage == Stage::Decode);
    let mut counts = vec![vec![0u64; n]; layers];
    for pass in trace
        .passes
        .iter()
        .filter(|p| !has_decode || p.stage == Stage::Decode)
    {
        for req in &pass.layers {
            for &i in &req.activated {
                counts[req.layer][i] += 1;
            }
        }
    }
    let mut acc = vec![0.0; CDF_POINTS.len()];
    let mut used = 0usize;
    for mut c in counts {
        let total: u64 = c.iter().sum();
        if total == 0 {
            continue;
        }
        used += 1;
        c.sort_unstable_by(|a, b| b.cmp(a));
        let mut cum = vec![0.0; n + 1];
        for (i, &v) in c.iter().enumerate() {
            cum[i + 1] = cum[i] + v as f64 / total as f64;
        }
        for (slot, &x) in acc.iter_mut().zip(&CDF_POINTS) {
            let pos = x * n as f64;
            let lo = (pos.floor() as usize).min(n);
            let hi = (lo + 1).min(n);
            let frac = pos - lo as f64;
            *slot += cum[lo] + frac * (cum[hi] - cum[lo]);
        }
    }
    CDF_POINTS
        .iter()
        .zip(acc)
        .map(|(&x, y)| (x, if used > 0 { y / used as f64 } else { 0.0 }))
        .collect()
}

/// Pools every `(score in pass t, activated in pass t+1)` pair of the same
/// expert over consecutive passes, sorts by score, splits into ten equal
/// bins and reports the activation frequency of each.
pub fn reuse_by_decile(trace: &Trace) -> Option<Vec<f64>> {
    if trace.passes.len() < 2 {
        return None;
    }
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    for w in trace.passes.windows(2) {
        for (now, next) in w[0].layers.iter().zip(&w[1].layers) {
            for (i, &s) in now.scores.iter().enumerate() {
                pairs.push((s, next.loads[i] > 0));
            }
        }
    }
    if pairs.len() < 10 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let len = pairs.len();
    Some(
        (0..10)
            .map(|d| {
                let bin = &pairs[d * len / 10..(d + 1) * len / 10];
                bin.iter().filter(|p| p.1).count() as f64 / bin.len() as f64
            })
            .collect(),
    )
}

pub fn prefill_imbalance(trace: &Trace) -> Vec<f64> {
    let n = trace.config.num_routed as f64;
    let Some(pass) = trace.passes.iter().find(|p| p.stage == Stage::Prefill) else {
        return Vec::new();
    };
    pass.layers
        .iter()
        .map(|req| {
            let mean = req.total_load() as f64 / n;
            let max = req.loads.iter().copied().max().unwrap_or(0) as f64;
            if mean > 0.0 {
                max / mean
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tracegen::{generate_trace, GenParams};

    fn params(skew: f64, rho: f64, seed: u64) -> GenParams {
        GenParams {
            skew,
            temporal_rho: rho,
            layer_sim: 0.0,
            seed,
        }
    }

    #[test]
    fn reference_curve_passes_eighty_twenty() {
        assert!((neuron_reference(0.2) - 0.8).abs() < 1e-12);
        assert_eq!(neuron_reference(1.0), 1.0);
    }

    #[test]
    fn concentration_bounds() {
        let diagonal: Vec<(f64, f64)> = CDF_POINTS.iter().map(|&x| (x, x)).collect();
        assert!(concentration(&diagonal).abs() < 1e-12);
        let reference: Vec<(f64, f64)> = CDF_POINTS
            .iter()
            .map(|&x| (x, neuron_reference(x)))
            .collect();
        let c = concentration(&reference);
        assert!(c > 0.5 && c < 1.0, "{c}");
    }

    #[test]
    fn independent_passes_give_flat_reuse() {
        let cfg = ModelConfig::mixtral();
        let t = generate_trace(&cfg, &params(0.0, 0.0, 4), 0, 2000).unwrap();
        let curve = reuse_by_decile(&t).unwrap();
        let expected = cfg.num_activated as f64 / cfg.num_routed as f64;
        for r in curve {
            assert!((r - expected).abs() < 0.02, "{r} vs {expected}");
        }
    }

    #[test]
    fn single_pass_has_no_reuse_curve() {
        let cfg = ModelConfig::mixtral();
        let t = generate_trace(&cfg, &params(1.0, 0.5, 1), 0, 1).unwrap();
        assert!(analyze_trace(&t).reuse_by_decile.is_none());
        assert!(!analyze_trace(&t).reuse_increasing());
    }

    #[test]
    fn uniform_activation_gives_diagonal_cdf() {
        let cfg = ModelConfig::qwen2();
        let t = generate_trace(&cfg, &params(0.0, 0.0, 8), 0, 3000).unwrap();
        for (x, y) in activation_cdf(&t) {
            assert!(y >= x - 1e-9 && y <= x + 0.03, "{x}: {y}");
        }
    }

    #[test]
    fn shipped_calibration_matches_targets() {
        for cfg in ModelConfig::presets() {
            for seed in 0..3 {
                let t = generate_trace(&cfg, &GenParams::calibrated(&cfg, seed), 64, 100).unwrap();
                let s = analyze_trace(&t);
                assert!(s.reuse_increasing(), "{} {:?}", cfg.name, s.reuse_by_decile);
                assert!(s.reuse_ratio().unwrap() >= 2.0);
                assert!(
                    s.flatter_than_reference(),
                    "{} {:?}",
                    cfg.name,
                    s.activation_cdf
                );
            }
        }
    }

    #[test]
    fn text_report_has_every_section() {
        let cfg = ModelConfig::mixtral();
        let t = generate_trace(&cfg, &GenParams::calibrated(&cfg, 0), 32, 20).unwrap();
        let text = analyze_trace(&t).to_text();
        for section in ["cdf,", "cdf_reference,", "reuse,", "prefill_imbalance,"] {
            assert!(text.lines().any(|l| l.starts_with(section)), "{section}");
        }
    }
}

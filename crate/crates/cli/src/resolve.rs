//! Turning flag values into simulator inputs: model configs, traces,
//! hardware profiles and policies.

use std::fs;
use std::path::Path;

use moesim::cache::PolicyKind;
use moesim::cost::HardwareProfile;
use moesim::engine::{EnginePolicy, Scheduling};
use moesim::model::{ModelConfig, Trace};
use moesim::prefetch::PredictionModel;
use moesim::tracegen::io::load_trace;
use moesim::tracegen::{generate_trace, GenParams};

use crate::error::CliError;

/// A preset name, or the path of a JSON model config.
pub fn model(spec: &str) -> Result<ModelConfig, CliError> {
    if let Ok(cfg) = ModelConfig::preset(spec) {
        return Ok(cfg);
    }
    if !Path::new(spec).exists() {
        return Err(CliError::Usage(format!(
            "unknown model '{spec}' (expected mixtral, qwen2, deepseek or a config file)"
        )));
    }
    let text = fs::read_to_string(spec).map_err(|e| CliError::io(spec, e))?;
    let cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{spec}: {e}")))?;
    cfg.validate()
        .map_err(|e| CliError::Data(format!("{spec}: {e}")))?;
    Ok(cfg)
}

/// Generator settings: the shipped calibration for the model with any
/// explicit overrides.
pub fn gen_params(
    cfg: &ModelConfig,
    seed: u64,
    skew: Option<f64>,
    rho: Option<f64>,
    layer_sim: Option<f64>,
) -> Result<GenParams, CliError> {
    let mut p = GenParams::calibrated(cfg, seed);
    if let Some(v) = skew {
        p.skew = v;
    }
    if let Some(v) = rho {
        p.temporal_rho = v;
    }
    if let Some(v) = layer_sim {
        p.layer_sim = v;
    }
    p.validate()?;
    Ok(p)
}

pub struct TraceRequest<'a> {
    pub file: Option<&'a Path>,
    pub model: &'a str,
    pub prefill_tokens: u32,
    pub decode_steps: usize,
    pub seed: u64,
    pub skew: Option<f64>,
    pub rho: Option<f64>,
    pub layer_sim: Option<f64>,
}

impl TraceRequest<'_> {
    /// Loads the trace file if one is given, otherwise generates.
    pub fn resolve(&self) -> Result<Trace, CliError> {
        if let Some(path) = self.file {
            return load_trace(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())));
        }
        let cfg = model(self.model)?;
        let params = gen_params(&cfg, self.seed, self.skew, self.rho, self.layer_sim)?;
        Ok(generate_trace(
            &cfg,
            &params,
            self.prefill_tokens,
            self.decode_steps,
        )?)
    }
}

/// A profile file layered over the model's reference profile, or the
/// reference profile itself.
pub fn profile(path: Option<&Path>, cfg: &ModelConfig) -> Result<HardwareProfile, CliError> {
    let base = HardwareProfile::reference_for(cfg);
    match path {
        None => Ok(base),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p.display(), e))?;
            HardwareProfile::from_text(&text, &base)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
    }
}

/// Parses `preset[/key=value[:key=value...]]`, for example
/// `adapmoe/cache=mrs:prefetch=off`. The whole spec becomes the policy name.
pub fn policy(spec: &str) -> Result<EnginePolicy, CliError> {
    let (preset, overrides) = match spec.split_once('/') {
        Some((p, rest)) => (p, Some(rest)),
        None => (spec, None),
    };
    let mut policy = EnginePolicy::preset(preset)?;
    policy.name = spec.to_string();
    for item in overrides.into_iter().flat_map(|r| r.split(':')) {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("policy '{spec}': expected key=value, got '{item}'"))
        })?;
        apply(&mut policy, key, value)
            .map_err(|m| CliError::Usage(format!("policy '{spec}': {m}")))?;
    }
    Ok(policy)
}

/// Sets one policy field by name.
pub fn apply(policy: &mut EnginePolicy, key: &str, value: &str) -> Result<(), String> {
    let num = |v: &str| {
        v.parse::<f64>()
            .map_err(|_| format!("{key}: not a number '{v}'"))
    };
    let count = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| format!("{key}: not a count '{v}'"))
    };
    match key {
        "cache" | "cache-policy" => policy.cache_policy = value.parse::<PolicyKind>()?,
        "scheduling" => policy.scheduling = value.parse::<Scheduling>()?,
        "prefetch" => {
            policy.prefetch = if on_off(value)? {
                Some(policy.prefetch.unwrap_or_default())
            } else {
                None
            }
        }
        "horizon" => prediction(policy).horizon = count(value)?,
        "accuracy" => prediction(policy).accuracy = num(value)?,
        "split" | "split-point" => policy.static_split_point = Some(count(value)?),
        "pin" | "pin-fraction" => policy.pin_top_fraction = Some(num(value)?),
        "calibration" | "calibration-fraction" => policy.calibration_fraction = num(value)?,
        other => return Err(format!("unknown policy key '{other}'")),
    }
    Ok(())
}

fn prediction(policy: &mut EnginePolicy) -> &mut PredictionModel {
    policy.prefetch.get_or_insert_with(PredictionModel::default)
}

pub fn on_off(value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected on or off, got '{other}'")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_by_name() {
        assert_eq!(model("qwen2").unwrap().num_routed, 64);
        assert_eq!(model("nope").unwrap_err().exit_code(), 1);
    }

    #[test]
    fn model_files_are_read_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("m.json");
        let mut cfg = ModelConfig::mixtral();
        cfg.name = "tiny".into();
        cfg.num_layers = 3;
        fs::write(&good, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(model(good.to_str().unwrap()).unwrap(), cfg);
        cfg.num_activated = 99;
        let bad = dir.path().join("bad.json");
        fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(model(bad.to_str().unwrap()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn policy_overrides() {
        let p = policy("adapmoe/cache=mrs:prefetch=off").unwrap();
        assert_eq!(p.name, "adapmoe/cache=mrs:prefetch=off");
        assert_eq!(p.cache_policy, PolicyKind::Mrs);
        assert_eq!(p.scheduling, Scheduling::GpuOndemand);
        assert!(p.prefetch.is_none());
        let p = policy("sched-only/accuracy=1").unwrap();
        assert_eq!(p.prefetch.unwrap().accuracy, 1.0);
        assert_eq!(p.prefetch.unwrap().horizon, 3);
        assert!(policy("full/warp=9").is_err());
        assert!(policy("full/accuracy").is_err());
        assert!(policy("turbo").is_err());
    }

    #[test]
    fn rho_out_of_range_is_a_usage_error() {
        let cfg = ModelConfig::qwen2();
        assert_eq!(
            gen_params(&cfg, 0, None, Some(1.5), None)
                .unwrap_err()
                .exit_code(),
            1
        );
    }

    #[test]
    fn profile_file_overrides_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        fs::write(&path, "non_expert_time=0.5\n").unwrap();
        let cfg = ModelConfig::qwen2();
        let p = profile(Some(&path), &cfg).unwrap();
        assert_eq!(p.non_expert_time, 0.5);
        assert_eq!(p.cpu_slope, HardwareProfile::reference_for(&cfg).cpu_slope);
        fs::write(&path, "cpu_slope=fast\n").unwrap();
        assert_eq!(profile(Some(&path), &cfg).unwrap_err().exit_code(), 2);
    }
}

//! Analytical latency model for expert compute on CPU and GPU and for
//! host-to-device expert transfers, plus the warm-up calibration fit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Device, ModelConfig};

/// Calibrated cost parameters. All durations are dimensionless simulation
/// units (the built-in reference profiles use milliseconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// GPU time for one expert, independent of load up to saturation.
    pub gpu_time_per_expert: f64,
    pub gpu_saturation_load: u32,
    /// Extra GPU time per token beyond saturation.
    pub gpu_slope: f64,
    /// CPU time per routed token.
    pub cpu_slope: f64,
    /// Multiplier applied to the first expert of a CPU burst.
    pub cpu_first_expert_penalty: f64,
    /// Bytes moved per unit of time.
    pub transfer_bandwidth: f64,
    /// Fixed overhead per transfer.
    pub transfer_latency: f64,
    pub shared_expert_time: f64,
    pub non_expert_time: f64,
}

pub const DEFAULT_GPU_SATURATION: u32 = 256;
pub const DEFAULT_CPU_PENALTY: f64 = 1.4;

// Reference desk machine, in bytes per millisecond.
const REF_PCIE_BYTES_PER_MS: f64 = 25.0e6;
const REF_PCIE_LATENCY_MS: f64 = 0.02;
const REF_GPU_BYTES_PER_MS: f64 = 700.0e6;
const REF_GPU_LAUNCH_MS: f64 = 0.05;
const REF_CPU_BYTES_PER_MS: f64 = 50.0e6;

impl HardwareProfile {
    /// Built-in profile for a model on the reference machine: transfer is
    /// PCIe-bandwidth bound, single-token CPU work is memory bound, and GPU
    /// work is a launch overhead plus a weight read.
    pub fn reference_for(config: &ModelConfig) -> Self {
        let bytes = config.expert_bytes() as f64;
        let gpu_time_per_expert = REF_GPU_LAUNCH_MS + bytes / REF_GPU_BYTES_PER_MS;
        let shared_expert_time = config
            .shared_expert_bytes()
            .map(|b| {
                config.num_shared as f64 * (REF_GPU_LAUNCH_MS + b as f64 / REF_GPU_BYTES_PER_MS)
            })
            .unwrap_or(0.0);
        Self {
            gpu_time_per_expert,
            gpu_saturation_load: DEFAULT_GPU_SATURATION,
            gpu_slope: gpu_time_per_expert / DEFAULT_GPU_SATURATION as f64,
            cpu_slope: bytes / REF_CPU_BYTES_PER_MS,
            cpu_first_expert_penalty: DEFAULT_CPU_PENALTY,
            transfer_bandwidth: REF_PCIE_BYTES_PER_MS,
            transfer_latency: REF_PCIE_LATENCY_MS,
            shared_expert_time,
            non_expert_time: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let nonneg = [
            ("gpu_time_per_expert", self.gpu_time_per_expert),
            ("gpu_slope", self.gpu_slope),
            ("cpu_slope", self.cpu_slope),
            ("transfer_latency", self.transfer_latency),
            ("shared_expert_time", self.shared_expert_time),
            ("non_expert_time", self.non_expert_time),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ProfileError::Invalid(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(self.cpu_first_expert_penalty.is_finite() && self.cpu_first_expert_penalty >= 1.0) {
            return Err(ProfileError::Invalid(format!(
                "cpu_first_expert_penalty must be >= 1, got {}",
                self.cpu_first_expert_penalty
            )));
        }
        if !(self.transfer_bandwidth.is_finite() && self.transfer_bandwidth > 0.0) {
            return Err(ProfileError::Invalid(format!(
                "transfer_bandwidth must be > 0, got {}",
                self.transfer_bandwidth
            )));
        }
        Ok(())
    }

    pub fn gpu_time(&self, load: u32) -> f64 {
        assert!(load > 0, "zero-load experts are never scheduled");
        if load <= self.gpu_saturation_load {
            self.gpu_time_per_expert
        } else {
            self.gpu_time_per_expert + self.gpu_slope * (load - self.gpu_saturation_load) as f64
        }
    }

    pub fn cpu_time(&self, load: u32, position_in_burst: usize) -> f64 {
        assert!(load > 0, "zero-load experts are never scheduled");
        let base = self.cpu_slope * load as f64;
        if position_in_burst == 0 {
            base * self.cpu_first_expert_penalty
        } else {
            base
        }
    }

    pub fn transfer_time(&self, expert_size_bytes: u64) -> f64 {
        self.transfer_latency + expert_size_bytes as f64 / self.transfer_bandwidth
    }

    /// Flat `key=value` text, one parameter per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Parses the `to_text` format. Missing keys keep the values of `base`;
    /// blank lines and `#` comments are ignored.
    pub fn from_text(text: &str, base: &HardwareProfile) -> Result<Self, ProfileError> {
        let mut p = base.clone();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ProfileError::Parse(n + 1, format!("expected key=value, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let num = |v: &str| -> Result<f64, ProfileError> {
                v.parse::<f64>().map_err(|_| {
                    ProfileError::Parse(n + 1, format!("`{key}` is not a number: `{v}`"))
                })
            };
            match key {
                "gpu_time_per_expert" => p.gpu_time_per_expert = num(value)?,
                "gpu_saturation_load" => {
                    p.gpu_saturation_load = value.parse().map_err(|_| {
                        ProfileError::Parse(n + 1, format!("`{key}` is not a count: `{value}`"))
                    })?
                }
                "gpu_slope" => p.gpu_slope = num(value)?,
                "cpu_slope" => p.cpu_slope = num(value)?,
                "cpu_first_expert_penalty" => p.cpu_first_expert_penalty = num(value)?,
                "transfer_bandwidth" => p.transfer_bandwidth = num(value)?,
                "transfer_latency" => p.transfer_latency = num(value)?,
                "shared_expert_time" => p.shared_expert_time = num(value)?,
                "non_expert_time" => p.non_expert_time = num(value)?,
                other => return Err(ProfileError::Parse(n + 1, format!("unknown key `{other}`"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    fn fields(&self) -> [(&'static str, String); 9] {
        [
            ("gpu_time_per_expert", self.gpu_time_per_expert.to_string()),
            ("gpu_saturation_load", self.gpu_saturation_load.to_string()),
            ("gpu_slope", self.gpu_slope.to_string()),
            ("cpu_slope", self.cpu_slope.to_string()),
            (
                "cpu_first_expert_penalty",
                self.cpu_first_expert_penalty.to_string(),
            ),
            ("transfer_bandwidth", self.transfer_bandwidth.to_string()),
            ("transfer_latency", self.transfer_latency.to_string()),
            ("shared_expert_time", self.shared_expert_time.to_string()),
            ("non_expert_time", self.non_expert_time.to_string()),
        ]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("invalid hardware profile: {0}")]
    Invalid(String),
    #[error("profile line {0}: {1}")]
    Parse(usize, String),
}

/// A profile bound to one model's expert size; this is what the scheduler
/// consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub profile: HardwareProfile,
    pub expert_bytes: u64,
}

impl CostModel {
    pub fn new(profile: HardwareProfile, expert_bytes: u64) -> Self {
        Self {
            profile,
            expert_bytes,
        }
    }

    pub fn for_model(profile: HardwareProfile, config: &ModelConfig) -> Self {
        Self::new(profile, config.expert_bytes())
    }

    pub fn gpu_time(&self, load: u32) -> f64 {
        self.profile.gpu_time(load)
    }

    pub fn cpu_time(&self, load: u32, position_in_burst: usize) -> f64 {
        self.profile.cpu_time(load, position_in_burst)
    }

    /// Identical for every routed expert of the model.
    pub fn transfer_time(&self) -> f64 {
        self.profile.transfer_time(self.expert_bytes)
    }
}

/// One warm-up measurement. `amount` is a token load for cpu/gpu samples and
/// a byte count for pcie samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub device: Device,
    pub amount: u64,
    pub position_in_burst: usize,
    pub duration: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("sample line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("need at least {needed} {device} samples, found {found}")]
    TooFewSamples {
        device: Device,
        needed: usize,
        found: usize,
    },
    #[error("cannot determine {parameter}: {reason}")]
    Underdetermined {
        parameter: &'static str,
        reason: String,
    },
    #[error("sample {index} has non-positive duration or amount")]
    NonPositive { index: usize },
}

/// Root-mean-square fit residual per device.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    pub cpu: f64,
    pub gpu: f64,
    pub pcie: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub profile: HardwareProfile,
    pub residuals: Residuals,
}

impl Calibration {
    pub fn report(&self) -> String {
        let p = &self.profile;
        format!(
            "cpu_slope={} cpu_first_expert_penalty={} rms_cpu={}\n\
             gpu_time_per_expert={} gpu_slope={} rms_gpu={}\n\
             transfer_latency={} transfer_bandwidth={} rms_pcie={}\n",
            p.cpu_slope,
            p.cpu_first_expert_penalty,
            self.residuals.cpu,
            p.gpu_time_per_expert,
            p.gpu_slope,
            self.residuals.gpu,
            p.transfer_latency,
            p.transfer_bandwidth,
            self.residuals.pcie,
        )
    }
}

/// Parses `device,amount,position,duration` lines; `#` starts a comment.
pub fn parse_samples(text: &str) -> Result<Vec<Sample>, CalibrationError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CalibrationError::Parse {
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let device = fields[0].parse::<Device>().map_err(err)?;
        let amount = fields[1]
            .parse::<u64>()
            .map_err(|_| err(format!("bad amount `{}`", fields[1])))?;
        let position_in_burst = fields[2]
            .parse::<usize>()
            .map_err(|_| err(format!("bad position `{}`", fields[2])))?;
        let duration = fields[3]
            .parse::<f64>()
            .map_err(|_| err(format!("bad duration `{}`", fields[3])))?;
        out.push(Sample {
            device,
            amount,
            position_in_burst,
            duration,
        });
    }
    Ok(out)
}

pub fn samples_to_text(samples: &[Sample]) -> String {
    let mut out = String::from("# device,amount,position_in_burst,duration\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.device, s.amount, s.position_in_burst, s.duration
        );
    }
    out
}

/// Fits a profile to warm-up samples.
///
/// Timing noise is assumed relative, so every fit minimises squared relative
/// residuals. CPU samples at burst position 0 and later positions give two
/// through-origin slopes whose ratio is the first-expert penalty. GPU time is
/// the mean of samples at or below `base.gpu_saturation_load`; samples above
/// it fit the post-saturation slope. PCIe samples fit latency and bandwidth
/// by weighted linear regression on byte count. Parameters without samples
/// (saturation, shared and non-expert time, and the GPU slope when nothing
/// exceeds saturation) are copied from `base`.
pub fn calibrate(
    samples: &[Sample],
    base: &HardwareProfile,
) -> Result<Calibration, CalibrationError> {
    for (index, s) in samples.iter().enumerate() {
        if !(s.duration > 0.0) || s.amount == 0 {
            return Err(CalibrationError::NonPositive { index });
        }
    }
    let of = |d: Device| samples.iter().filter(move |s| s.device == d);
    for d in Device::ALL {
        let found = of(d).count();
        if found < 2 {
            return Err(CalibrationError::TooFewSamples {
                device: d,
                needed: 2,
                found,
            });
        }
    }

    let first: Vec<(f64, f64)> = of(Device::Cpu)
        .filter(|s| s.position_in_burst == 0)
        .map(|s| (s.amount as f64, s.duration))
        .collect();
    let later: Vec<(f64, f64)> = of(Device::Cpu)
        .filter(|s| s.position_in_burst > 0)
        .map(|s| (s.amount as f64, s.duration))
        .collect();
    if first.is_empty() {
        return Err(CalibrationError::Underdetermined {
            parameter: "cpu_first_expert_penalty",
            reason: "no cpu samples at burst position 0".into(),
        });
    }
    if later.is_empty() {
        return Err(CalibrationError::Underdetermined {
            parameter: "cpu_slope",
            reason: "no cpu samples after burst position 0".into(),
        });
    }
    let first_slope = relative_slope(&first);
    let cpu_slope = relative_slope(&later);
    let cpu_first_expert_penalty = (first_slope / cpu_slope).max(1.0);

    let saturation = base.gpu_saturation_load as u64;
    let flat: Vec<f64> = of(Device::Gpu)
        .filter(|s| s.amount <= saturation)
        .map(|s| s.duration)
        .collect();
    if flat.is_empty() {
        return Err(CalibrationError::Underdetermined {
            parameter: "gpu_time_per_expert",
            reason: format!("no gpu samples at or below saturation load {saturation}"),
        });
    }
    let gpu_time_per_expert = flat.iter().sum::<f64>() / flat.len() as f64;
    let beyond: Vec<(f64, f64)> = of(Device::Gpu)
        .filter(|s| s.amount > saturation)
        .map(|s| {
            (
                (s.amount - saturation) as f64,
                s.duration - gpu_time_per_expert,
            )
        })
        .collect();
    let gpu_slope = if beyond.is_empty() {
        base.gpu_slope
    } else {
        let sxy: f64 = beyond.iter().map(|(x, y)| x * y).sum();
        let sxx: f64 = beyond.iter().map(|(x, _)| x * x).sum();
        (sxy / sxx).max(0.0)
    };

    let pcie: Vec<(f64, f64)> = of(Device::Pcie)
        .map(|s| (s.amount as f64, s.duration))
        .collect();
    let (transfer_latency, per_byte) = relative_line_fit(&pcie)?;
    if !(per_byte > 0.0) {
        return Err(CalibrationError::Underdetermined {
            parameter: "transfer_bandwidth",
            reason: "transfer time does not grow with size".into(),
        });
    }

    let profile = HardwareProfile {
        gpu_time_per_expert,
        gpu_saturation_load: base.gpu_saturation_load,
        gpu_slope,
        cpu_slope,
        cpu_first_expert_penalty,
        transfer_bandwidth: 1.0 / per_byte,
        transfer_latency: transfer_latency.max(0.0),
        shared_expert_time: base.shared_expert_time,
        non_expert_time: base.non_expert_time,
    };

    let rms = |d: Device, model: &dyn Fn(&Sample) -> f64| {
        let (sum, n) = of(d).fold((0.0, 0usize), |(acc, n), s| {
            let r = s.duration - model(s);
            (acc + r * r, n + 1)
        });
        (sum / n as f64).sqrt()
    };
    let residuals = Residuals {
        cpu: rms(Device::Cpu, &|s| {
            profile.cpu_time(s.amount as u32, s.position_in_burst)
        }),
        gpu: rms(Device::Gpu, &|s| profile.gpu_time(s.amount as u32)),
        pcie: rms(Device::Pcie, &|s| profile.transfer_time(s.amount)),
    };
    Ok(Calibration { profile, residuals })
}

/// Slope `a` minimising `sum(((y - a x) / y)^2)`.
fn relative_slope(points: &[(f64, f64)]) -> f64 {
    let num: f64 = points.iter().map(|(x, y)| x / y).sum();
    let den: f64 = points.iter().map(|(x, y)| (x / y) * (x / y)).sum();
    num / den
}

/// Intercept and slope minimising squared relative residuals.
fn relative_line_fit(points: &[(f64, f64)]) -> Result<(f64, f64), CalibrationError> {
    let first_x = points[0].0;
    if points.iter().all(|(x, _)| *x == first_x) {
        return Err(CalibrationError::Underdetermined {
            parameter: "transfer_bandwidth",
            reason: "all pcie samples have the same byte count".into(),
        });
    }
    let (mut sw, mut swx, mut swxx, mut swy, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let w = 1.0 / (y * y);
        sw += w;
        swx += w * x;
        swxx += w * x * x;
        swy += w * y;
        swxy += w * x * y;
    }
    let det = sw * swxx - swx * swx;
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swy - slope * swx) / sw;
    Ok((intercept, slope))
}

/// Noiseless warm-up samples for `profile`, covering every fitted parameter.
pub fn synthesize_samples(profile: &HardwareProfile, expert_bytes: u64) -> Vec<Sample> {
    let mut out = Vec::new();
    for load in [1u32, 2, 4, 8, 16, 32] {
        for position in [0usize, 1, 3] {
            out.push(Sample {
                device: Device::Cpu,
                amount: load as u64,
                position_in_burst: position,
                duration: profile.cpu_time(load, position),
            });
        }
    }
    let sat = profile.gpu_saturation_load;
    for load in [1, 8, 64, sat, sat + sat / 2 + 1, sat * 2] {
        out.push(Sample {
            device: Device::Gpu,
            amount: load as u64,
            position_in_burst: 0,
            duration: profile.gpu_time(load),
        });
    }
    for frac in [0.001, 0.25, 0.5, 1.0, 2.0] {
        let bytes = ((expert_bytes as f64 * frac).ceil() as u64).max(1);
        out.push(Sample {
            device: Device::Pcie,
            amount: bytes,
            position_in_burst: 0,
            duration: profile.transfer_time(bytes),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_profile() -> HardwareProfile {
        HardwareProfile {
            gpu_time_per_expert: 1.0,
            gpu_saturation_load: 128,
            gpu_slope: 0.01,
            cpu_slope: 0.5,
            cpu_first_expert_penalty: 1.4,
            transfer_bandwidth: 1e9,
            transfer_latency: 0.0,
            shared_expert_time: 0.0,
            non_expert_time: 0.0,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn gpu_time_is_flat_then_linear() {
        let p = unit_profile();
        assert_eq!(p.gpu_time(1), 1.0);
        assert_eq!(p.gpu_time(64), 1.0);
        assert_eq!(p.gpu_time(128), 1.0);
        assert!((p.gpu_time(228) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cpu_time_applies_first_expert_penalty() {
        let p = unit_profile();
        assert!((p.cpu_time(2, 0) - 1.4).abs() < 1e-12);
        assert_eq!(p.cpu_time(2, 3), 1.0);
        let flat = HardwareProfile {
            cpu_first_expert_penalty: 1.0,
            ..unit_profile()
        };
        assert_eq!(flat.cpu_time(1, 0), 0.5);
        assert_eq!(flat.cpu_time(1, 7), 0.5);
    }

    #[test]
    fn cpu_linear_and_penalty_dominates() {
        let p = unit_profile();
        for load in 1..50u32 {
            assert_eq!(p.cpu_time(load, 2), p.cpu_slope * load as f64);
            for k in 1..5 {
                assert!(p.cpu_time(load, 0) >= p.cpu_time(load, k));
            }
            if load <= p.gpu_saturation_load {
                assert_eq!(p.gpu_time(load), p.gpu_time_per_expert);
            }
        }
    }

    #[test]
    #[should_panic]
    fn zero_load_is_a_contract_violation() {
        unit_profile().cpu_time(0, 0);
    }

    #[test]
    fn transfer_time_examples() {
        let p = unit_profile();
        assert_eq!(p.transfer_time(3_000_000_000), 3.0);
        let q = HardwareProfile {
            transfer_latency: 0.5,
            ..unit_profile()
        };
        assert_eq!(q.transfer_time(1_000_000_000), 1.5);
        let cm = CostModel::for_model(p, &ModelConfig::qwen2());
        assert_eq!(cm.transfer_time(), cm.transfer_time());
    }

    #[test]
    fn noiseless_calibration_recovers_profile() {
        let truth = HardwareProfile {
            transfer_latency: 0.3,
            ..unit_profile()
        };
        let samples = synthesize_samples(&truth, 2_000_000_000);
        let cal = calibrate(&samples, &truth).unwrap();
        let p = &cal.profile;
        assert!(rel(p.cpu_slope, truth.cpu_slope) < 1e-9);
        assert!(rel(p.cpu_first_expert_penalty, truth.cpu_first_expert_penalty) < 1e-9);
        assert!(rel(p.gpu_time_per_expert, truth.gpu_time_per_expert) < 1e-9);
        assert!(rel(p.gpu_slope, truth.gpu_slope) < 1e-9);
        assert!(rel(p.transfer_bandwidth, truth.transfer_bandwidth) < 1e-9);
        assert!(rel(p.transfer_latency, truth.transfer_latency) < 1e-9);
        assert!(cal.residuals.cpu < 1e-9 && cal.residuals.gpu < 1e-9 && cal.residuals.pcie < 1e-9);
    }

    #[test]
    fn reference_profiles_round_trip_through_calibration() {
        for cfg in ModelConfig::presets() {
            let truth = HardwareProfile::reference_for(&cfg);
            let cal = calibrate(&synthesize_samples(&truth, cfg.expert_bytes()), &truth).unwrap();
            assert!(rel(cal.profile.cpu_slope, truth.cpu_slope) < 1e-9);
            assert!(rel(cal.profile.transfer_bandwidth, truth.transfer_bandwidth) < 1e-9);
            assert!(rel(cal.profile.transfer_latency, truth.transfer_latency) < 1e-9);
        }
    }

    #[test]
    fn one_percent_noise_stays_within_five_percent() {
        let truth = HardwareProfile {
            transfer_latency: 0.3,
            ..unit_profile()
        };
        let clean = synthesize_samples(&truth, 2_000_000_000);
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<Sample> = clean
                .iter()
                .map(|s| {
                    let eps: f64 = rng.sample(StandardNormal);
                    Sample {
                        duration: s.duration * (1.0 + 0.01 * eps),
                        ..*s
                    }
                })
                .collect();
            let p = calibrate(&noisy, &truth).unwrap().profile;
            for (got, want) in [
                (p.cpu_slope, truth.cpu_slope),
                (p.cpu_first_expert_penalty, truth.cpu_first_expert_penalty),
                (p.gpu_time_per_expert, truth.gpu_time_per_expert),
                (p.transfer_bandwidth, truth.transfer_bandwidth),
                (p.transfer_latency, truth.transfer_latency),
            ] {
                assert!(rel(got, want) < 0.05, "seed {seed}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn missing_position_zero_fails() {
        let truth = unit_profile();
        let samples: Vec<Sample> = synthesize_samples(&truth, 1_000_000_000)
            .into_iter()
            .filter(|s| !(s.device == Device::Cpu && s.position_in_burst == 0))
            .collect();
        let err = calibrate(&samples, &truth).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::Underdetermined {
                parameter: "cpu_first_expert_penalty",
                ..
            }
        ));
    }

    #[test]
    fn identical_transfer_sizes_are_underdetermined() {
        let truth = unit_profile();
        let mut samples: Vec<Sample> = synthesize_samples(&truth, 1_000_000_000)
            .into_iter()
            .filter(|s| s.device != Device::Pcie)
            .collect();
        for _ in 0..3 {
            samples.push(Sample {
                device: Device::Pcie,
                amount: 1000,
                position_in_burst: 0,
                duration: 1.0,
            });
        }
        let err = calibrate(&samples, &truth).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::Underdetermined {
                parameter: "transfer_bandwidth",
                ..
            }
        ));
    }

    #[test]
    fn missing_pcie_samples_fail() {
        let truth = unit_profile();
        let samples: Vec<Sample> = synthesize_samples(&truth, 1_000_000_000)
            .into_iter()
            .filter(|s| s.device != Device::Pcie)
            .collect();
        assert_eq!(
            calibrate(&samples, &truth).unwrap_err(),
            CalibrationError::TooFewSamples {
                device: Device::Pcie,
                needed: 2,
                found: 0
            }
        );
    }

    #[test]
    fn sample_text_round_trips_and_reports_bad_lines() {
        let samples = synthesize_samples(&unit_profile(), 1_000_000);
        assert_eq!(parse_samples(&samples_to_text(&samples)).unwrap(), samples);
        let err = parse_samples("cpu,1,0,1.0\nfpga,1,0,2.0\n").unwrap_err();
        assert!(matches!(err, CalibrationError::Parse { line: 2, .. }));
    }

    #[test]
    fn profile_text_round_trips() {
        let p = HardwareProfile::reference_for(&ModelConfig::qwen2());
        let back = HardwareProfile::from_text(&p.to_text(), &unit_profile()).unwrap();
        assert_eq!(back, p);
        assert!(HardwareProfile::from_text("cpu_slope=abc", &p).is_err());
        assert!(HardwareProfile::from_text("transfer_bandwidth=0", &p).is_err());
    }
}

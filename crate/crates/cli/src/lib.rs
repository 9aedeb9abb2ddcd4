//! The `moesim` command line: trace generation, single runs, sweeps,
//! profile calibration and trace analysis.

pub mod config;
pub mod error;
pub mod resolve;
pub mod sweep;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use moesim::cache::PolicyKind;
use moesim::cost::{calibrate, parse_samples};
use moesim::engine::{Engine, PassReport, RunMetrics, Scheduling};
use moesim::model::{Device, Trace};
use moesim::tracegen::io::save_trace;
use moesim::tracegen::stats::{analyze_trace, concentration, neuron_reference, TraceStats};
use serde_json::json;

pub use error::CliError;
use resolve::TraceRequest;

#[derive(Debug, Parser)]
#[command(
    name = "moesim",
    version,
    about = "Trace-driven simulator for hybrid CPU-GPU MoE inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic routing trace.
    Generate(GenerateArgs),
    /// Replay one trace under one policy and print its metrics record.
    Run(RunArgs),
    /// Run every (model, policy, ratio, seed) combination.
    Sweep(sweep::SweepArgs),
    /// Fit a hardware profile to warm-up timing samples.
    Calibrate(CalibrateArgs),
    /// Routing statistics of a trace as delimited text.
    Analyze(AnalyzeArgs),
}

/// Comma-separated values of one type.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| v.parse::<T>().map_err(|e| format!("'{v}': {e}")))
            .collect::<Result<Vec<T>, _>>()
            .and_then(|v| {
                if v.is_empty() {
                    Err("empty list".to_string())
                } else {
                    Ok(List(v))
                }
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnOff(pub bool);

impl FromStr for OnOff {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        resolve::on_off(s).map(OnOff)
    }
}

/// Where a synthetic trace comes from.
#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// mixtral, qwen2, deepseek, or a JSON model config file.
    #[arg(long, default_value = "qwen2")]
    pub model: String,
    /// Tokens in the prefill pass; 0 skips it.
    #[arg(long, default_value_t = 64)]
    pub prefill_tokens: u32,
    #[arg(long, default_value_t = 100)]
    pub decode_steps: usize,
    /// Overrides the model's calibrated skew.
    #[arg(long)]
    pub skew: Option<f64>,
    /// Overrides the calibrated pass-to-pass correlation, in [0, 1).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Overrides the calibrated adjacent-layer correlation, in [0, 1).
    #[arg(long)]
    pub layer_sim: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    /// Trace file to replay; generated from the flags below when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenArgs,
}

impl TraceArgs {
    fn request(&self, seed: u64) -> TraceRequest<'_> {
        TraceRequest {
            file: self.trace.as_deref(),
            model: &self.gen.model,
            prefill_tokens: self.gen.prefill_tokens,
            decode_steps: self.gen.decode_steps,
            seed,
            skew: self.gen.skew,
            rho: self.gen.rho,
            layer_sim: self.gen.layer_sim,
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    /// Flat key=value settings; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; defaults to MODEL-seedSEED.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct RunArgs {
    /// Flat key=value settings; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub trace: TraceArgs,
    /// Seeds trace generation and prefetch prediction.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Preset (full, sched-only, ktrans, llamacpp, adapmoe), optionally with
    /// overrides: `preset/key=value:key=value`.
    #[arg(long, default_value = "full")]
    pub policy: String,
    /// Cache capacity as a share of all routed experts, in (0, 1].
    #[arg(long, default_value_t = 0.25)]
    pub ratio: f64,
    /// Profile file (key=value) over the model's reference profile.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Policy to compare against; adds a `speedup` field (baseline mean TBT
    /// over this run's mean TBT).
    #[arg(long)]
    pub baseline: Option<String>,
    /// Also write the metrics record here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write every event of every plan here.
    #[arg(long)]
    pub plan_dump: Option<PathBuf>,
    #[arg(long)]
    pub scheduling: Option<Scheduling>,
    #[arg(long)]
    pub cache_policy: Option<PolicyKind>,
    /// on or off.
    #[arg(long)]
    pub prefetch: Option<OnOff>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub accuracy: Option<f64>,
    #[arg(long)]
    pub split_point: Option<usize>,
    #[arg(long)]
    pub pin_fraction: Option<f64>,
    #[arg(long)]
    pub calibration_fraction: Option<f64>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CalibrateArgs {
    /// Flat key=value settings; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Timing samples: `device,amount,position_in_burst,duration` lines.
    #[arg(long)]
    pub samples: PathBuf,
    /// Model whose reference profile supplies parameters the samples do not
    /// determine.
    #[arg(long, default_value = "qwen2")]
    pub model: String,
    /// Profile file to use as that base instead.
    #[arg(long)]
    pub base_profile: Option<PathBuf>,
    /// Write the fitted profile here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct AnalyzeArgs {
    /// Flat key=value settings; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub trace: TraceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the statistics here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are reported on `err`.
pub fn main_with(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = config::expand_config(args).and_then(|args| match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli, out),
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return Ok(());
            }
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text).trim_end();
            Err(CliError::Usage(text.to_string()))
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Run(a) => cmd_run(&a, out),
        Command::Sweep(a) => sweep::cmd_sweep(&a, out),
        Command::Calibrate(a) => cmd_calibrate(&a, out),
        Command::Analyze(a) => cmd_analyze(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("standard output", e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let trace = TraceRequest {
        file: None,
        model: &a.gen.model,
        prefill_tokens: a.gen.prefill_tokens,
        decode_steps: a.gen.decode_steps,
        seed: a.seed,
        skew: a.gen.skew,
        rho: a.gen.rho,
        layer_sim: a.gen.layer_sim,
    }
    .resolve()?;
    let path = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}-seed{}.jsonl", trace.config.name, a.seed)));
    save_trace(&trace, &path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let c = &trace.config;
    let mut text = format!(
        "wrote {}: {} layers, {} routed experts, {} activated, {} passes\n",
        path.display(),
        c.num_layers,
        c.num_routed,
        c.num_activated,
        trace.passes.len()
    );
    text += &stats_summary(&analyze_trace(&trace));
    emit(out, &text)
}

/// Human-readable digest of trace statistics.
pub fn stats_summary(s: &TraceStats) -> String {
    let mut text = String::new();
    if let Some(curve) = &s.reuse_by_decile {
        let values: Vec<String> = curve.iter().map(|r| format!("{r:.3}")).collect();
        let _ = writeln!(text, "reuse by score decile: {}", values.join(" "));
        let _ = writeln!(
            text,
            "top/bottom reuse ratio: {:.2}",
            s.reuse_ratio().unwrap_or(f64::NAN)
        );
    }
    let reference: Vec<(f64, f64)> = s
        .activation_cdf
        .iter()
        .map(|&(x, _)| (x, neuron_reference(x)))
        .collect();
    let _ = writeln!(
        text,
        "activation concentration: {:.3} (neuron reference {:.3})",
        concentration(&s.activation_cdf),
        concentration(&reference)
    );
    text
}

/// Replays the whole trace, keeping per-pass reports only when asked to.
pub fn replay(
    trace: &Trace,
    policy: &moesim::engine::EnginePolicy,
    ratio: f64,
    profile: &moesim::cost::HardwareProfile,
    seed: u64,
    keep_reports: bool,
) -> Result<(RunMetrics, Vec<PassReport>), CliError> {
    let mut engine = Engine::new(trace, policy, ratio, profile, seed)?;
    let mut reports = Vec::new();
    for p in 0..trace.passes.len() {
        let r = engine.run_pass(p)?;
        if keep_reports {
            reports.push(r);
        }
    }
    Ok((engine.finish(), reports))
}

/// `pass,at_layer,device,layer,expert,kind,start,end` per event; prefetch
/// and background-fill segments appear with kind `prefetch`.
pub fn plan_dump(reports: &[PassReport]) -> String {
    let mut text = String::from("pass,at_layer,device,layer,expert,kind,start,end\n");
    for r in reports {
        for l in &r.layers {
            for line in l.plan.dump().lines() {
                let _ = writeln!(text, "{},{},{line}", r.pass, l.layer);
            }
            for s in &l.prefetch_segments {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},prefetch,{},{}",
                    r.pass,
                    l.layer,
                    Device::Pcie,
                    s.expert.layer,
                    s.expert.expert,
                    s.start,
                    s.end
                );
            }
        }
    }
    text
}

pub fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let trace = a.trace.request(a.seed).resolve()?;
    let profile = resolve::profile(a.profile.as_deref(), &trace.config)?;
    let mut policy = resolve::policy(&a.policy)?;
    let overrides: [(&str, Option<String>); 8] = [
        ("scheduling", a.scheduling.map(|v| v.to_string())),
        ("cache", a.cache_policy.map(|v| v.to_string())),
        (
            "prefetch",
            a.prefetch
                .map(|v| if v.0 { "on" } else { "off" }.to_string()),
        ),
        ("horizon", a.horizon.map(|v| v.to_string())),
        ("accuracy", a.accuracy.map(|v| v.to_string())),
        ("split", a.split_point.map(|v| v.to_string())),
        ("pin", a.pin_fraction.map(|v| v.to_string())),
        ("calibration", a.calibration_fraction.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            resolve::apply(&mut policy, key, &v).map_err(CliError::Usage)?;
        }
    }

    let (metrics, reports) = replay(
        &trace,
        &policy,
        a.ratio,
        &profile,
        a.seed,
        a.plan_dump.is_some(),
    )?;
    let source = a
        .trace
        .trace
        .as_ref()
        .map_or_else(|| "generated".to_string(), |p| p.display().to_string());
    let mut extra = vec![
        ("model", json!(trace.config.name)),
        ("trace", json!(source)),
        ("scheduling", json!(policy.scheduling)),
        ("cache_policy", json!(policy.cache_policy)),
        ("prefetch", json!(policy.prefetch.is_some())),
    ];
    if let Some(spec) = &a.baseline {
        let base = resolve::policy(spec)?;
        let (bm, _) = replay(&trace, &base, a.ratio, &profile, a.seed, false)?;
        let speedup = match (bm.mean_tbt(), metrics.mean_tbt()) {
            (Some(b), Some(m)) if m > 0.0 => Some(b / m),
            _ => None,
        };
        extra.push(("baseline", json!(spec)));
        extra.push(("baseline_mean_tbt", json!(bm.mean_tbt())));
        extra.push(("speedup", json!(speedup)));
    }
    let line = format!("{}\n", metrics.record(&extra));
    if let Some(path) = &a.out {
        write_file(path, &line)?;
    }
    if let Some(path) = &a.plan_dump {
        write_file(path, &plan_dump(&reports))?;
    }
    emit(out, &line)
}

pub fn cmd_calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.samples).map_err(|e| CliError::io(a.samples.display(), e))?;
    let samples = parse_samples(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.samples.display())))?;
    let cfg = resolve::model(&a.model)?;
    let base = resolve::profile(a.base_profile.as_deref(), &cfg)?;
    let fit = calibrate(&samples, &base)?;
    if let Some(path) = &a.out {
        write_file(path, &fit.profile.to_text())?;
    }
    emit(out, &fit.report())
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let trace = a.trace.request(a.seed).resolve()?;
    let text = analyze_trace(&trace).to_text();
    match &a.out {
        Some(path) => write_file(path, &text),
        None => emit(out, &text),
    }
}

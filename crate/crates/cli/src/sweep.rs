//! Cross-product experiments. Each row is an isolated run; rows execute in
//! parallel up to `--jobs`, are collected as they finish and are sorted
//! back into matrix order before anything is written.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use clap::Args;
use moesim::engine::{run_trace, EnginePolicy};
use moesim::model::{Device, ModelConfig, Trace};
use moesim::tracegen::generate_trace;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;
use crate::{resolve, List};

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    /// Flat key=value settings; flags given on the command line win.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Comma-separated presets or model config files.
    #[arg(long, default_value = "mixtral,qwen2,deepseek")]
    pub models: List<String>,
    /// Comma-separated policy specs (see `run --policy`).
    #[arg(long, default_value = "full,sched-only,ktrans,llamacpp")]
    pub policies: List<String>,
    #[arg(long, default_value = "0.25,0.5,0.75")]
    pub ratios: List<f64>,
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: List<u64>,
    #[arg(long, default_value_t = 64)]
    pub prefill_tokens: u32,
    #[arg(long, default_value_t = 100)]
    pub decode_steps: usize,
    /// Profile file applied to every model; reference profiles otherwise.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Policy whose mean TBT is the numerator of the `speedup` column; it
    /// must be one of `--policies`.
    #[arg(long, default_value = "ktrans")]
    pub baseline: String,
    /// Parallel runs; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Receives results.csv and summary.md.
    #[arg(long, default_value = "sweep-out")]
    pub out_dir: PathBuf,
}

/// One run of the matrix. Failed runs keep their coordinates and carry the
/// error message instead of metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub model: String,
    pub policy: String,
    pub ratio: f64,
    pub seed: u64,
    pub status: &'static str,
    pub ttft: Option<f64>,
    pub mean_tbt: Option<f64>,
    pub median_tbt: Option<f64>,
    pub hit_rate: Option<f64>,
    pub decode_hit_rate: Option<f64>,
    pub util_cpu: Option<f64>,
    pub util_gpu: Option<f64>,
    pub util_pcie: Option<f64>,
    pub demand_transfers: Option<u64>,
    pub prefetch_issued: Option<u64>,
    pub prefetch_hit: Option<u64>,
    pub speedup: Option<f64>,
    pub error: String,
}

impl Row {
    fn failed(model: &str, policy: &str, ratio: f64, seed: u64, error: String) -> Self {
        Row {
            model: model.to_string(),
            policy: policy.to_string(),
            ratio,
            seed,
            status: "error",
            ttft: None,
            mean_tbt: None,
            median_tbt: None,
            hit_rate: None,
            decode_hit_rate: None,
            util_cpu: None,
            util_gpu: None,
            util_pcie: None,
            demand_transfers: None,
            prefetch_issued: None,
            prefetch_hit: None,
            speedup: None,
            error,
        }
    }
}

/// Everything a sweep needs, already resolved.
pub struct Matrix {
    pub models: Vec<ModelConfig>,
    pub policies: Vec<(String, Result<EnginePolicy, String>)>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub prefill_tokens: u32,
    pub decode_steps: usize,
    pub profile: Option<PathBuf>,
    pub baseline: String,
}

impl Matrix {
    pub fn from_args(a: &SweepArgs) -> Result<Self, CliError> {
        for &r in &a.ratios.0 {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CliError::Usage(format!("ratio {r} is outside (0, 1]")));
            }
        }
        if !a.policies.0.contains(&a.baseline) {
            return Err(CliError::Usage(format!(
                "baseline '{}' is not among the swept policies",
                a.baseline
            )));
        }
        let models = a
            .models
            .0
            .iter()
            .map(|m| resolve::model(m))
            .collect::<Result<Vec<_>, _>>()?;
        // A bad policy spec fails its own rows only.
        let policies = a
            .policies
            .0
            .iter()
            .map(|p| (p.clone(), resolve::policy(p).map_err(|e| e.to_string())))
            .collect();
        Ok(Matrix {
            models,
            policies,
            ratios: a.ratios.0.clone(),
            seeds: a.seeds.0.clone(),
            prefill_tokens: a.prefill_tokens,
            decode_steps: a.decode_steps,
            profile: a.profile.clone(),
            baseline: a.baseline.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.models.len() * self.policies.len() * self.ratios.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs every cell on the current rayon pool; rows come back in matrix
    /// order (model, policy, ratio, seed).
    pub fn execute(&self) -> Vec<Row> {
        let traces: Vec<Result<Trace, String>> = self
            .models
            .par_iter()
            .flat_map_iter(|cfg| self.seeds.iter().map(move |&s| (cfg, s)))
            .map(|(cfg, seed)| {
                let params =
                    resolve::gen_params(cfg, seed, None, None, None).map_err(|e| e.to_string())?;
                generate_trace(cfg, &params, self.prefill_tokens, self.decode_steps)
                    .map_err(|e| e.to_string())
            })
            .collect();
        let profiles: Vec<Result<_, String>> = self
            .models
            .iter()
            .map(|cfg| resolve::profile(self.profile.as_deref(), cfg).map_err(|e| e.to_string()))
            .collect();

        let cells: Vec<(usize, usize, usize, usize)> = (0..self.models.len())
            .flat_map(|m| {
                (0..self.policies.len()).flat_map(move |p| {
                    (0..self.ratios.len())
                        .flat_map(move |r| (0..self.seeds.len()).map(move |s| (m, p, r, s)))
                })
            })
            .collect();
        let done: Mutex<Vec<(usize, Row)>> = Mutex::new(Vec::with_capacity(cells.len()));
        cells.par_iter().enumerate().for_each(|(i, &(m, p, r, s))| {
            let row = self.run_cell(&traces[m * self.seeds.len() + s], &profiles[m], m, p, r, s);
            done.lock()
                .expect("no run panics while holding the lock")
                .push((i, row));
        });
        let mut done = done.into_inner().expect("lock is not poisoned");
        done.sort_by_key(|(i, _)| *i);
        let mut rows: Vec<Row> = done.into_iter().map(|(_, row)| row).collect();
        fill_speedups(&mut rows, &self.baseline);
        rows
    }

    fn run_cell(
        &self,
        trace: &Result<Trace, String>,
        profile: &Result<moesim::cost::HardwareProfile, String>,
        m: usize,
        p: usize,
        r: usize,
        s: usize,
    ) -> Row {
        let model = &self.models[m].name;
        let (spec, policy) = &self.policies[p];
        let (ratio, seed) = (self.ratios[r], self.seeds[s]);
        let fail = |e: &str| Row::failed(model, spec, ratio, seed, e.to_string());
        let (trace, profile, policy) = match (trace, profile, policy) {
            (Ok(t), Ok(pr), Ok(po)) => (t, pr, po),
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return fail(e),
        };
        match run_trace(trace, policy, ratio, profile, seed) {
            Err(e) => fail(&e.to_string()),
            Ok(mt) => Row {
                model: model.clone(),
                policy: spec.clone(),
                ratio,
                seed,
                status: "ok",
                ttft: mt.ttft,
                mean_tbt: mt.mean_tbt(),
                median_tbt: mt.median_tbt(),
                hit_rate: mt.cache_stats.hit_rate(),
                decode_hit_rate: mt.decode_cache_stats.hit_rate(),
                util_cpu: mt.utilization(Device::Cpu),
                util_gpu: mt.utilization(Device::Gpu),
                util_pcie: mt.utilization(Device::Pcie),
                demand_transfers: Some(mt.demand_transfers),
                prefetch_issued: Some(mt.prefetch_issued),
                prefetch_hit: Some(mt.prefetch_hit),
                speedup: None,
                error: String::new(),
            },
        }
    }
}

/// Baseline mean TBT over each row's mean TBT, matched on model, ratio and
/// seed.
fn fill_speedups(rows: &mut [Row], baseline: &str) {
    let base: BTreeMap<(String, u64, u64), f64> = rows
        .iter()
        .filter(|r| r.policy == baseline)
        .filter_map(|r| Some(((r.model.clone(), r.ratio.to_bits(), r.seed), r.mean_tbt?)))
        .collect();
    for row in rows.iter_mut() {
        let key = (row.model.clone(), row.ratio.to_bits(), row.seed);
        row.speedup = match (base.get(&key), row.mean_tbt) {
            (Some(&b), Some(m)) if m > 0.0 => Some(b / m),
            _ => None,
        };
    }
}

pub fn rows_to_csv(rows: &[Row]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Model, policy and ratio (as bits) of a summary cell.
type CellKey = (String, String, u64);

/// One line per (model, policy, ratio) cell, seeds aggregated as mean ± sd.
pub fn summary_markdown(rows: &[Row]) -> String {
    let mut cells: Vec<(CellKey, Vec<&Row>)> = Vec::new();
    for row in rows {
        let key = (row.model.clone(), row.policy.clone(), row.ratio.to_bits());
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row),
            None => cells.push((key, vec![row])),
        }
    }
    let mut text = String::from(
        "| model | policy | ratio | runs | TTFT | mean TBT | decode hit rate | speedup |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for ((model, policy, ratio), rows) in cells {
        let ok: Vec<&&Row> = rows.iter().filter(|r| r.status == "ok").collect();
        let column = |f: &dyn Fn(&Row) -> Option<f64>, digits: usize| {
            let values: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            mean_sd(&values).map_or_else(
                || "n/a".to_string(),
                |(m, s)| format!("{m:.digits$} ± {s:.digits$}"),
            )
        };
        text += &format!(
            "| {model} | {policy} | {} | {}/{} | {} | {} | {} | {} |\n",
            f64::from_bits(ratio),
            ok.len(),
            rows.len(),
            column(&|r| r.ttft, 3),
            column(&|r| r.mean_tbt, 3),
            column(&|r| r.decode_hit_rate, 4),
            column(&|r| r.speedup, 3),
        );
    }
    text
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let matrix = Matrix::from_args(a)?;
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let rows = pool.install(|| matrix.execute());

    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(a.out_dir.display(), e))?;
    let csv = rows_to_csv(&rows)?;
    let summary = summary_markdown(&rows);
    let csv_path = a.out_dir.join("results.csv");
    let md_path = a.out_dir.join("summary.md");
    fs::write(&csv_path, csv).map_err(|e| CliError::io(csv_path.display(), e))?;
    fs::write(&md_path, &summary).map_err(|e| CliError::io(md_path.display(), e))?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    let text = format!(
        "{summary}\n{} rows ({failed} failed) written to {}\n",
        rows.len(),
        csv_path.display()
    );
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("standard output", e))
}

//! Sweep execution and result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use branchnet_core::hmc::{self, HmcRun, NormEstimates, PredictorEstimate};
use branchnet_core::scenario::{DataSource, LabelSource, Scenario, ScenarioSpec, TheoryPoint};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ScenarioKind};
use crate::error::{Error, Result};
use crate::io;

pub const RESULTS_FILE: &str = "results.csv";
pub const METADATA_FILE: &str = "metadata.json";

/// Builds the data, kernels and labels shared by every sweep point.
pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    let data = match cfg.scenario {
        ScenarioKind::CsbmStudentTeacher => DataSource::Csbm(cfg.csbm().expect("validated")),
        ScenarioKind::ResidualMlpStudentTeacher => {
            let m = cfg.mlp.as_ref().expect("validated");
            DataSource::Gaussian {
                samples: m.samples,
                input_dim: m.input_dim,
                seed: m.seed,
            }
        }
        ScenarioKind::ExternalDataset => {
            DataSource::Graph(io::load_dataset(cfg.dataset.as_ref().expect("validated"))?)
        }
    };
    let labels = match (cfg.teacher(), cfg.teacher.as_ref().is_some_and(|t| t.ideal)) {
        (None, _) => LabelSource::Data,
        (Some(t), false) => LabelSource::Teacher(t),
        (Some(t), true) => LabelSource::IdealTeacher(t),
    };
    let spec = ScenarioSpec {
        data,
        architecture: cfg.architecture(),
        labels,
        train_ratio: cfg.train_ratio,
        split_seed: cfg.split_seed,
    };
    Ok(Scenario::build(&spec)?)
}

/// Sampler output at one sweep point.
#[derive(Clone, Debug)]
pub struct HmcSummary {
    pub norms: NormEstimates,
    pub predictor: Option<PredictorEstimate>,
    pub acceptance: f64,
    pub divergences: usize,
    pub median_energy_error: f64,
    pub step_size: f64,
    pub min_ess: f64,
    /// `‖a_l‖²/N` series per chain, kept only when traces are requested.
    pub norm_traces: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Clone, Debug)]
pub struct PointResult {
    pub width: usize,
    pub sigma_w: f64,
    pub temperature: f64,
    pub theory: TheoryPoint,
    pub hmc: Option<std::result::Result<HmcSummary, String>>,
    pub theory_seconds: f64,
    pub hmc_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub num_train: usize,
    pub input_dim: usize,
    pub points: Vec<PointResult>,
    pub build_seconds: f64,
    pub threads: usize,
}

impl SweepResult {
    pub fn hmc_failures(&self) -> usize {
        self.points
            .iter()
            .filter(|p| matches!(p.hmc, Some(Err(_))))
            .count()
    }
}

fn summarize(run: &HmcRun, scenario: &Scenario, keep_traces: bool) -> Result<HmcSummary> {
    let norms = hmc::estimate_norms(run)?;
    let predictor = if scenario.test_idx.is_empty() {
        None
    } else {
        Some(hmc::estimate_predictor(run, &scenario.test_labels())?)
    };
    let chains = run.chains.len() as f64;
    let mut errors: Vec<f64> = run
        .chains
        .iter()
        .map(|c| c.stats.median_abs_energy_error())
        .collect();
    errors.sort_by(f64::total_cmp);
    Ok(HmcSummary {
        norms,
        predictor,
        acceptance: run.chains.iter().map(|c| c.acceptance_rate()).sum::<f64>() / chains,
        divergences: run.chains.iter().map(|c| c.stats.divergences).sum(),
        median_energy_error: errors[errors.len() / 2],
        step_size: run.chains.iter().map(|c| c.stats.step_size).sum::<f64>() / chains,
        min_ess: run
            .chains
            .iter()
            .flat_map(|c| c.norm_ess.iter().copied())
            .fold(f64::INFINITY, f64::min),
        norm_traces: keep_traces.then(|| run.chains.iter().map(|c| c.norms.clone()).collect()),
    })
}

fn run_hmc(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    width: usize,
    sigma_w: f64,
) -> Result<HmcSummary> {
    let target = scenario.hmc_target(width, sigma_w * sigma_w, cfg.temperature(sigma_w))?;
    let hcfg = cfg.hmc_config();
    let chains = (0..hcfg.num_chains)
        .into_par_iter()
        .map(|c| hmc::sample_chain(&target, &hcfg, c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let run = HmcRun { chains };
    summarize(&run, scenario, cfg.hmc.norm_traces)
}

fn run_point(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    width: usize,
    sigma_w: f64,
) -> Result<PointResult> {
    let s2 = sigma_w * sigma_w;
    let temperature = cfg.temperature(sigma_w);
    let start = Instant::now();
    let theory = scenario.theory(width as f64, s2, temperature, &cfg.solve_options())?;
    if !theory.order.converged {
        log::warn!("N={width} sigma_w={sigma_w}: saddle solver did not converge");
    }
    let theory_seconds = start.elapsed().as_secs_f64();
    log::info!(
        "N={width} sigma_w={sigma_w}: u = {:?} in {} iterations ({theory_seconds:.2}s)",
        theory.order.u,
        theory.order.iterations
    );
    let start = Instant::now();
    let hmc = cfg.samples_at(width, sigma_w).then(|| {
        let result = run_hmc(cfg, scenario, width, sigma_w).map_err(|e| e.to_string());
        match &result {
            Ok(s) if s.divergences > 0 => {
                log::warn!(
                    "N={width} sigma_w={sigma_w}: {} divergent HMC trajectories",
                    s.divergences
                )
            }
            Err(e) => log::error!("N={width} sigma_w={sigma_w}: HMC failed: {e}"),
            Ok(s) => log::info!(
                "N={width} sigma_w={sigma_w}: HMC acceptance {:.2}, min ESS {:.0}",
                s.acceptance,
                s.min_ess
            ),
        }
        result
    });
    Ok(PointResult {
        width,
        sigma_w,
        temperature,
        theory,
        hmc,
        theory_seconds,
        hmc_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every `(N, σ_w)` point on a pool of `threads` workers (all cores
/// when `None`). Theory failures abort; sampler failures are recorded per
/// point.
pub fn run_sweep(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<SweepResult> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    let start = Instant::now();
    let scenario = build_scenario(cfg)?;
    let build_seconds = start.elapsed().as_secs_f64();
    log::info!(
        "built {} with P = {} ({build_seconds:.2}s)",
        cfg.name,
        scenario.num_train()
    );
    let alpha0 = scenario.num_train() as f64 / (cfg.num_branches() * scenario.input_dim()) as f64;
    if alpha0 >= 1.0 {
        log::warn!(
            "alpha_0 = P/(L N0) = {alpha0:.3} >= 1: the renormalized kernel may be singular"
        );
    }
    let grid: Vec<(usize, f64)> = cfg
        .sweep
        .widths
        .iter()
        .flat_map(|&w| cfg.sweep.sigma_w.iter().map(move |&s| (w, s)))
        .collect();
    let points = pool.install(|| {
        grid.par_iter()
            .map(|&(w, s)| run_point(cfg, &scenario, w, s))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepResult {
        config: cfg.clone(),
        num_train: scenario.num_train(),
        input_dim: scenario.input_dim(),
        points,
        build_seconds,
        threads: pool.current_num_threads(),
    })
}

/// One CSV record.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Row {
    pub scenario: String,
    pub width: usize,
    pub sigma_w: f64,
    /// Branch index, or `all` for network-level quantities.
    pub branch: String,
    pub quantity: String,
    /// `theory` or `hmc`.
    pub source: String,
    pub value: f64,
    /// Monte Carlo standard error; absent for theory rows.
    pub std_err: Option<f64>,
}

pub fn rows(result: &SweepResult) -> Vec<Row> {
    let scenario = result.config.scenario.as_str();
    let mut out = Vec::new();
    for p in &result.points {
        let mut push =
            |branch: String, quantity: &str, source: &str, value: f64, std_err: Option<f64>| {
                out.push(Row {
                    scenario: scenario.to_string(),
                    width: p.width,
                    sigma_w: p.sigma_w,
                    branch,
                    quantity: quantity.to_string(),
                    source: source.to_string(),
                    value,
                    std_err,
                })
            };
        let s2 = p.sigma_w * p.sigma_w;
        let t = &p.theory;
        let all = || "all".to_string();
        for (l, b) in t.norms.branches.iter().enumerate() {
            push(l.to_string(), "u", "theory", b.u, None);
            push(l.to_string(), "u_scaled", "theory", b.scaled(s2), None);
            push(
                l.to_string(),
                "norm_mean_square",
                "theory",
                b.mean_square,
                None,
            );
            push(
                l.to_string(),
                "norm_fluctuation",
                "theory",
                b.fluctuation,
                None,
            );
            push(l.to_string(), "r", "theory", t.order.r[l], None);
            push(l.to_string(), "tr", "theory", t.order.tr[l], None);
        }
        push(all(), "temperature", "theory", p.temperature, None);
        push(
            all(),
            "alpha",
            "theory",
            result.num_train as f64 / p.width as f64,
            None,
        );
        push(
            all(),
            "iterations",
            "theory",
            t.order.iterations as f64,
            None,
        );
        push(
            all(),
            "converged",
            "theory",
            if t.order.converged { 1.0 } else { 0.0 },
            None,
        );
        push(
            all(),
            "final_residual",
            "theory",
            t.order.final_residual,
            None,
        );
        push(all(), "train_mse", "theory", t.train_mse, None);
        if let Some(g) = &t.generalization {
            push(all(), "bias", "theory", g.bias(), None);
            push(all(), "variance", "theory", g.variance(), None);
            push(all(), "generalization", "theory", g.generalization(), None);
            push(all(), "target_power", "theory", g.normalization, None);
            for (l, b) in g.branches.iter().flatten().enumerate() {
                push(l.to_string(), "bias", "theory", b.bias, None);
                push(l.to_string(), "variance", "theory", b.variance, None);
                push(
                    l.to_string(),
                    "generalization",
                    "theory",
                    b.generalization,
                    None,
                );
            }
        }
        if let Some(Ok(h)) = &p.hmc {
            for (l, (e, rhat)) in h.norms.branches.iter().zip(&h.norms.rhat).enumerate() {
                push(l.to_string(), "u", "hmc", e.mean, Some(e.std_err));
                push(
                    l.to_string(),
                    "u_scaled",
                    "hmc",
                    e.mean * s2,
                    Some(e.std_err * s2),
                );
                push(l.to_string(), "rhat", "hmc", *rhat, None);
            }
            if let Some(pe) = &h.predictor {
                push(all(), "bias", "hmc", pe.bias.mean, Some(pe.bias.std_err));
                push(
                    all(),
                    "variance",
                    "hmc",
                    pe.variance_mean.mean,
                    Some(pe.variance_mean.std_err),
                );
                push(
                    all(),
                    "generalization",
                    "hmc",
                    pe.generalization.mean,
                    Some(pe.generalization.std_err),
                );
            }
            push(all(), "acceptance", "hmc", h.acceptance, None);
            push(all(), "divergences", "hmc", h.divergences as f64, None);
            push(
                all(),
                "median_energy_error",
                "hmc",
                h.median_energy_error,
                None,
            );
            push(all(), "step_size", "hmc", h.step_size, None);
            push(all(), "min_ess", "hmc", h.min_ess, None);
        }
    }
    out
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    for required in [
        "scenario", "width", "sigma_w", "branch", "quantity", "source", "value", "std_err",
    ] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("missing column `{required}`"),
            });
        }
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<Row>, _>>()
        .map_err(|e| Error::csv(path, e))
}

#[derive(Serialize)]
struct PointTiming {
    width: usize,
    sigma_w: f64,
    theory_seconds: f64,
    hmc_seconds: f64,
    hmc_error: Option<String>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    name: &'a str,
    scenario: &'a str,
    version: &'static str,
    num_train: usize,
    input_dim: usize,
    branches: usize,
    alpha0: f64,
    threads: usize,
    build_seconds: f64,
    config: &'a ExperimentConfig,
    points: Vec<PointTiming>,
}

fn tag(width: usize, sigma_w: f64) -> String {
    format!("N{width}_sw{sigma_w}")
}

/// Writes `results.csv`, `metadata.json` and any solver traces or norm
/// traces into `dir`. Only `metadata.json` carries timings.
pub fn write_outputs(result: &SweepResult, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(RESULTS_FILE);
    write_rows(&csv_path, &rows(result))?;
    let cfg = &result.config;
    let meta = Metadata {
        name: &cfg.name,
        scenario: cfg.scenario.as_str(),
        version: env!("CARGO_PKG_VERSION"),
        num_train: result.num_train,
        input_dim: result.input_dim,
        branches: cfg.num_branches(),
        alpha0: result.num_train as f64 / (cfg.num_branches() * result.input_dim) as f64,
        threads: result.threads,
        build_seconds: result.build_seconds,
        config: cfg,
        points: result
            .points
            .iter()
            .map(|p| PointTiming {
                width: p.width,
                sigma_w: p.sigma_w,
                theory_seconds: p.theory_seconds,
                hmc_seconds: p.hmc_seconds,
                hmc_error: p.hmc.as_ref().and_then(|h| h.as_ref().err().cloned()),
            })
            .collect(),
    };
    let meta_path = dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    for p in &result.points {
        if !p.theory.order.trace.is_empty() {
            io::write_trace_csv(
                &dir.join(format!("trace_{}.csv", tag(p.width, p.sigma_w))),
                &p.theory.order.trace,
            )?;
        }
        if let Some(Ok(HmcSummary {
            norm_traces: Some(traces),
            ..
        })) = &p.hmc
        {
            let path = dir.join(format!("hmc_norms_{}.csv", tag(p.width, p.sigma_w)));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
            let branches = traces.first().map_or(0, |c| c.len());
            let mut header = vec!["chain".to_string(), "iteration".to_string()];
            header.extend((0..branches).map(|l| format!("norm{l}")));
            w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
            for (c, chain) in traces.iter().enumerate() {
                let len = chain.first().map_or(0, |s| s.len());
                for it in 0..len {
                    let mut rec = vec![c.to_string(), it.to_string()];
                    rec.extend(chain.iter().map(|s| s[it].to_string()));
                    w.write_record(&rec).map_err(|e| Error::csv(&path, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(csv_path)
}

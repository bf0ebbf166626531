//! TOML experiment configuration.
//!
//! ```toml
//! name = "fig2"
//! scenario = "csbm-student-teacher"   # or residual-mlp-student-teacher, external-dataset
//! output_dir = "results/fig2"
//! train_ratio = 0.65
//! split_seed = 1
//!
//! [csbm]                 # csbm-student-teacher only
//! n = 520
//! feature_dim = 190
//! avg_degree = 20.0
//! homophily = 4.0
//! signal_strength = 4.0
//! seed = 1
//!
//! [teacher]              # optional; without it the data labels are used
//! width = 512
//! hidden_variance = 1.0
//! readout_variances = [0.4, 2.0]
//! seed = 3
//!
//! [sweep]
//! widths = [4, 16, 64, 256, 1024]
//! sigma_w = [0.5, 0.8, 1.0, 1.2]
//!
//! [temperature]
//! multiple = 5e-4        # T = multiple * sigma_w^2
//!
//! [hmc]
//! enabled = true
//! widths = [4]           # subset of sweep.widths; all when omitted
//! ```
//!
//! `BRANCHNET_OUTPUT_DIR` overrides `output_dir`; `BRANCHNET_THREADS` caps
//! the worker pool.

use std::path::{Path, PathBuf};

use branchnet_core::datagen::CsbmConfig;
use branchnet_core::hmc::{HmcConfig, Init};
use branchnet_core::network::{Architecture, TeacherConfig};
use branchnet_core::saddle::{SolveOptions, UpdateRule};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DatasetPaths;

pub const OUTPUT_DIR_ENV: &str = "BRANCHNET_OUTPUT_DIR";
pub const THREADS_ENV: &str = "BRANCHNET_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    CsbmStudentTeacher,
    ResidualMlpStudentTeacher,
    ExternalDataset,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::CsbmStudentTeacher => "csbm-student-teacher",
            ScenarioKind::ResidualMlpStudentTeacher => "residual-mlp-student-teacher",
            ScenarioKind::ExternalDataset => "external-dataset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsbmSection {
    pub n: usize,
    pub feature_dim: usize,
    pub avg_degree: f64,
    pub homophily: f64,
    pub signal_strength: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    pub samples: usize,
    pub input_dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSection {
    pub branches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub width: usize,
    #[serde(default = "one")]
    pub hidden_variance: f64,
    pub readout_variances: Vec<f64>,
    pub seed: u64,
    /// Use the analytic label second moment in the saddle equations.
    #[serde(default)]
    pub ideal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    pub sigma_w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSection {
    /// `T = multiple · σ_w²`.
    pub multiple: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    Multiplicative,
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_rule")]
    pub rule: RuleName,
    /// Write the per-iteration solver trace of every point.
    #[serde(default)]
    pub trace: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            damping: default_damping(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            rule: default_rule(),
            trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitName {
    Prior,
    DataConsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcSection {
    #[serde(default)]
    pub enabled: bool,
    /// Subset of the sweep widths to sample; all when absent.
    pub widths: Option<Vec<usize>>,
    pub sigma_w: Option<Vec<f64>>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_kept")]
    pub kept: usize,
    #[serde(default = "default_leapfrog")]
    pub leapfrog_steps: usize,
    pub step_size: Option<f64>,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: InitName,
    /// Write every chain's per-iteration `‖a_l‖²/N` series (histogram input).
    #[serde(default)]
    pub norm_traces: bool,
}

impl Default for HmcSection {
    fn default() -> Self {
        HmcSection {
            enabled: false,
            widths: None,
            sigma_w: None,
            chains: default_chains(),
            warmup: default_warmup(),
            kept: default_kept(),
            leapfrog_steps: default_leapfrog(),
            step_size: None,
            thin: default_thin(),
            seed: 0,
            init: default_init(),
            norm_traces: false,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_damping() -> f64 {
    SolveOptions::default().damping
}
fn default_tol() -> f64 {
    SolveOptions::default().tol
}
fn default_max_iter() -> usize {
    SolveOptions::default().max_iter
}
fn default_rule() -> RuleName {
    RuleName::Multiplicative
}
fn default_chains() -> usize {
    HmcConfig::default().num_chains
}
fn default_warmup() -> usize {
    HmcConfig::default().warmup
}
fn default_kept() -> usize {
    HmcConfig::default().kept
}
fn default_leapfrog() -> usize {
    HmcConfig::default().leapfrog_steps
}
fn default_thin() -> usize {
    HmcConfig::default().thin
}
fn default_init() -> InitName {
    InitName::Prior
}
fn default_train_ratio() -> f64 {
    0.65
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: ScenarioKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default)]
    pub split_seed: u64,
    pub csbm: Option<CsbmSection>,
    pub mlp: Option<MlpSection>,
    pub dataset: Option<DatasetPaths>,
    pub architecture: Option<ArchitectureSection>,
    pub teacher: Option<TeacherSection>,
    pub sweep: SweepSection,
    pub temperature: TemperatureSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub hmc: HmcSection,
}

fn check(cond: bool, path: &str, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(path, message))
    }
}

fn positive(v: f64, path: &str) -> Result<()> {
    check(
        v > 0.0 && v.is_finite(),
        path,
        format!("must be a positive number, got {v}"),
    )
}

impl ExperimentConfig {
    /// Parses TOML, reporting the field path of any schema violation.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("<document>", e.to_string().trim_end()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." {
                    "<document>".into()
                } else {
                    path
                },
                e.inner().to_string().trim_end(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(ds), Some(base)) = (cfg.dataset.as_mut(), path.parent()) {
            for p in [&mut ds.edges, &mut ds.features, &mut ds.labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(!self.name.trim().is_empty(), "name", "must not be empty")?;
        check(
            self.train_ratio > 0.0 && self.train_ratio < 1.0,
            "train_ratio",
            format!("must lie in (0, 1), got {}", self.train_ratio),
        )?;
        check(
            !self.sweep.widths.is_empty(),
            "sweep.widths",
            "must not be empty",
        )?;
        check(
            !self.sweep.sigma_w.is_empty(),
            "sweep.sigma_w",
            "must not be empty",
        )?;
        for (i, w) in self.sweep.widths.iter().enumerate() {
            check(
                *w >= 1,
                &format!("sweep.widths[{i}]"),
                "widths must be >= 1",
            )?;
        }
        for (i, s) in self.sweep.sigma_w.iter().enumerate() {
            positive(*s, &format!("sweep.sigma_w[{i}]"))?;
        }
        check(
            !has_duplicates(
                &self
                    .sweep
                    .widths
                    .iter()
                    .map(|w| *w as f64)
                    .collect::<Vec<_>>(),
            ),
            "sweep.widths",
            "contains duplicates",
        )?;
        check(
            !has_duplicates(&self.sweep.sigma_w),
            "sweep.sigma_w",
            "contains duplicates",
        )?;
        positive(self.temperature.multiple, "temperature.multiple")?;

        match self.scenario {
            ScenarioKind::CsbmStudentTeacher => {
                let c = self
                    .csbm
                    .as_ref()
                    .ok_or_else(|| Error::config("csbm", "required for csbm-student-teacher"))?;
                self.csbm_config(c)
                    .validate()
                    .map_err(|e| Error::config("csbm", e.to_string()))?;
            }
            ScenarioKind::ResidualMlpStudentTeacher => {
                let m = self.mlp.as_ref().ok_or_else(|| {
                    Error::config("mlp", "required for residual-mlp-student-teacher")
                })?;
                check(m.samples >= 2, "mlp.samples", "must be >= 2")?;
                check(m.input_dim >= 1, "mlp.input_dim", "must be >= 1")?;
                check(
                    self.teacher.is_some(),
                    "teacher",
                    "required for residual-mlp-student-teacher",
                )?;
                if let Some(a) = &self.architecture {
                    check(
                        a.branches == 2,
                        "architecture.branches",
                        "the residual MLP has exactly 2 branches",
                    )?;
                }
            }
            ScenarioKind::ExternalDataset => {
                check(
                    self.dataset.is_some(),
                    "dataset",
                    "required for external-dataset",
                )?;
            }
        }
        let branches = self.num_branches();
        check(branches >= 1, "architecture.branches", "must be >= 1")?;
        if let Some(t) = &self.teacher {
            check(t.width >= 1, "teacher.width", "must be >= 1")?;
            positive(t.hidden_variance, "teacher.hidden_variance")?;
            check(
                t.readout_variances.len() == branches,
                "teacher.readout_variances",
                format!(
                    "needs one entry per branch ({branches}), got {}",
                    t.readout_variances.len()
                ),
            )?;
            for (i, b) in t.readout_variances.iter().enumerate() {
                positive(*b, &format!("teacher.readout_variances[{i}]"))?;
            }
        }

        check(
            self.solver.damping > 0.0 && self.solver.damping <= 1.0,
            "solver.damping",
            "must lie in (0, 1]",
        )?;
        positive(self.solver.tol, "solver.tol")?;
        check(self.solver.max_iter >= 1, "solver.max_iter", "must be >= 1")?;

        let h = &self.hmc;
        check(h.chains >= 1, "hmc.chains", "must be >= 1")?;
        check(h.leapfrog_steps >= 1, "hmc.leapfrog_steps", "must be >= 1")?;
        check(h.thin >= 1, "hmc.thin", "must be >= 1")?;
        if let Some(eps) = h.step_size {
            positive(eps, "hmc.step_size")?;
        }
        if h.enabled {
            check(
                h.kept * h.chains >= branchnet_core::hmc::MIN_KEPT,
                "hmc.kept",
                format!(
                    "chains x kept must be at least {}",
                    branchnet_core::hmc::MIN_KEPT
                ),
            )?;
        }
        if let Some(ws) = &h.widths {
            for (i, w) in ws.iter().enumerate() {
                check(
                    self.sweep.widths.contains(w),
                    &format!("hmc.widths[{i}]"),
                    format!("{w} is not in sweep.widths"),
                )?;
            }
        }
        if let Some(ss) = &h.sigma_w {
            for (i, s) in ss.iter().enumerate() {
                check(
                    self.sweep.sigma_w.contains(s),
                    &format!("hmc.sigma_w[{i}]"),
                    format!("{s} is not in sweep.sigma_w"),
                )?;
            }
        }
        Ok(())
    }

    fn csbm_config(&self, c: &CsbmSection) -> CsbmConfig {
        CsbmConfig {
            n: c.n,
            feature_dim: c.feature_dim,
            avg_degree: c.avg_degree,
            homophily: c.homophily,
            signal_strength: c.signal_strength,
            seed: c.seed,
        }
    }

    pub fn num_branches(&self) -> usize {
        match self.scenario {
            ScenarioKind::ResidualMlpStudentTeacher => 2,
            _ => self.architecture.as_ref().map_or(2, |a| a.branches),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.scenario {
            ScenarioKind::ResidualMlpStudentTeacher => Architecture::ResidualMlp,
            _ => Architecture::GraphConv {
                branches: self.num_branches(),
            },
        }
    }

    pub fn csbm(&self) -> Option<CsbmConfig> {
        self.csbm.as_ref().map(|c| self.csbm_config(c))
    }

    pub fn teacher(&self) -> Option<TeacherConfig> {
        self.teacher.as_ref().map(|t| TeacherConfig {
            width: t.width,
            hidden_variance: t.hidden_variance,
            readout_variances: t.readout_variances.clone(),
            seed: t.seed,
        })
    }

    pub fn temperature(&self, sigma_w: f64) -> f64 {
        self.temperature.multiple * sigma_w * sigma_w
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            damping: self.solver.damping,
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            rule: match self.solver.rule {
                RuleName::Multiplicative => UpdateRule::Multiplicative,
                RuleName::Additive => UpdateRule::Additive,
            },
            record_trace: self.solver.trace,
            ..SolveOptions::default()
        }
    }

    pub fn hmc_config(&self) -> HmcConfig {
        let h = &self.hmc;
        HmcConfig {
            step_size: h.step_size,
            leapfrog_steps: h.leapfrog_steps,
            num_chains: h.chains,
            warmup: h.warmup,
            kept: h.kept,
            thin: h.thin,
            seed: h.seed,
            init: match h.init {
                InitName::Prior => Init::Prior,
                InitName::DataConsistent => Init::DataConsistent,
            },
            ..HmcConfig::default()
        }
    }

    /// Whether the sampler runs at this sweep point.
    pub fn samples_at(&self, width: usize, sigma_w: f64) -> bool {
        self.hmc.enabled
            && self
                .hmc
                .widths
                .as_ref()
                .is_none_or(|ws| ws.contains(&width))
            && self
                .hmc
                .sigma_w
                .as_ref()
                .is_none_or(|ss| ss.contains(&sigma_w))
    }

    /// `output_dir`, unless overridden by the environment.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

fn has_duplicates(v: &[f64]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}

/// Thread cap from the environment, if set and valid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .parse()
        .ok()
        .filter(|n| *n >= 1)
}

//! End-to-end scenario assembly: data, branch inputs, kernels, labels, and
//! theory or sampler evaluation at one `(N, σ²)` point.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::datagen::{self, CsbmConfig, Graph};
use crate::hmc::PosteriorTarget;
use crate::kernels::BranchKernels;
use crate::network::{
    analytic_label_covariance, sample_teacher, teacher_labels, Activation, Architecture,
    TeacherConfig,
};
use crate::predictor::{
    bias_variance_with_branches, norm_report, GeneralizationReport, NormReport, Posterior,
};
use crate::saddle::{solve, LabelMoment, OrderParams, SaddleProblem, SolveOptions};
use crate::{Error, Result};

/// Where the inputs come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csbm(CsbmConfig),
    /// i.i.d. standard-normal inputs (residual-MLP experiments).
    Gaussian {
        samples: usize,
        input_dim: usize,
        seed: u64,
    },
    /// A graph supplied by the caller, e.g. loaded from disk.
    Graph(Graph),
}

/// Which labels the student is trained on.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelSource {
    /// Labels carried by the data (CSBM community labels or loaded labels).
    Data,
    /// A finite teacher network of the same architecture.
    Teacher(TeacherConfig),
    /// As `Teacher`, but the saddle equations use the analytic label second
    /// moment `Σ_l (β_l²/L) K_l(σ_t²)` in place of `Y Yᵀ`.
    IdealTeacher(TeacherConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub data: DataSource,
    pub architecture: Architecture,
    pub labels: LabelSource,
    pub train_ratio: f64,
    pub split_seed: u64,
}

/// A fully built scenario. Kernels are stored at unit prior variance.
#[derive(Clone, Debug)]
pub struct Scenario {
    /// `n × N0` input per branch.
    pub branch_inputs: Vec<DMatrix<f64>>,
    pub kernels: BranchKernels,
    pub activations: Vec<Activation>,
    pub labels: DVector<f64>,
    /// Per-branch teacher outputs, when labels come from a teacher.
    pub branch_labels: Option<Vec<DVector<f64>>>,
    /// Analytic label second moment on the training nodes (ideal mode).
    pub label_moment: Option<DMatrix<f64>>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Theory outputs at one sweep point.
#[derive(Clone, Debug)]
pub struct TheoryPoint {
    pub order: OrderParams,
    pub norms: NormReport,
    pub generalization: Option<GeneralizationReport>,
    /// Training-set MSE of the posterior mean predictor.
    pub train_mse: f64,
}

impl Scenario {
    pub fn build(spec: &ScenarioSpec) -> Result<Self> {
        let num_branches = spec.architecture.num_branches();
        let activations = spec.architecture.activations();
        let (branch_inputs, kernels, data_labels) = match (&spec.data, spec.architecture) {
            (
                DataSource::Gaussian {
                    samples,
                    input_dim,
                    seed,
                },
                Architecture::ResidualMlp,
            ) => {
                let x = datagen::gaussian_inputs(*samples, *input_dim, *seed);
                let k = BranchKernels::residual_mlp(&x, 1.0)?;
                (alloc::vec![x.clone(), x], k, None)
            }
            (DataSource::Gaussian { .. }, _) => {
                return Err(Error::invalid(
                    "data",
                    "gaussian inputs need the residual-mlp architecture",
                ));
            }
            (DataSource::Csbm(_) | DataSource::Graph(_), Architecture::ResidualMlp) => {
                return Err(Error::invalid(
                    "architecture",
                    "graph data needs graph-convolution branches",
                ));
            }
            (DataSource::Csbm(cfg), Architecture::GraphConv { .. }) => {
                let g = datagen::generate_csbm(cfg)?;
                let bf = datagen::branch_features(&g, num_branches)?;
                let k = BranchKernels::graph_conv(&bf, 1.0)?;
                (bf.features, k, Some(g.labels))
            }
            (DataSource::Graph(g), Architecture::GraphConv { .. }) => {
                let bf = datagen::branch_features(g, num_branches)?;
                let k = BranchKernels::graph_conv(&bf, 1.0)?;
                (bf.features, k, Some(g.labels.clone()))
            }
        };
        let n = kernels.num_nodes();
        let (train_idx, test_idx) = match &spec.data {
            DataSource::Graph(g) if !g.train_idx.is_empty() => {
                (g.train_idx.clone(), g.test_idx.clone())
            }
            _ => datagen::split_nodes(n, spec.train_ratio, spec.split_seed)?,
        };

        let input_dim = branch_inputs[0].ncols();
        let (labels, branch_labels, label_moment) = match &spec.labels {
            LabelSource::Data => {
                let y = data_labels
                    .ok_or_else(|| Error::invalid("labels", "data source carries no labels"))?;
                (y, None, None)
            }
            LabelSource::Teacher(cfg) | LabelSource::IdealTeacher(cfg) => {
                if cfg.readout_variances.len() != num_branches {
                    return Err(Error::Dimension {
                        context: "teacher readout variances per branch",
                        expected: num_branches,
                        actual: cfg.readout_variances.len(),
                    });
                }
                let teacher = sample_teacher(cfg, activations.clone(), input_dim)?;
                let refs: Vec<&DMatrix<f64>> = branch_inputs.iter().collect();
                let out = teacher_labels(&teacher, &refs)?;
                let moment = if matches!(spec.labels, LabelSource::IdealTeacher(_)) {
                    let kt = kernels
                        .with_prior_variance(cfg.hidden_variance)
                        .restrict_all(&train_idx, &train_idx)?;
                    Some(analytic_label_covariance(&kt, &cfg.readout_variances)?)
                } else {
                    None
                };
                (out.total, Some(out.branches), moment)
            }
        };
        Ok(Scenario {
            branch_inputs,
            kernels,
            activations,
            labels,
            branch_labels,
            label_moment,
            train_idx,
            test_idx,
        })
    }

    pub fn num_train(&self) -> usize {
        self.train_idx.len()
    }

    pub fn input_dim(&self) -> usize {
        self.branch_inputs[0].ncols()
    }

    pub fn train_labels(&self) -> DVector<f64> {
        gather(&self.labels, &self.train_idx)
    }

    pub fn test_labels(&self) -> DVector<f64> {
        gather(&self.labels, &self.test_idx)
    }

    /// Saddle problem at width `N`, prior variance `σ²` and temperature `T`.
    pub fn problem(
        &self,
        width: f64,
        prior_variance: f64,
        temperature: f64,
    ) -> Result<SaddleProblem> {
        let kernels = self
            .kernels
            .with_prior_variance(prior_variance)
            .restrict_all(&self.train_idx, &self.train_idx)?;
        let labels = match &self.label_moment {
            Some(m) => LabelMoment::SecondMoment(m.clone()),
            None => LabelMoment::Labels(self.train_labels()),
        };
        Ok(
            SaddleProblem::new(kernels, labels, width, temperature, prior_variance)?
                .with_input_dim(self.input_dim()),
        )
    }

    /// Solves the saddle point and evaluates predictor statistics.
    pub fn theory(
        &self,
        width: f64,
        prior_variance: f64,
        temperature: f64,
        opts: &SolveOptions,
    ) -> Result<TheoryPoint> {
        let problem = self.problem(width, prior_variance, temperature)?;
        let order = solve(&problem, opts)?;
        let norms = norm_report(&order, &problem);
        let scaled = self.kernels.with_prior_variance(prior_variance);
        let y_train = self.train_labels();
        let posterior = Posterior::new(&scaled, &order.u, &self.train_idx, &y_train, temperature)?;
        let fit = posterior.mean(&self.train_idx)?;
        let train_mse = (fit - &y_train).norm_squared() / y_train.len() as f64;
        let generalization = if self.test_idx.is_empty() {
            None
        } else {
            let stats = posterior.stats(&self.test_idx)?;
            let targets = self.test_labels();
            let branch_targets: Vec<DVector<f64>> = match &self.branch_labels {
                Some(b) => b.iter().map(|v| gather(v, &self.test_idx)).collect(),
                None => Vec::new(),
            };
            Some(if branch_targets.is_empty() {
                crate::predictor::bias_variance(&stats, &targets)?
            } else {
                bias_variance_with_branches(&stats, &targets, &branch_targets)?
            })
        };
        Ok(TheoryPoint {
            order,
            norms,
            generalization,
            train_mse,
        })
    }

    /// Weight posterior of a width-`N` student on the training nodes, with
    /// test-node predictions recorded.
    pub fn hmc_target(
        &self,
        width: usize,
        prior_variance: f64,
        temperature: f64,
    ) -> Result<PosteriorTarget> {
        let train: Vec<DMatrix<f64>> = self
            .branch_inputs
            .iter()
            .map(|x| rows(x, &self.train_idx))
            .collect();
        let target = PosteriorTarget::new(
            train,
            self.train_labels(),
            self.activations.clone(),
            width,
            temperature,
            prior_variance,
        )?;
        if self.test_idx.is_empty() {
            Ok(target)
        } else {
            let test = self
                .branch_inputs
                .iter()
                .map(|x| rows(x, &self.test_idx))
                .collect();
            target.with_test_inputs(test)
        }
    }
}

fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

//! Posterior predictor statistics, generalization decomposition and branch
//! readout-norm statistics at given order parameters.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::kernels::{assemble_restricted, restrict, BranchKernels};
use crate::linalg::SpdFactor;
use crate::saddle::{OrderParams, SaddleProblem};
use crate::{Error, Result};

/// Variances in `[-VARIANCE_CLAMP · max(1, K_νν), 0)` are rounding and clamp
/// to zero; anything more negative is an error.
pub const VARIANCE_CLAMP: f64 = 1e-10;

/// Per test node, overall and per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorStats {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub branch_mean: Vec<DVector<f64>>,
    pub branch_variance: Vec<DVector<f64>>,
}

/// Posterior over a fixed renormalized kernel, ready to predict at any node.
///
/// With `C = Σ_l (u_l/L) K_l|_P + T·I` and `k_{l,ν} = K_l|_{(P,ν)}`:
/// `⟨f_l^ν⟩ = (u_l/L) k_{l,ν}ᵀ C⁻¹ Y` and
/// `⟨δf_{l,ν}²⟩ = (u_l/L) K_l^{νν} − (u_l/L)² k_{l,ν}ᵀ C⁻¹ k_{l,ν}`;
/// the overall statistics use `k_ν = Σ_l (u_l/L) k_{l,ν}`.
#[derive(Debug)]
pub struct Posterior<'a> {
    kernels: &'a BranchKernels,
    u: Vec<f64>,
    train_idx: Vec<usize>,
    factor: Option<SpdFactor>,
    alpha: DVector<f64>,
}

impl<'a> Posterior<'a> {
    pub fn new(
        kernels: &'a BranchKernels,
        u: &[f64],
        train_idx: &[usize],
        train_labels: &DVector<f64>,
        temperature: f64,
    ) -> Result<Self> {
        if train_labels.len() != train_idx.len() {
            return Err(Error::Dimension {
                context: "Posterior labels vs training nodes",
                expected: train_idx.len(),
                actual: train_labels.len(),
            });
        }
        if u.len() != kernels.num_branches() {
            return Err(Error::Dimension {
                context: "Posterior order parameters vs branches",
                expected: kernels.num_branches(),
                actual: u.len(),
            });
        }
        let (factor, alpha) = if train_idx.is_empty() {
            if let Some(bad) = u.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid(
                    "u",
                    format!("order parameters must be >= 0, got {bad}"),
                ));
            }
            (None, DVector::zeros(0))
        } else {
            let restricted = kernels.restrict_all(train_idx, train_idx)?;
            let c = assemble_restricted(&restricted, u, temperature)?;
            let alpha = c.factor.solve_vec(train_labels);
            (Some(c.factor), alpha)
        };
        Ok(Posterior {
            kernels,
            u: u.to_vec(),
            train_idx: train_idx.to_vec(),
            factor,
            alpha,
        })
    }

    fn weight(&self, l: usize) -> f64 {
        self.u[l] / self.kernels.num_branches() as f64
    }

    /// `(u_l/L) K_l|_{(P, test)}`.
    fn cross(&self, l: usize, test_idx: &[usize]) -> Result<DMatrix<f64>> {
        Ok(restrict(&self.kernels.kernels[l], &self.train_idx, test_idx)? * self.weight(l))
    }

    fn self_term(&self, l: usize, test_idx: &[usize]) -> Result<DVector<f64>> {
        let k = &self.kernels.kernels[l];
        let n = k.nrows();
        test_idx
            .iter()
            .map(|&v| {
                if v >= n {
                    Err(Error::IndexOutOfRange { index: v, len: n })
                } else {
                    Ok(self.weight(l) * k[(v, v)])
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(DVector::from_vec)
    }

    /// Posterior variance `prior − ‖L⁻¹ k‖²` per column of `cross`.
    fn schur(&self, prior: &DVector<f64>, cross: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = prior.clone();
        if let Some(factor) = &self.factor {
            for (j, col) in cross.column_iter().enumerate() {
                out[j] -= factor.whiten(&col.into_owned()).norm_squared();
            }
        }
        for (j, v) in out.iter_mut().enumerate() {
            if *v < 0.0 {
                if *v >= -VARIANCE_CLAMP * prior[j].abs().max(1.0) {
                    *v = 0.0;
                } else {
                    return Err(Error::NegativeVariance { node: j, value: *v });
                }
            }
        }
        Ok(out)
    }

    pub fn branch_mean(&self, l: usize, test_idx: &[usize]) -> Result<DVector<f64>> {
        if self.train_idx.is_empty() {
            return Ok(DVector::zeros(test_idx.len()));
        }
        Ok(self.cross(l, test_idx)?.tr_mul(&self.alpha))
    }

    pub fn mean(&self, test_idx: &[usize]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(test_idx.len());
        for l in 0..self.kernels.num_branches() {
            out += self.branch_mean(l, test_idx)?;
        }
        Ok(out)
    }

    pub fn variance(&self, test_idx: &[usize]) -> Result<DVector<f64>> {
        let mut prior = DVector::zeros(test_idx.len());
        let mut cross = DMatrix::zeros(self.train_idx.len(), test_idx.len());
        for l in 0..self.kernels.num_branches() {
            prior += self.self_term(l, test_idx)?;
            cross += self.cross(l, test_idx)?;
        }
        self.schur(&prior, &cross)
    }

    pub fn branch_variance(&self, l: usize, test_idx: &[usize]) -> Result<DVector<f64>> {
        self.schur(&self.self_term(l, test_idx)?, &self.cross(l, test_idx)?)
    }

    pub fn stats(&self, test_idx: &[usize]) -> Result<PredictorStats> {
        let l = self.kernels.num_branches();
        let branch_mean = (0..l)
            .map(|b| self.branch_mean(b, test_idx))
            .collect::<Result<Vec<_>>>()?;
        let mean = branch_mean
            .iter()
            .fold(DVector::zeros(test_idx.len()), |acc, m| acc + m);
        Ok(PredictorStats {
            mean,
            variance: self.variance(test_idx)?,
            branch_variance: (0..l)
                .map(|b| self.branch_variance(b, test_idx))
                .collect::<Result<Vec<_>>>()?,
            branch_mean,
        })
    }
}

/// `⟨f^ν⟩ = k_νᵀ (K + T·I)⁻¹ Y` for every test node.
pub fn mean_predictor(
    u: &[f64],
    kernels: &BranchKernels,
    train_idx: &[usize],
    test_idx: &[usize],
    train_labels: &DVector<f64>,
    temperature: f64,
) -> Result<DVector<f64>> {
    Posterior::new(kernels, u, train_idx, train_labels, temperature)?.mean(test_idx)
}

/// `⟨δf_ν²⟩ = K_νν − k_νᵀ (K + T·I)⁻¹ k_ν` for every test node.
pub fn predictor_variance(
    u: &[f64],
    kernels: &BranchKernels,
    train_idx: &[usize],
    test_idx: &[usize],
    temperature: f64,
) -> Result<DVector<f64>> {
    let zeros = DVector::zeros(train_idx.len());
    Posterior::new(kernels, u, train_idx, &zeros, temperature)?.variance(test_idx)
}

pub fn branch_predictor_stats(
    u: &[f64],
    kernels: &BranchKernels,
    train_idx: &[usize],
    test_idx: &[usize],
    train_labels: &DVector<f64>,
    temperature: f64,
) -> Result<PredictorStats> {
    Posterior::new(kernels, u, train_idx, train_labels, temperature)?.stats(test_idx)
}

/// Bias and variance of one readout against its target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasVariance {
    pub bias: f64,
    pub variance: f64,
    pub generalization: f64,
}

impl BiasVariance {
    fn compute(
        mean: &DVector<f64>,
        variance: &DVector<f64>,
        target: &DVector<f64>,
    ) -> Result<Self> {
        let t = target.len();
        if t == 0 {
            return Err(Error::invalid("targets", "empty test set"));
        }
        if mean.len() != t || variance.len() != t {
            return Err(Error::Dimension {
                context: "bias_variance (stats vs targets)",
                expected: t,
                actual: mean.len(),
            });
        }
        let bias = (mean - target).norm_squared() / t as f64;
        let variance = variance.sum() / t as f64;
        Ok(BiasVariance {
            bias,
            variance,
            generalization: bias + variance,
        })
    }

    pub fn normalized(&self, by: f64) -> Self {
        BiasVariance {
            bias: self.bias / by,
            variance: self.variance / by,
            generalization: self.generalization / by,
        }
    }
}

/// `ε_g = Bias + Variance` on the test nodes; raw values plus the
/// normalization constant `mean(y²)` used for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizationReport {
    pub overall: BiasVariance,
    /// Present only when branch-level targets `f_l*` exist (student-teacher).
    pub branches: Option<Vec<BiasVariance>>,
    pub normalization: f64,
}

impl GeneralizationReport {
    pub fn bias(&self) -> f64 {
        self.overall.bias
    }

    pub fn variance(&self) -> f64 {
        self.overall.variance
    }

    pub fn generalization(&self) -> f64 {
        self.overall.generalization
    }
}

pub fn bias_variance(
    stats: &PredictorStats,
    targets: &DVector<f64>,
) -> Result<GeneralizationReport> {
    let overall = BiasVariance::compute(&stats.mean, &stats.variance, targets)?;
    Ok(GeneralizationReport {
        overall,
        branches: None,
        normalization: targets.norm_squared() / targets.len() as f64,
    })
}

/// As [`bias_variance`], also scoring each branch readout against its
/// teacher branch output.
pub fn bias_variance_with_branches(
    stats: &PredictorStats,
    targets: &DVector<f64>,
    branch_targets: &[DVector<f64>],
) -> Result<GeneralizationReport> {
    let mut report = bias_variance(stats, targets)?;
    if branch_targets.len() != stats.branch_mean.len() {
        return Err(Error::Dimension {
            context: "branch targets vs branches",
            expected: stats.branch_mean.len(),
            actual: branch_targets.len(),
        });
    }
    report.branches = Some(
        stats
            .branch_mean
            .iter()
            .zip(&stats.branch_variance)
            .zip(branch_targets)
            .map(|((m, v), t)| BiasVariance::compute(m, v, t))
            .collect::<Result<Vec<_>>>()?,
    );
    Ok(report)
}

/// Decomposition of `u_l = ⟨‖a_l‖²⟩/N` into the squared posterior mean
/// `σ² r_l / N` and the fluctuation `σ² (N − Tr_l) / N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchNorm {
    pub u: f64,
    pub mean_square: f64,
    pub fluctuation: f64,
}

impl BranchNorm {
    /// `⟨‖a_l‖²⟩ σ² / N = u_l σ²`, the quantity compared with `β_l² σ_t²`.
    pub fn scaled(&self, prior_variance: f64) -> f64 {
        self.u * prior_variance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormReport {
    pub branches: Vec<BranchNorm>,
    pub prior_variance: f64,
}

impl NormReport {
    pub fn scaled_norms(&self) -> Vec<f64> {
        self.branches
            .iter()
            .map(|b| b.scaled(self.prior_variance))
            .collect()
    }
}

pub fn norm_report(params: &OrderParams, problem: &SaddleProblem) -> NormReport {
    let s2 = problem.prior_variance;
    let n = problem.width;
    NormReport {
        branches: params
            .u
            .iter()
            .zip(params.r.iter().zip(&params.tr))
            .map(|(&u, (&r, &tr))| BranchNorm {
                u,
                mean_square: s2 * r / n,
                fluctuation: s2 * (n - tr) / n,
            })
            .collect(),
        prior_variance: s2,
    }
}

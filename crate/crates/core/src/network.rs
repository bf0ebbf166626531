//! Explicit finite-width branching networks and teacher sampling.
//!
//! Branch `l` computes `f_l = φ_l(X_l W_l / √N0) a_l / √(L N)` and the network
//! output is `f = Σ_l f_l`. The `1/√L`, `1/√N` and `1/√N0` scalings are
//! applied here, never folded into stored weights, so weight variances match
//! the priors directly.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::{self, stream, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative, with the ReLU derivative at exactly 0 taken as 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture families used in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// `L` linear branches on `A^l X`.
    GraphConv { branches: usize },
    /// One linear and one ReLU branch on the same inputs.
    ResidualMlp,
}

impl Architecture {
    pub fn activations(self) -> Vec<Activation> {
        match self {
            Architecture::GraphConv { branches } => alloc::vec![Activation::Identity; branches],
            Architecture::ResidualMlp => alloc::vec![Activation::Identity, Activation::Relu],
        }
    }

    pub fn num_branches(self) -> usize {
        match self {
            Architecture::GraphConv { branches } => branches,
            Architecture::ResidualMlp => 2,
        }
    }
}

/// Hidden weights `W_l` (`N0 × N`) and readouts `a_l` (length `N`) per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub hidden: Vec<DMatrix<f64>>,
    pub readout: Vec<DVector<f64>>,
    pub activations: Vec<Activation>,
}

impl NetworkParams {
    pub fn zeros(activations: Vec<Activation>, input_dim: usize, width: usize) -> Self {
        let l = activations.len();
        NetworkParams {
            hidden: (0..l).map(|_| DMatrix::zeros(input_dim, width)).collect(),
            readout: (0..l).map(|_| DVector::zeros(width)).collect(),
            activations,
        }
    }

    pub fn num_branches(&self) -> usize {
        self.activations.len()
    }

    pub fn width(&self) -> usize {
        self.readout.first().map_or(0, |a| a.len())
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(0, |w| w.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.activations.len();
        if l == 0 || self.hidden.len() != l || self.readout.len() != l {
            return Err(Error::invalid(
                "params",
                format!(
                    "{} activations, {} hidden, {} readouts",
                    l,
                    self.hidden.len(),
                    self.readout.len()
                ),
            ));
        }
        let (n0, n) = (self.input_dim(), self.width());
        for (w, a) in self.hidden.iter().zip(&self.readout) {
            if w.shape() != (n0, n) || a.len() != n {
                return Err(Error::Dimension {
                    context: "NetworkParams branch shapes",
                    expected: n,
                    actual: a.len(),
                });
            }
        }
        Ok(())
    }

    /// Number of scalar parameters `L (N0 N + N)`.
    pub fn len(&self) -> usize {
        self.num_branches() * (self.input_dim() * self.width() + self.width())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens as `[W_0 (column-major), a_0, W_1, a_1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (w, a) in self.hidden.iter().zip(&self.readout) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(a.as_slice());
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) for the given shape.
    pub fn from_flat(
        flat: &[f64],
        activations: Vec<Activation>,
        input_dim: usize,
        width: usize,
    ) -> Result<Self> {
        let per_branch = input_dim * width + width;
        let l = activations.len();
        if flat.len() != l * per_branch {
            return Err(Error::Dimension {
                context: "NetworkParams::from_flat",
                expected: l * per_branch,
                actual: flat.len(),
            });
        }
        let mut hidden = Vec::with_capacity(l);
        let mut readout = Vec::with_capacity(l);
        for chunk in flat.chunks(per_branch) {
            let (w, a) = chunk.split_at(input_dim * width);
            hidden.push(DMatrix::from_column_slice(input_dim, width, w));
            readout.push(DVector::from_column_slice(a));
        }
        Ok(NetworkParams {
            hidden,
            readout,
            activations,
        })
    }

    /// `‖a_l‖² / N` per branch.
    pub fn readout_norms(&self) -> Vec<f64> {
        let n = self.width() as f64;
        self.readout.iter().map(|a| a.norm_squared() / n).collect()
    }
}

/// Network output and its per-branch decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub total: DVector<f64>,
    pub branches: Vec<DVector<f64>>,
}

/// Pre-activations `X W / √N0` for one branch.
pub(crate) fn preactivations(x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = x * w;
    h /= libm::sqrt(w.nrows() as f64);
    h
}

/// Evaluates the network. `inputs[l]` is branch `l`'s `n × N0` input
/// (`X_l` for graph convolutions, the shared raw inputs for a residual MLP).
pub fn forward(params: &NetworkParams, inputs: &[&DMatrix<f64>]) -> Result<ForwardOutput> {
    params.validate()?;
    if inputs.len() != params.num_branches() {
        return Err(Error::Dimension {
            context: "forward (inputs per branch)",
            expected: params.num_branches(),
            actual: inputs.len(),
        });
    }
    let rows = inputs[0].nrows();
    let scale = 1.0 / libm::sqrt((params.num_branches() * params.width()) as f64);
    let mut total = DVector::zeros(rows);
    let mut branches = Vec::with_capacity(params.num_branches());
    for (l, x) in inputs.iter().enumerate() {
        if x.ncols() != params.input_dim() || x.nrows() != rows {
            return Err(Error::Dimension {
                context: "forward (input columns vs N0)",
                expected: params.input_dim(),
                actual: x.ncols(),
            });
        }
        let act = params.activations[l];
        let mut h = preactivations(x, &params.hidden[l]);
        if act != Activation::Identity {
            h.apply(|v| *v = act.apply(*v));
        }
        let f_l = (h * &params.readout[l]) * scale;
        total += &f_l;
        branches.push(f_l);
    }
    Ok(ForwardOutput { total, branches })
}

/// Teacher network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    /// `N_t`.
    pub width: usize,
    /// `σ_t²`.
    pub hidden_variance: f64,
    /// `β_l²`, one per branch.
    pub readout_variances: Vec<f64>,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("teacher.width", "must be >= 1"));
        }
        if !(self.hidden_variance > 0.0 && self.hidden_variance.is_finite()) {
            return Err(Error::invalid(
                "teacher.hidden_variance",
                "must be positive",
            ));
        }
        if self.readout_variances.is_empty()
            || self
                .readout_variances
                .iter()
                .any(|b| !(*b > 0.0 && b.is_finite()))
        {
            return Err(Error::invalid(
                "teacher.readout_variances",
                "must be non-empty and positive",
            ));
        }
        Ok(())
    }
}

/// Draws every hidden weight from `N(0, hidden_variance)` and branch `l`'s
/// readout from `N(0, readout_variances[l])`.
pub fn sample_gaussian_params(
    rng: &mut Rng,
    activations: Vec<Activation>,
    input_dim: usize,
    width: usize,
    hidden_variance: f64,
    readout_variances: &[f64],
) -> Result<NetworkParams> {
    if readout_variances.len() != activations.len() {
        return Err(Error::Dimension {
            context: "readout variances per branch",
            expected: activations.len(),
            actual: readout_variances.len(),
        });
    }
    let mut params = NetworkParams::zeros(activations, input_dim, width);
    let sw = libm::sqrt(hidden_variance);
    for (w, (a, var)) in params
        .hidden
        .iter_mut()
        .zip(params.readout.iter_mut().zip(readout_variances))
    {
        for v in w.iter_mut() {
            *v = sw * rng.sample::<f64, _>(StandardNormal);
        }
        let sa = libm::sqrt(*var);
        for v in a.iter_mut() {
            *v = sa * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(params)
}

/// Samples a teacher; deterministic under `cfg.seed`.
pub fn sample_teacher(
    cfg: &TeacherConfig,
    activations: Vec<Activation>,
    input_dim: usize,
) -> Result<NetworkParams> {
    cfg.validate()?;
    if input_dim == 0 {
        return Err(Error::invalid("input_dim", "must be >= 1"));
    }
    let mut rng = rng::seeded(cfg.seed, stream::TEACHER);
    sample_gaussian_params(
        &mut rng,
        activations,
        input_dim,
        cfg.width,
        cfg.hidden_variance,
        &cfg.readout_variances,
    )
}

/// Teacher outputs `Y* = f*(inputs)` at every node, with branch outputs.
pub fn teacher_labels(teacher: &NetworkParams, inputs: &[&DMatrix<f64>]) -> Result<ForwardOutput> {
    forward(teacher, inputs)
}

/// `Σ_l (β_l² / L) K_l(σ_t²)`: the infinite-`N_t` limit of `Y* Y*ᵀ`, given
/// kernels already built at the teacher's hidden variance.
pub fn analytic_label_covariance(
    teacher_kernels: &[DMatrix<f64>],
    betas_sq: &[f64],
) -> Result<DMatrix<f64>> {
    crate::kernels::mix(teacher_kernels, betas_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gaussian_inputs;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_readout_gives_zero_output() {
        let mut rng = rng::seeded(1, 0);
        let mut p = sample_gaussian_params(
            &mut rng,
            Architecture::ResidualMlp.activations(),
            3,
            4,
            1.0,
            &[1.0, 1.0],
        )
        .unwrap();
        for a in p.readout.iter_mut() {
            a.fill(0.0);
        }
        let x = gaussian_inputs(5, 3, 2);
        let out = forward(&p, &[&x, &x]).unwrap();
        assert!(out.total.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_branch_formula() {
        let mut rng = rng::seeded(2, 0);
        let p = sample_gaussian_params(
            &mut rng,
            alloc::vec![Activation::Identity],
            4,
            3,
            1.0,
            &[1.0],
        )
        .unwrap();
        let x = gaussian_inputs(6, 4, 3);
        let out = forward(&p, &[&x]).unwrap();
        let expected = &x * &p.hidden[0] * &p.readout[0] / (3.0_f64 * 4.0).sqrt();
        assert!((&out.total - expected).amax() < 1e-13);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = rng::seeded(3, 0);
        let p = sample_gaussian_params(
            &mut rng,
            Architecture::GraphConv { branches: 3 }.activations(),
            5,
            2,
            1.0,
            &[1.0, 2.0, 3.0],
        )
        .unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.len());
        let q = NetworkParams::from_flat(&flat, p.activations.clone(), 5, 2).unwrap();
        assert_eq!(p, q);
        assert!(NetworkParams::from_flat(&flat[1..], p.activations.clone(), 5, 2).is_err());
    }

    #[test]
    fn teacher_is_seed_deterministic_and_has_prior_variances() {
        let cfg = TeacherConfig {
            width: 1024,
            hidden_variance: 1.0,
            readout_variances: alloc::vec![0.4, 2.0],
            seed: 7,
        };
        let acts = Architecture::GraphConv { branches: 2 }.activations();
        let t = sample_teacher(&cfg, acts.clone(), 20).unwrap();
        assert_eq!(t, sample_teacher(&cfg, acts, 20).unwrap());
        let w_var: f64 = t
            .hidden
            .iter()
            .flat_map(|w| w.iter())
            .map(|v| v * v)
            .sum::<f64>()
            / (2.0 * 20.0 * 1024.0);
        assert!((w_var - 1.0).abs() < 0.05, "{w_var}");
        for (a, beta) in t.readout.iter().zip([0.4, 2.0]) {
            let var = a.norm_squared() / 1024.0;
            assert!((var / beta - 1.0).abs() < 0.1, "{var} vs {beta}");
        }
    }

    #[test]
    fn teacher_config_validation() {
        let mut cfg = TeacherConfig {
            width: 4,
            hidden_variance: 1.0,
            readout_variances: alloc::vec![1.0],
            seed: 0,
        };
        assert!(cfg.validate().is_ok());
        cfg.readout_variances[0] = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(1e-300), 1.0);
    }

    #[test]
    fn analytic_covariance_special_cases() {
        let k = gaussian_inputs(4, 4, 1);
        let k = &k * k.transpose();
        let zero = analytic_label_covariance(&[k.clone(), k.clone()], &[0.0, 0.0]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let one = analytic_label_covariance(core::slice::from_ref(&k), &[1.0]).unwrap();
        assert_relative_eq!(one, k);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_is_sum_of_branches_and_linear_in_readout(seed in 0u64..500, width in 1usize..6) {
            let mut rng = rng::seeded(seed, 0);
            let p = sample_gaussian_params(&mut rng, Architecture::ResidualMlp.activations(), 3, width, 1.0, &[1.0, 0.5]).unwrap();
            let x = gaussian_inputs(7, 3, seed + 1);
            let out = forward(&p, &[&x, &x]).unwrap();
            let summed = out.branches.iter().fold(DVector::zeros(7), |acc, b| acc + b);
            prop_assert!((&summed - &out.total).amax() < 1e-12);
            let mut doubled = p.clone();
            for a in doubled.readout.iter_mut() { *a *= 2.0; }
            let out2 = forward(&doubled, &[&x, &x]).unwrap();
            prop_assert!((&out2.total - &out.total * 2.0).amax() < 1e-12);
        }
    }
}

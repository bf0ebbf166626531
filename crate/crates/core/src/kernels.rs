//! Per-branch GP input kernels and the renormalized kernel assembled from
//! them.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;

use crate::datagen::BranchFeatures;
use crate::linalg::SpdFactor;
use crate::{Error, Result};

/// Feature map of a single branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    /// Linear readout of `A^order X`.
    GraphConv { order: usize },
    /// Linear hidden layer on raw inputs.
    Linear,
    /// ReLU hidden layer on raw inputs.
    Relu,
}

/// Full `n × n` input kernels, one per branch, built at `prior_variance`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchKernels {
    pub kernels: Vec<DMatrix<f64>>,
    pub prior_variance: f64,
    pub kinds: Vec<BranchKind>,
}

impl BranchKernels {
    /// `K_l = (σ²/N0) X_l X_lᵀ` for every graph-convolution branch.
    pub fn graph_conv(features: &BranchFeatures, prior_variance: f64) -> Result<Self> {
        let kernels = features
            .features
            .iter()
            .map(|x| branch_kernel(x, prior_variance))
            .collect::<Result<Vec<_>>>()?;
        let kinds = (0..kernels.len())
            .map(|order| BranchKind::GraphConv { order })
            .collect();
        Ok(BranchKernels {
            kernels,
            prior_variance,
            kinds,
        })
    }

    /// Linear and ReLU branches on the same raw inputs (residual MLP).
    pub fn residual_mlp(inputs: &DMatrix<f64>, prior_variance: f64) -> Result<Self> {
        let linear = branch_kernel(inputs, prior_variance)?;
        let relu = relu_kernel(&linear)?;
        Ok(BranchKernels {
            kernels: alloc::vec![linear, relu],
            prior_variance,
            kinds: alloc::vec![BranchKind::Linear, BranchKind::Relu],
        })
    }

    pub fn num_branches(&self) -> usize {
        self.kernels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.nrows())
    }

    /// Every kernel here is linear in the prior variance, so changing it is a
    /// rescale.
    pub fn with_prior_variance(&self, prior_variance: f64) -> Self {
        let scale = prior_variance / self.prior_variance;
        BranchKernels {
            kernels: self.kernels.iter().map(|k| k * scale).collect(),
            prior_variance,
            kinds: self.kinds.clone(),
        }
    }

    /// `K_l|_{rows, cols}` for every branch.
    pub fn restrict_all(&self, rows: &[usize], cols: &[usize]) -> Result<Vec<DMatrix<f64>>> {
        self.kernels
            .iter()
            .map(|k| restrict(k, rows, cols))
            .collect()
    }
}

/// `(σ²/N0) X Xᵀ` for an `n × N0` feature matrix.
pub fn branch_kernel(features: &DMatrix<f64>, prior_variance: f64) -> Result<DMatrix<f64>> {
    let n0 = features.ncols();
    if n0 == 0 {
        return Err(Error::invalid(
            "features",
            "need at least one feature column",
        ));
    }
    let mut k = features * features.transpose();
    k *= prior_variance / n0 as f64;
    Ok(k)
}

/// `J(θ) = sin θ + (π − θ) cos θ`.
pub fn arc_cosine_j(theta: f64) -> f64 {
    libm::sin(theta) + (PI - theta) * libm::cos(theta)
}

/// First-order arc-cosine kernel of a ReLU layer whose pre-activations have
/// covariance `linear`:
/// `K(x, x') = √(K0(x,x) K0(x',x')) J(θ) / 2π`, `cos θ = K0(x,x') / √(K0(x,x) K0(x',x'))`.
///
/// Nodes with a zero diagonal get a zero row and column.
pub fn relu_kernel(linear: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = linear.nrows();
    if !linear.is_square() {
        return Err(Error::Dimension {
            context: "relu_kernel (square)",
            expected: n,
            actual: linear.ncols(),
        });
    }
    let diag: Vec<f64> = (0..n).map(|i| linear[(i, i)]).collect();
    if let Some(i) = diag.iter().position(|d| *d < 0.0 || !d.is_finite()) {
        return Err(Error::invalid(
            "linear",
            format!("diagonal entry {i} is {}", diag[i]),
        ));
    }
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let norm = libm::sqrt(diag[i] * diag[j]);
            let v = if norm > 0.0 {
                if i == j {
                    // θ = 0 exactly, J(0) = π
                    diag[i] / 2.0
                } else {
                    let cos = (linear[(i, j)] / norm).clamp(-1.0, 1.0);
                    norm * arc_cosine_j(libm::acos(cos)) / (2.0 * PI)
                }
            } else {
                0.0
            };
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Submatrix `kernel[rows, cols]`.
pub fn restrict(kernel: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
    for (&idx, len) in rows
        .iter()
        .map(|r| (r, kernel.nrows()))
        .chain(cols.iter().map(|c| (c, kernel.ncols())))
    {
        if idx >= len {
            return Err(Error::IndexOutOfRange { index: idx, len });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        kernel[(rows[i], cols[j])]
    }))
}

/// `Σ_l (u_l / L) K_l + T·I` together with its factorization.
#[derive(Clone, Debug)]
pub struct AssembledKernel {
    pub matrix: DMatrix<f64>,
    pub temperature: f64,
    pub factor: SpdFactor,
}

impl AssembledKernel {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }
}

/// `Σ_l (u_l / L) K_l` over kernels that are already restricted to a common
/// index set. `u_l = 0` is accepted (the branch drops out).
pub fn mix(kernels: &[DMatrix<f64>], u: &[f64]) -> Result<DMatrix<f64>> {
    if kernels.is_empty() {
        return Err(Error::invalid("kernels", "need at least one branch"));
    }
    if u.len() != kernels.len() {
        return Err(Error::Dimension {
            context: "mix (order parameters vs branches)",
            expected: kernels.len(),
            actual: u.len(),
        });
    }
    if let Some(bad) = u.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid(
            "u",
            format!("order parameters must be finite and >= 0, got {bad}"),
        ));
    }
    let l = kernels.len() as f64;
    let (rows, cols) = kernels[0].shape();
    let mut k = DMatrix::zeros(rows, cols);
    for (kl, ul) in kernels.iter().zip(u) {
        if kl.shape() != (rows, cols) {
            return Err(Error::Dimension {
                context: "mix (kernel shapes)",
                expected: rows,
                actual: kl.nrows(),
            });
        }
        k += kl * (ul / l);
    }
    Ok(k)
}

/// Assembles and factors `Σ_l (u_l/L) K_l + T·I` from restricted kernels.
pub fn assemble_restricted(
    kernels: &[DMatrix<f64>],
    u: &[f64],
    temperature: f64,
) -> Result<AssembledKernel> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(
            "temperature",
            format!("must be finite and >= 0, got {temperature}"),
        ));
    }
    let mut matrix = mix(kernels, u)?;
    for i in 0..matrix.nrows() {
        matrix[(i, i)] += temperature;
    }
    let factor = SpdFactor::new(&matrix)?;
    Ok(AssembledKernel {
        matrix,
        temperature,
        factor,
    })
}

/// Restricts the full kernels to the training nodes and assembles them.
pub fn assemble(
    branch_kernels: &BranchKernels,
    u: &[f64],
    train_idx: &[usize],
    temperature: f64,
) -> Result<AssembledKernel> {
    let restricted = branch_kernels.restrict_all(train_idx, train_idx)?;
    assemble_restricted(&restricted, u, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gaussian_inputs;
    use crate::linalg::symmetric_eigenvalues;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    #[test]
    fn identity_features() {
        let k = branch_kernel(&DMatrix::identity(5, 5), 1.0).unwrap();
        assert!((&k - DMatrix::identity(5, 5) / 5.0).amax() < 1e-15);
    }

    #[test]
    fn kernel_is_linear_in_prior_variance() {
        let x = gaussian_inputs(7, 3, 2);
        let k1 = branch_kernel(&x, 0.7).unwrap();
        let k2 = branch_kernel(&x, 1.4).unwrap();
        assert!((&k2 - &k1 * 2.0).amax() < 1e-14);
    }

    #[test]
    fn relu_diagonal_and_orthogonal_pair() {
        let lin = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let k = relu_kernel(&lin).unwrap();
        assert_eq!(k[(0, 0)], 0.5);
        assert_relative_eq!(k[(0, 1)], 1.0 / (2.0 * PI), epsilon = 1e-15);
    }

    #[test]
    fn relu_zero_diagonal_row_is_zero() {
        let lin = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let k = relu_kernel(&lin).unwrap();
        assert_eq!(k[(0, 0)], 0.0);
        assert_eq!(k[(0, 1)], 0.0);
        assert_eq!(k[(1, 1)], 1.0);
    }

    #[test]
    fn relu_clamps_rounding_past_one() {
        // parallel inputs, cosine may round above 1
        let x = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        let lin = branch_kernel(&x, 1.3).unwrap();
        let k = relu_kernel(&lin).unwrap();
        assert!(k.iter().all(|v| v.is_finite()));
        assert_relative_eq!(k[(0, 1)], lin[(0, 0)] / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn relu_kernel_preserves_psd() {
        let x = gaussian_inputs(200, 10, 3);
        let k = relu_kernel(&branch_kernel(&x, 1.0).unwrap()).unwrap();
        let eig = symmetric_eigenvalues(&k);
        assert!(eig[0] > -1e-8 * eig.last().unwrap());
    }

    #[test]
    fn relu_kernel_matches_feature_covariance() {
        let n = 8;
        let n0 = 5;
        let x = gaussian_inputs(n, n0, 4);
        let sigma2 = 1.0;
        let k = relu_kernel(&branch_kernel(&x, sigma2).unwrap()).unwrap();
        let draws = 100_000;
        let mut rng = crate::rng::seeded(99, 0);
        let mut acc = DMatrix::<f64>::zeros(n, n);
        let mut h = alloc::vec![0.0; n];
        for _ in 0..draws {
            let w: Vec<f64> = (0..n0)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            for (i, hi) in h.iter_mut().enumerate() {
                let pre: f64 = (0..n0).map(|j| x[(i, j)] * w[j]).sum::<f64>() / (n0 as f64).sqrt();
                *hi = pre.max(0.0);
            }
            for j in 0..n {
                for i in 0..n {
                    acc[(i, j)] += h[i] * h[j];
                }
            }
        }
        acc /= draws as f64;
        let rel = (&acc - &k).norm() / k.norm();
        assert!(rel < 0.02, "relative Frobenius error {rel}");
    }

    #[test]
    fn restrict_edges() {
        let k = DMatrix::from_fn(4, 4, |i, j| (10 * i + j) as f64);
        let all = [0, 1, 2, 3];
        assert_eq!(restrict(&k, &all, &all).unwrap(), k);
        assert_eq!(restrict(&k, &[2], &[3]).unwrap()[(0, 0)], 23.0);
        assert!(matches!(
            restrict(&k, &[4], &[0]),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn assemble_identity() {
        let bk = BranchKernels {
            kernels: alloc::vec![DMatrix::identity(3, 3)],
            prior_variance: 1.0,
            kinds: alloc::vec![BranchKind::Linear],
        };
        let a = assemble(&bk, &[1.0], &[0, 1, 2], 0.0).unwrap();
        assert_eq!(a.matrix, DMatrix::identity(3, 3));
        assert_relative_eq!(a.log_det(), 0.0);
    }

    #[test]
    fn assemble_rejects_negative_u() {
        let k = alloc::vec![DMatrix::identity(2, 2)];
        assert!(assemble_restricted(&k, &[-1.0], 0.1).is_err());
        assert!(assemble_restricted(&k, &[1.0, 1.0], 0.1).is_err());
    }

    #[test]
    fn assembled_eigenvalues_at_least_temperature() {
        let x0 = gaussian_inputs(12, 3, 1);
        let x1 = gaussian_inputs(12, 4, 2);
        let ks = alloc::vec![
            branch_kernel(&x0, 1.0).unwrap(),
            branch_kernel(&x1, 1.0).unwrap()
        ];
        let t = 0.05;
        let a = assemble_restricted(&ks, &[0.3, 1.7], t).unwrap();
        let eig = symmetric_eigenvalues(&a.matrix);
        assert!(eig[0] >= t - 1e-8);
        let rec = a.factor.reconstruct();
        assert!((&rec - &a.matrix).norm() <= 1e-10 * a.matrix.norm());
    }

    proptest! {
        #[test]
        fn restrict_composes(rows in proptest::collection::vec(0usize..10, 1..6),
                             cols in proptest::collection::vec(0usize..10, 1..6),
                             sub_r in proptest::collection::vec(0usize..100, 1..4),
                             sub_c in proptest::collection::vec(0usize..100, 1..4)) {
            let k = DMatrix::from_fn(10, 10, |i, j| (i * 31 + j * 7) as f64 * 0.5);
            let inner_r: Vec<usize> = sub_r.iter().map(|i| i % rows.len()).collect();
            let inner_c: Vec<usize> = sub_c.iter().map(|i| i % cols.len()).collect();
            let twice = restrict(&restrict(&k, &rows, &cols).unwrap(), &inner_r, &inner_c).unwrap();
            let composed_r: Vec<usize> = inner_r.iter().map(|&i| rows[i]).collect();
            let composed_c: Vec<usize> = inner_c.iter().map(|&i| cols[i]).collect();
            prop_assert_eq!(twice, restrict(&k, &composed_r, &composed_c).unwrap());
        }

        #[test]
        fn assemble_is_linear_in_u(u0 in 0.01f64..5.0, u1 in 0.01f64..5.0, seed in 0u64..50) {
            let x0 = gaussian_inputs(6, 8, seed);
            let x1 = gaussian_inputs(6, 8, seed + 1000);
            let ks = alloc::vec![branch_kernel(&x0, 1.0).unwrap(), branch_kernel(&x1, 1.0).unwrap()];
            let t = 0.1;
            let a = assemble_restricted(&ks, &[u0, u1], t).unwrap().matrix;
            let b = assemble_restricted(&ks, &[2.0 * u0, 2.0 * u1], t).unwrap().matrix;
            let id = DMatrix::<f64>::identity(6, 6) * t;
            let diff = (&b - &id) - (&a - &id) * 2.0;
            prop_assert!(diff.amax() < 1e-12 * (1.0 + b.amax()));
        }

        #[test]
        fn branch_kernel_is_psd(seed in 0u64..200, n in 2usize..12, n0 in 1usize..6) {
            let x = gaussian_inputs(n, n0, seed);
            let k = branch_kernel(&x, 1.0).unwrap();
            let eig = symmetric_eigenvalues(&k);
            prop_assert!(eig[0] >= -1e-8 * k.norm());
        }
    }
}

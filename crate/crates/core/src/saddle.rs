//! Effective Hamiltonian `H(u) = S(u) + E(u)` over the branch order
//! parameters and its saddle-point solver.
//!
//! With `C = Σ_l (u_l/L) K_l + T·I` restricted to the `P` training nodes,
//!
//! * `S(u) = Σ_l [ −(N/2) log u_l + (N / 2σ²) u_l ]`
//! * `E(u) = ½ Yᵀ C⁻¹ Y + ½ log det C`
//! * `r_l  = Yᵀ C⁻¹ (u_l K_l / L) C⁻¹ Y`, `Tr_l = Tr[C⁻¹ u_l K_l / L]`
//! * residual `ρ_l = N(1 − u_l/σ²) + r_l − Tr_l = −2 u_l ∂H/∂u_l`.
//!
//! When the labels are replaced by a second-moment matrix `M` (the infinite
//! teacher-width limit of `Y Yᵀ`), the quadratic forms become traces against
//! `M`.

use alloc::vec::Vec;
use alloc::{format, vec};

use nalgebra::{DMatrix, DVector};

use crate::kernels::{assemble_restricted, AssembledKernel};
use crate::linalg::frobenius_dot;
use crate::{Error, Result};

/// What the energetic term sees of the training labels.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelMoment {
    /// Observed labels `Y` (length `P`).
    Labels(DVector<f64>),
    /// A `P × P` second-moment matrix standing in for `Y Yᵀ`.
    SecondMoment(DMatrix<f64>),
}

impl LabelMoment {
    fn dim(&self) -> usize {
        match self {
            LabelMoment::Labels(y) => y.len(),
            LabelMoment::SecondMoment(m) => m.nrows(),
        }
    }

    /// Multiplies the labels by `c` (the second moment by `c²`).
    pub fn scaled(&self, c: f64) -> Self {
        match self {
            LabelMoment::Labels(y) => LabelMoment::Labels(y * c),
            LabelMoment::SecondMoment(m) => LabelMoment::SecondMoment(m * (c * c)),
        }
    }
}

/// Training-restricted kernels plus the hyperparameters entering `H(u)`.
#[derive(Clone, Debug)]
pub struct SaddleProblem {
    /// `P × P` branch kernels `K_l|_P`.
    pub kernels: Vec<DMatrix<f64>>,
    pub labels: LabelMoment,
    /// Hidden width `N`.
    pub width: f64,
    pub temperature: f64,
    /// `σ_w²`.
    pub prior_variance: f64,
    /// Input dimension `N0`, used only for the capacity warning.
    pub input_dim: Option<usize>,
}

impl SaddleProblem {
    pub fn new(
        kernels: Vec<DMatrix<f64>>,
        labels: LabelMoment,
        width: f64,
        temperature: f64,
        prior_variance: f64,
    ) -> Result<Self> {
        let problem = SaddleProblem {
            kernels,
            labels,
            width,
            temperature,
            prior_variance,
            input_dim: None,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_input_dim(mut self, input_dim: usize) -> Self {
        self.input_dim = Some(input_dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::invalid("kernels", "need at least one branch"));
        }
        let p = self.labels.dim();
        if p == 0 {
            return Err(Error::invalid("labels", "need at least one training node"));
        }
        for k in &self.kernels {
            if k.shape() != (p, p) {
                return Err(Error::Dimension {
                    context: "SaddleProblem kernels vs labels",
                    expected: p,
                    actual: k.nrows(),
                });
            }
        }
        if let LabelMoment::SecondMoment(m) = &self.labels {
            if !m.is_square() {
                return Err(Error::invalid("labels", "second moment must be square"));
            }
        }
        if !(self.width >= 1.0 && self.width.is_finite()) {
            return Err(Error::invalid(
                "width",
                format!("must be >= 1, got {}", self.width),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(
                "temperature",
                format!("must be >= 0, got {}", self.temperature),
            ));
        }
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(Error::invalid(
                "prior_variance",
                format!("must be > 0, got {}", self.prior_variance),
            ));
        }
        Ok(())
    }

    pub fn num_branches(&self) -> usize {
        self.kernels.len()
    }

    pub fn num_train(&self) -> usize {
        self.labels.dim()
    }

    /// `α = P / N`.
    pub fn load(&self) -> f64 {
        self.num_train() as f64 / self.width
    }

    /// `α_0 = P / (L N0)` when the input dimension is known.
    pub fn capacity(&self) -> Option<f64> {
        self.input_dim
            .map(|n0| self.num_train() as f64 / (self.num_branches() * n0) as f64)
    }

    /// Same problem with labels scaled by `c`.
    pub fn with_scaled_labels(&self, c: f64) -> Self {
        SaddleProblem {
            labels: self.labels.scaled(c),
            ..self.clone()
        }
    }

    fn check_u(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.num_branches() {
            return Err(Error::Dimension {
                context: "order parameters vs branches",
                expected: self.num_branches(),
                actual: u.len(),
            });
        }
        if let Some(bad) = u.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(
                "u",
                format!("order parameters must be positive, got {bad}"),
            ));
        }
        Ok(())
    }
}

/// `S(u)`.
pub fn entropy(u: &[f64], problem: &SaddleProblem) -> Result<f64> {
    problem.check_u(u)?;
    let half_n = problem.width / 2.0;
    Ok(u.iter()
        .map(|ul| -half_n * libm::log(*ul) + half_n * ul / problem.prior_variance)
        .sum())
}

/// `E(u)`.
pub fn energy(u: &[f64], problem: &SaddleProblem) -> Result<f64> {
    problem.check_u(u)?;
    let c = assemble_restricted(&problem.kernels, u, problem.temperature)?;
    Ok(energy_from(&c, &problem.labels))
}

fn energy_from(c: &AssembledKernel, labels: &LabelMoment) -> f64 {
    let quad = match labels {
        LabelMoment::Labels(y) => y.dot(&c.factor.solve_vec(y)),
        LabelMoment::SecondMoment(m) => c.factor.solve_mat(m).trace(),
    };
    0.5 * quad + 0.5 * c.log_det()
}

/// `H(u) = S(u) + E(u)`.
pub fn hamiltonian(u: &[f64], problem: &SaddleProblem) -> Result<f64> {
    Ok(entropy(u, problem)? + energy(u, problem)?)
}

/// Everything computed from one factorization of `C(u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub u: Vec<f64>,
    pub entropy: f64,
    pub energy: f64,
    pub r: Vec<f64>,
    pub tr: Vec<f64>,
    /// `ρ_l = N(1 − u_l/σ²) + r_l − Tr_l`.
    pub residual: Vec<f64>,
}

impl Evaluation {
    pub fn hamiltonian(&self) -> f64 {
        self.entropy + self.energy
    }

    /// `∂H/∂u_l = −ρ_l / (2 u_l)`.
    pub fn gradient(&self) -> Vec<f64> {
        self.residual
            .iter()
            .zip(&self.u)
            .map(|(rho, u)| -rho / (2.0 * u))
            .collect()
    }

    /// `max_l |ρ_l| / N`, the solver's convergence measure.
    pub fn scaled_residual(&self, width: f64) -> f64 {
        self.residual.iter().fold(0.0_f64, |m, r| m.max(r.abs())) / width
    }
}

/// Evaluates `S`, `E`, `r`, `Tr` and `ρ` at `u`.
pub fn evaluate(u: &[f64], problem: &SaddleProblem) -> Result<Evaluation> {
    problem.check_u(u)?;
    let c = assemble_restricted(&problem.kernels, u, problem.temperature)?;
    let c_inv = c.factor.inverse();
    let l = problem.num_branches() as f64;
    let n = problem.width;
    let s2 = problem.prior_variance;

    let (energy, r): (f64, Vec<f64>) = match &problem.labels {
        LabelMoment::Labels(y) => {
            let alpha = c.factor.solve_vec(y);
            let energy = 0.5 * y.dot(&alpha) + 0.5 * c.log_det();
            let r = problem
                .kernels
                .iter()
                .zip(u)
                .map(|(k, ul)| ul / l * alpha.dot(&(k * &alpha)))
                .collect();
            (energy, r)
        }
        LabelMoment::SecondMoment(m) => {
            let cm = &c_inv * m;
            let energy = 0.5 * cm.trace() + 0.5 * c.log_det();
            let sandwich = &cm * &c_inv;
            let r = problem
                .kernels
                .iter()
                .zip(u)
                .map(|(k, ul)| ul / l * frobenius_dot(k, &sandwich))
                .collect();
            (energy, r)
        }
    };
    let tr: Vec<f64> = problem
        .kernels
        .iter()
        .zip(u)
        .map(|(k, ul)| ul / l * frobenius_dot(&c_inv, k))
        .collect();
    let residual = u
        .iter()
        .zip(r.iter().zip(&tr))
        .map(|(ul, (rl, tl))| n * (1.0 - ul / s2) + rl - tl)
        .collect();
    Ok(Evaluation {
        u: u.to_vec(),
        entropy: entropy(u, problem)?,
        energy,
        r,
        tr,
        residual,
    })
}

/// Saddle residual `ρ` together with `r` and `Tr`.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub rho: Vec<f64>,
    pub r: Vec<f64>,
    pub tr: Vec<f64>,
}

pub fn residual(u: &[f64], problem: &SaddleProblem) -> Result<Residual> {
    let e = evaluate(u, problem)?;
    Ok(Residual {
        rho: e.residual,
        r: e.r,
        tr: e.tr,
    })
}

/// How a solver step moves `u` towards the fixed point of
/// `N(1 − u_l/σ²) = Tr_l − r_l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    /// `u ← (1−η) u + η σ² (1 + (r − Tr)/N)`, clamped below at `u_min`.
    Additive,
    /// `u ← u · [(N + r) / (N u/σ² + Tr)]^η`. Same fixed points, stays
    /// positive, and contracts at large `P/N` where the additive map needs
    /// `η ≲ u / (σ² P/N)`.
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    /// Starting point; defaults to the GP value `σ²` for every branch.
    pub init: Option<Vec<f64>>,
    pub damping: f64,
    /// Convergence threshold on `max_l |ρ_l| / N`.
    pub tol: f64,
    pub max_iter: usize,
    /// Lower clamp as a multiple of `σ²`.
    pub min_u_factor: f64,
    pub rule: UpdateRule,
    /// Iterations without a new best residual before the damping is halved.
    pub stall_window: usize,
    /// Smallest damping as a fraction of the initial one.
    pub min_damping_fraction: f64,
    pub record_trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            init: None,
            damping: 0.5,
            tol: 1e-8,
            max_iter: 10_000,
            min_u_factor: 1e-10,
            rule: UpdateRule::Multiplicative,
            stall_window: 50,
            min_damping_fraction: 1.0 / 64.0,
            record_trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub u: Vec<f64>,
    pub residual: f64,
    pub hamiltonian: f64,
}

/// Solved order parameters with solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderParams {
    pub u: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `max_l |ρ_l| / N` at `u`.
    pub final_residual: f64,
    pub r: Vec<f64>,
    pub tr: Vec<f64>,
    pub h_initial: f64,
    pub h_final: f64,
    pub trace: Vec<TracePoint>,
}

impl OrderParams {
    fn from_eval(
        e: Evaluation,
        width: f64,
        converged: bool,
        iterations: usize,
        h_initial: f64,
    ) -> Self {
        OrderParams {
            final_residual: e.scaled_residual(width),
            h_final: e.hamiltonian(),
            u: e.u,
            converged,
            iterations,
            r: e.r,
            tr: e.tr,
            h_initial,
            trace: Vec::new(),
        }
    }
}

fn propose(
    e: &Evaluation,
    problem: &SaddleProblem,
    eta: f64,
    rule: UpdateRule,
    u_min: f64,
) -> Vec<f64> {
    let n = problem.width;
    let s2 = problem.prior_variance;
    e.u.iter()
        .zip(e.r.iter().zip(&e.tr))
        .map(|(&u, (&r, &tr))| {
            let next = match rule {
                UpdateRule::Additive => (1.0 - eta) * u + eta * s2 * (1.0 + (r - tr) / n),
                UpdateRule::Multiplicative => {
                    let ratio = (n + r) / (n * u / s2 + tr);
                    u * libm::pow(ratio, eta)
                }
            };
            if next.is_finite() {
                next.max(u_min)
            } else {
                u_min
            }
        })
        .collect()
}

/// Damped fixed-point iteration for the saddle-point equations.
///
/// Steps that raise `H` are shortened (halving the step up to 20 times), so
/// the returned point never has a higher `H` than the start beyond rounding.
/// If the best residual has not improved for `stall_window` iterations the
/// damping is halved, down to `min_damping_fraction` of its initial value.
/// Non-convergence is reported through `converged = false`, not as an error.
pub fn solve(problem: &SaddleProblem, opts: &SolveOptions) -> Result<OrderParams> {
    problem.validate()?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::invalid(
            "damping",
            format!("must lie in (0, 1], got {}", opts.damping),
        ));
    }
    if let Some(a0) = problem.capacity() {
        if a0 >= 1.0 {
            log::warn!("capacity P/(L N0) = {a0:.3} >= 1; the saddle-point theory assumes < 1");
        }
    }
    let s2 = problem.prior_variance;
    let n = problem.width;
    let u_min = opts.min_u_factor * s2;
    let init = opts
        .init
        .clone()
        .unwrap_or_else(|| vec![s2; problem.num_branches()]);
    let mut current = evaluate(&init, problem)?;
    let h_initial = current.hamiltonian();
    let mut trace = Vec::new();
    let mut record = |it: usize, e: &Evaluation| {
        if opts.record_trace {
            trace.push(TracePoint {
                iteration: it,
                u: e.u.clone(),
                residual: e.scaled_residual(n),
                hamiltonian: e.hamiltonian(),
            });
        }
    };
    record(0, &current);

    let min_eta = opts.damping * opts.min_damping_fraction;
    let mut eta = opts.damping;
    let mut best_res = current.scaled_residual(n);
    let mut since_best = 0usize;
    let mut iterations = 0usize;
    let mut converged = best_res <= opts.tol;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let h = current.hamiltonian();
        let h_slack = 1e-12 * h.abs().max(1.0);
        let mut step = eta;
        let mut accepted = None;
        for _ in 0..20 {
            let candidate = propose(&current, problem, step, opts.rule, u_min);
            match evaluate(&candidate, problem) {
                Ok(e) if e.hamiltonian() <= h + h_slack => {
                    accepted = Some(e);
                    break;
                }
                Ok(_) | Err(Error::NotPositiveDefinite { .. }) => step *= 0.5,
                Err(other) => return Err(other),
            }
        }
        let Some(next) = accepted else {
            log::debug!("saddle solver: no descent step at iteration {iterations}");
            break;
        };
        current = next;
        record(iterations, &current);
        let res = current.scaled_residual(n);
        converged = res <= opts.tol;
        if res < best_res {
            best_res = res;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.stall_window && eta > min_eta {
                eta = (eta * 0.5).max(min_eta);
                since_best = 0;
                log::debug!("saddle solver: damping reduced to {eta}");
            }
        }
    }
    if !converged {
        log::warn!(
            "saddle solver stopped after {iterations} iterations with residual {:e}",
            current.scaled_residual(n)
        );
    }
    let mut out = OrderParams::from_eval(current, n, converged, iterations, h_initial);
    out.trace = trace;
    Ok(out)
}

/// The infinite-width solution `u_l = σ²`, with `r`, `Tr` evaluated there.
pub fn gp_limit(problem: &SaddleProblem) -> Result<OrderParams> {
    problem.validate()?;
    let u = vec![problem.prior_variance; problem.num_branches()];
    let e = evaluate(&u, problem)?;
    let h = e.hamiltonian();
    Ok(OrderParams::from_eval(e, problem.width, true, 0, h))
}

/// Narrow-width student-teacher prediction `u_l = σ_t² β_l² / σ_w²`.
pub fn equipartition_prediction(
    teacher_variance: f64,
    betas_sq: &[f64],
    prior_variance: f64,
) -> Vec<f64> {
    betas_sq
        .iter()
        .map(|b| teacher_variance * b / prior_variance)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gaussian_inputs;
    use crate::kernels::branch_kernel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn identity_problem(p: usize, width: f64, t: f64) -> SaddleProblem {
        SaddleProblem::new(
            vec![DMatrix::identity(p, p)],
            LabelMoment::Labels(DVector::zeros(p)),
            width,
            t,
            1.0,
        )
        .unwrap()
    }

    fn random_problem(seed: u64, p: usize, branches: usize, width: f64) -> SaddleProblem {
        let kernels = (0..branches)
            .map(|l| {
                branch_kernel(&gaussian_inputs(p, 3 + 2 * l, seed * 17 + l as u64), 1.0).unwrap()
            })
            .collect();
        let y = gaussian_inputs(p, 1, seed + 5000).column(0).into_owned();
        SaddleProblem::new(kernels, LabelMoment::Labels(y), width, 0.05, 0.8).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let p = identity_problem(3, 4.0, 0.0);
        assert_relative_eq!(entropy(&[1.0], &p).unwrap(), 2.0);
        let two = SaddleProblem::new(
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            LabelMoment::Labels(DVector::zeros(2)),
            4.0,
            0.0,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(entropy(&[1.0, 1.0], &two).unwrap(), 4.0);
        let mut scaled = two.clone();
        scaled.prior_variance = 0.3;
        let expected = 2.0 * 4.0 / 2.0 * (1.0 - libm::log(0.3));
        assert_relative_eq!(
            entropy(&[0.3, 0.3], &scaled).unwrap(),
            expected,
            epsilon = 1e-12
        );
        assert!(entropy(&[0.0, 1.0], &two).is_err());
    }

    #[test]
    fn entropy_gradient_matches_finite_difference() {
        let p = random_problem(1, 6, 2, 7.0);
        let u = [0.4, 1.3];
        for l in 0..2 {
            let h = 1e-6;
            let mut up = u;
            let mut dn = u;
            up[l] += h;
            dn[l] -= h;
            let fd = (entropy(&up, &p).unwrap() - entropy(&dn, &p).unwrap()) / (2.0 * h);
            let exact = -p.width / (2.0 * u[l]) + p.width / (2.0 * p.prior_variance);
            assert_relative_eq!(fd, exact, max_relative = 1e-6);
        }
    }

    #[test]
    fn energy_examples() {
        let p = identity_problem(5, 10.0, 0.0);
        assert_relative_eq!(energy(&[1.0], &p).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(
            energy(&[core::f64::consts::E], &p).unwrap(),
            2.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn energy_gradient_matches_finite_difference() {
        let p = random_problem(3, 20, 2, 15.0);
        let u = [0.7, 1.9];
        let e = evaluate(&u, &p).unwrap();
        for l in 0..2 {
            let h = 1e-6 * u[l];
            let mut up = u;
            let mut dn = u;
            up[l] += h;
            dn[l] -= h;
            let fd = (energy(&up, &p).unwrap() - energy(&dn, &p).unwrap()) / (2.0 * h);
            let exact = (-e.r[l] + e.tr[l]) / (2.0 * u[l]);
            assert_relative_eq!(fd, exact, max_relative = 1e-5);
        }
    }

    #[test]
    fn residual_closed_form_identity_kernel() {
        let p = identity_problem(30, 100.0, 0.0);
        for u in [0.3, 0.7, 1.0, 2.0] {
            let rho = residual(&[u], &p).unwrap().rho[0];
            assert_relative_eq!(rho, 100.0 * (1.0 - u) - 30.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn solve_identity_closed_form() {
        let p = identity_problem(30, 100.0, 1e-8);
        for rule in [UpdateRule::Additive, UpdateRule::Multiplicative] {
            let sol = solve(
                &p,
                &SolveOptions {
                    rule,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(sol.converged);
            assert_relative_eq!(sol.u[0], 0.7, epsilon = 1e-6);
            assert!(sol.h_final <= sol.h_initial + 1e-9);
        }
    }

    #[test]
    fn gp_limit_is_prior_variance() {
        let mut p = random_problem(2, 8, 3, 50.0);
        p.prior_variance = 0.25;
        let gp = gp_limit(&p).unwrap();
        assert_eq!(gp.u, vec![0.25; 3]);
        assert!(gp.converged);
    }

    #[test]
    fn small_load_solution_near_gp() {
        let p = random_problem(4, 10, 2, 1e4);
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        let gp = gp_limit(&p).unwrap();
        assert!(sol.converged);
        for (a, b) in sol.u.iter().zip(&gp.u) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn equipartition_examples() {
        assert_eq!(
            equipartition_prediction(1.0, &[0.4, 2.0], 1.0),
            vec![0.4, 2.0]
        );
        let s2 = 0.64;
        let st2 = 1.3;
        let u = equipartition_prediction(st2, &[s2 * s2 / st2], s2);
        assert_relative_eq!(u[0], s2, epsilon = 1e-15);
        let a = equipartition_prediction(1.0, &[0.4, 2.0], 0.5);
        let b = equipartition_prediction(1.0, &[0.4, 2.0], 1.0);
        assert_relative_eq!(a[0], 2.0 * b[0]);
        assert_relative_eq!(a[1], 2.0 * b[1]);
    }

    #[test]
    fn second_moment_of_labels_matches_labels() {
        let p = random_problem(7, 12, 2, 9.0);
        let LabelMoment::Labels(y) = p.labels.clone() else {
            unreachable!()
        };
        let mut q = p.clone();
        q.labels = LabelMoment::SecondMoment(&y * y.transpose());
        let u = [0.5, 1.5];
        let a = evaluate(&u, &p).unwrap();
        let b = evaluate(&u, &q).unwrap();
        assert_relative_eq!(a.energy, b.energy, max_relative = 1e-10);
        for l in 0..2 {
            assert_relative_eq!(a.r[l], b.r[l], max_relative = 1e-9);
        }
    }

    #[test]
    fn label_scaling_scales_r_quadratically() {
        let p = random_problem(8, 10, 2, 9.0);
        let u = [0.9, 0.2];
        let a = evaluate(&u, &p).unwrap();
        let b = evaluate(&u, &p.with_scaled_labels(3.0)).unwrap();
        for l in 0..2 {
            assert_relative_eq!(b.r[l], 9.0 * a.r[l], max_relative = 1e-12);
            assert_relative_eq!(b.tr[l], a.tr[l], max_relative = 1e-12);
        }
    }

    #[test]
    fn converged_solution_satisfies_norm_identity() {
        let p = random_problem(9, 25, 2, 5.0);
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.converged, "{sol:?}");
        let re = residual(&sol.u, &p).unwrap();
        let s2 = p.prior_variance;
        for l in 0..2 {
            assert!(re.rho[l].abs() / p.width <= p.width * 0.0 + SolveOptions::default().tol);
            let lhs = s2 * re.r[l] + s2 * (p.width - re.tr[l]);
            assert!((lhs - p.width * sol.u[l]).abs() <= 10.0 * 1e-8 * p.width * s2.max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradient_matches_residual(seed in 0u64..1000, p in 3usize..30, branches in 1usize..4,
                                     width in 1.0f64..200.0) {
            let prob = random_problem(seed, p, branches, width);
            let u: Vec<f64> = (0..branches).map(|l| 0.3 + 0.4 * l as f64 + (seed % 7) as f64 * 0.1).collect();
            let e = evaluate(&u, &prob).unwrap();
            for l in 0..branches {
                let h = 1e-5 * u[l];
                let mut up = u.clone();
                let mut dn = u.clone();
                up[l] += h;
                dn[l] -= h;
                let fd = (hamiltonian(&up, &prob).unwrap() - hamiltonian(&dn, &prob).unwrap()) / (2.0 * h);
                let lhs = 2.0 * u[l] * fd + e.residual[l];
                let scale = e.residual[l].abs().max(2.0 * u[l] * fd.abs()).max(1.0);
                prop_assert!(lhs.abs() <= 1e-5 * scale, "l={} lhs={} rho={}", l, lhs, e.residual[l]);
            }
        }
    }
}

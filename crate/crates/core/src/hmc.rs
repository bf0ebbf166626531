//! Hamiltonian Monte Carlo over the network parameters.
//!
//! The target is the weight posterior
//! `U(Θ) = (1/2T) Σ_μ (f^μ − y^μ)² + (1/2σ²) ΘᵀΘ` with identity mass matrix,
//! leapfrog integration and a Metropolis correction.

use alloc::vec::Vec;
use alloc::{format, vec};

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::network::{forward, sample_gaussian_params, Activation, NetworkParams};
use crate::rng::{self, stream, Rng};
use crate::{Error, Result};

/// Proposals whose energy error exceeds this are counted as divergent and
/// rejected.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// A differentiable potential energy `U(θ)`.
pub trait Potential {
    fn dim(&self) -> usize;
    /// Returns `U(θ)` and writes `∂U/∂θ` into `grad`.
    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// Precomputed `XᵀX` blocks for all-linear architectures, where the loss
/// depends on `W_l` and `a_l` only through `v_l = W_l a_l`.
#[derive(Clone, Debug)]
struct GramCache {
    /// `(L N0) × (L N0)` with blocks `X_lᵀ X_l'`.
    gram: DMatrix<f64>,
    /// Stacked `X_lᵀ y`.
    proj: DVector<f64>,
    y_sq: f64,
}

/// Weight posterior of a branching network on its training data.
#[derive(Clone, Debug)]
pub struct PosteriorTarget {
    /// Branch inputs restricted to the training rows (`P × N0` each).
    inputs: Vec<DMatrix<f64>>,
    labels: DVector<f64>,
    activations: Vec<Activation>,
    width: usize,
    temperature: f64,
    prior_variance: f64,
    /// Branch inputs at the evaluation rows, if predictions are recorded.
    test_inputs: Option<Vec<DMatrix<f64>>>,
    gram: Option<GramCache>,
}

impl PosteriorTarget {
    pub fn new(
        inputs: Vec<DMatrix<f64>>,
        labels: DVector<f64>,
        activations: Vec<Activation>,
        width: usize,
        temperature: f64,
        prior_variance: f64,
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != activations.len() {
            return Err(Error::Dimension {
                context: "PosteriorTarget inputs per branch",
                expected: activations.len(),
                actual: inputs.len(),
            });
        }
        let (p, n0) = inputs[0].shape();
        if n0 == 0 {
            return Err(Error::invalid("inputs", "need at least one input column"));
        }
        if inputs.iter().any(|x| x.shape() != (p, n0)) || labels.len() != p {
            return Err(Error::Dimension {
                context: "PosteriorTarget input/label rows",
                expected: p,
                actual: labels.len(),
            });
        }
        if width == 0 {
            return Err(Error::invalid("width", "must be >= 1"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(
                "temperature",
                format!("must be > 0, got {temperature}"),
            ));
        }
        if !(prior_variance > 0.0 && prior_variance.is_finite()) {
            return Err(Error::invalid("prior_variance", "must be > 0"));
        }
        let gram = activations
            .iter()
            .all(|a| *a == Activation::Identity)
            .then(|| build_gram(&inputs, &labels));
        Ok(PosteriorTarget {
            inputs,
            labels,
            activations,
            width,
            temperature,
            prior_variance,
            test_inputs: None,
            gram,
        })
    }

    /// Records network outputs at these rows for every stored sample.
    pub fn with_test_inputs(mut self, test_inputs: Vec<DMatrix<f64>>) -> Result<Self> {
        let n0 = self.input_dim();
        if test_inputs.len() != self.inputs.len() || test_inputs.iter().any(|x| x.ncols() != n0) {
            return Err(Error::Dimension {
                context: "PosteriorTarget test inputs",
                expected: n0,
                actual: test_inputs.first().map_or(0, |x| x.ncols()),
            });
        }
        self.test_inputs = Some(test_inputs);
        Ok(self)
    }

    /// Forces the generic forward/backward path even for linear branches.
    pub fn without_gram_cache(mut self) -> Self {
        self.gram = None;
        self
    }

    pub fn num_train(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].ncols()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_branches(&self) -> usize {
        self.activations.len()
    }

    fn per_branch(&self) -> usize {
        self.input_dim() * self.width + self.width
    }

    pub fn unpack(&self, theta: &[f64]) -> Result<NetworkParams> {
        NetworkParams::from_flat(
            theta,
            self.activations.clone(),
            self.input_dim(),
            self.width,
        )
    }

    /// `(W_l, a_l)` views into a flat parameter vector.
    fn views<'t>(
        &self,
        theta: &'t [f64],
        l: usize,
    ) -> (DMatrixView<'t, f64>, DVectorView<'t, f64>) {
        let n0 = self.input_dim();
        let n = self.width;
        let start = l * self.per_branch();
        let w = DMatrixView::from_slice(&theta[start..start + n0 * n], n0, n);
        let a = DVectorView::from_slice(&theta[start + n0 * n..start + n0 * n + n], n);
        (w, a)
    }

    /// `(1/√(LN)) / √N0`, the factor between `X_l v_l` and `f`.
    fn output_scale(&self) -> f64 {
        1.0 / libm::sqrt((self.num_branches() * self.width * self.input_dim()) as f64)
    }

    /// Training-set squared error `Σ_μ (f^μ − y^μ)²`.
    pub fn squared_error(&self, theta: &[f64]) -> f64 {
        let mut scratch = vec![0.0; theta.len()];
        let u = self.value_and_gradient(theta, &mut scratch);
        let prior = theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * self.prior_variance);
        (u - prior) * 2.0 * self.temperature
    }

    fn potential_generic(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let c = 1.0 / libm::sqrt((self.num_branches() * self.width) as f64);
        let inv_sqrt_n0 = 1.0 / libm::sqrt(self.input_dim() as f64);
        let mut f = DVector::zeros(self.num_train());
        let mut hidden = Vec::with_capacity(self.num_branches());
        for (l, x) in self.inputs.iter().enumerate() {
            let (w, a) = self.views(theta, l);
            let h = x * w * inv_sqrt_n0;
            let act = self.activations[l];
            let z = h.map(|v| act.apply(v));
            f += &z * a * c;
            hidden.push((h, z));
        }
        let e = f - &self.labels;
        let g = &e / self.temperature;
        let mut u = e.norm_squared() / (2.0 * self.temperature);
        let n0 = self.input_dim();
        let n = self.width;
        for (l, (x, (h, z))) in self.inputs.iter().zip(hidden).enumerate() {
            let (_, a) = self.views(theta, l);
            let act = self.activations[l];
            let start = l * self.per_branch();
            // ∂U/∂a_l
            let ga = z.tr_mul(&g) * c;
            // ∂U/∂W_l = X_lᵀ [(c g a_lᵀ) ⊙ φ'(h)] / √N0
            let mut back = &g * a.transpose() * c;
            if act != Activation::Identity {
                back.zip_apply(&h, |b, hv| *b *= act.derivative(hv));
            }
            let gw = x.tr_mul(&back) * inv_sqrt_n0;
            let gslice = &mut grad[start..start + n0 * n + n];
            for (k, gv) in gw.iter().enumerate() {
                gslice[k] = gv + theta[start + k] / self.prior_variance;
            }
            for k in 0..n {
                gslice[n0 * n + k] = ga[k] + a[k] / self.prior_variance;
            }
        }
        u += theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * self.prior_variance);
        u
    }

    fn potential_gram(&self, cache: &GramCache, theta: &[f64], grad: &mut [f64]) -> f64 {
        let n0 = self.input_dim();
        let n = self.width;
        let lb = self.num_branches();
        let s = self.output_scale();
        let mut v = DVector::zeros(lb * n0);
        for l in 0..lb {
            let (w, a) = self.views(theta, l);
            v.rows_mut(l * n0, n0).copy_from(&(w * a));
        }
        // q = s G v − b, ‖e‖² = s vᵀ q − s vᵀ b + yᵀy
        let q = &cache.gram * &v * s - &cache.proj;
        let sq_err = (s * v.dot(&q) - s * v.dot(&cache.proj) + cache.y_sq).max(0.0);
        let gv = q * (s / self.temperature);
        for l in 0..lb {
            let (w, a) = self.views(theta, l);
            let g_l = gv.rows(l * n0, n0);
            let start = l * self.per_branch();
            let gslice = &mut grad[start..start + n0 * n + n];
            for j in 0..n {
                for i in 0..n0 {
                    gslice[j * n0 + i] = g_l[i] * a[j] + w[(i, j)] / self.prior_variance;
                }
            }
            let ga = w.tr_mul(&g_l);
            for k in 0..n {
                gslice[n0 * n + k] = ga[k] + a[k] / self.prior_variance;
            }
        }
        sq_err / (2.0 * self.temperature)
            + theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * self.prior_variance)
    }

    /// Network outputs at the test rows, if configured.
    fn test_outputs(&self, theta: &[f64]) -> Result<Option<DVector<f64>>> {
        let Some(test) = &self.test_inputs else {
            return Ok(None);
        };
        let params = self.unpack(theta)?;
        let refs: Vec<&DMatrix<f64>> = test.iter().collect();
        Ok(Some(forward(&params, &refs)?.total))
    }
}

fn build_gram(inputs: &[DMatrix<f64>], labels: &DVector<f64>) -> GramCache {
    let n0 = inputs[0].ncols();
    let lb = inputs.len();
    let mut gram = DMatrix::zeros(lb * n0, lb * n0);
    let mut proj = DVector::zeros(lb * n0);
    for (i, xi) in inputs.iter().enumerate() {
        proj.rows_mut(i * n0, n0).copy_from(&xi.tr_mul(labels));
        for (j, xj) in inputs.iter().enumerate().skip(i) {
            let block = xi.tr_mul(xj);
            gram.view_mut((i * n0, j * n0), (n0, n0)).copy_from(&block);
            if i != j {
                gram.view_mut((j * n0, i * n0), (n0, n0))
                    .copy_from(&block.transpose());
            }
        }
    }
    GramCache {
        gram,
        proj,
        y_sq: labels.norm_squared(),
    }
}

impl Potential for PosteriorTarget {
    fn dim(&self) -> usize {
        self.num_branches() * self.per_branch()
    }

    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        match &self.gram {
            Some(cache) => self.potential_gram(cache, theta, grad),
            None => self.potential_generic(theta, grad),
        }
    }
}

/// `U(Θ)` and `∂U/∂Θ` for a flat parameter vector.
pub fn potential(theta: &[f64], target: &PosteriorTarget) -> Result<(f64, Vec<f64>)> {
    if theta.len() != target.dim() {
        return Err(Error::Dimension {
            context: "potential (parameter length)",
            expected: target.dim(),
            actual: theta.len(),
        });
    }
    let mut grad = vec![0.0; theta.len()];
    let u = target.value_and_gradient(theta, &mut grad);
    Ok((u, grad))
}

/// How the leapfrog step size is tuned during warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepAdaptation {
    /// Keep the initial step size.
    Fixed,
    /// Halve once at the end of warmup if the acceptance rate was below 0.4.
    HalveOnce,
    /// Every `window` warmup iterations, grow the step by 1.25 if the window
    /// acceptance exceeded `target + 0.1`, shrink by 0.7 if it fell below
    /// `target − 0.1`.
    Windowed { target: f64, window: usize },
}

/// Starting point of each chain.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Independent draw from the Gaussian prior.
    Prior,
    /// Prior draw for the hidden weights and readout directions, with each
    /// branch's linear map shifted by the minimum-norm correction that fits
    /// the training labels. Only valid for all-linear architectures.
    DataConsistent,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmcConfig {
    /// Defaults to `0.01 √T` when `None`.
    pub step_size: Option<f64>,
    pub leapfrog_steps: usize,
    pub num_chains: usize,
    pub warmup: usize,
    /// Post-warmup iterations per chain; monitored scalars are recorded at
    /// every one of them.
    pub kept: usize,
    /// Parameter samples (and test predictions) are stored every `thin`
    /// kept iterations.
    pub thin: usize,
    pub seed: u64,
    pub adaptation: StepAdaptation,
    /// Uniform relative jitter applied to the step size per trajectory.
    pub step_jitter: f64,
    pub init: Init,
    /// Keep raw parameter vectors (memory heavy for wide networks).
    pub store_samples: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: None,
            leapfrog_steps: 128,
            num_chains: 4,
            warmup: 1000,
            kept: 2000,
            thin: 4,
            seed: 0,
            adaptation: StepAdaptation::Windowed {
                target: 0.75,
                window: 25,
            },
            step_jitter: 0.1,
            init: Init::Prior,
            store_samples: false,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eps) = self.step_size {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::invalid("step_size", "must be > 0"));
            }
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::invalid("leapfrog_steps", "must be >= 1"));
        }
        if self.num_chains == 0 {
            return Err(Error::invalid("num_chains", "must be >= 1"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::invalid("step_jitter", "must lie in [0, 1)"));
        }
        if let StepAdaptation::Windowed { target, window } = self.adaptation {
            if !(target > 0.0 && target < 1.0) || window == 0 {
                return Err(Error::invalid(
                    "adaptation",
                    "target in (0,1) and window >= 1 required",
                ));
            }
        }
        Ok(())
    }
}

/// Result of one leapfrog trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub accepted: bool,
    pub divergent: bool,
    /// `H(end) − H(start)`.
    pub energy_error: f64,
}

/// Reusable leapfrog state for one chain.
pub struct Sampler<'p, P: Potential> {
    potential: &'p P,
    theta: Vec<f64>,
    grad: Vec<f64>,
    value: f64,
    prop_theta: Vec<f64>,
    prop_grad: Vec<f64>,
    momentum: Vec<f64>,
}

impl<'p, P: Potential> Sampler<'p, P> {
    pub fn new(potential: &'p P, init: Vec<f64>) -> Result<Self> {
        let d = potential.dim();
        if init.len() != d {
            return Err(Error::Dimension {
                context: "Sampler initial point",
                expected: d,
                actual: init.len(),
            });
        }
        let mut grad = vec![0.0; d];
        let value = potential.value_and_gradient(&init, &mut grad);
        if !value.is_finite() {
            return Err(Error::invalid(
                "init",
                "potential is not finite at the initial point",
            ));
        }
        Ok(Sampler {
            potential,
            theta: init,
            grad,
            value,
            prop_theta: vec![0.0; d],
            prop_grad: vec![0.0; d],
            momentum: vec![0.0; d],
        })
    }

    pub fn position(&self) -> &[f64] {
        &self.theta
    }

    pub fn potential_value(&self) -> f64 {
        self.value
    }

    /// One HMC transition: fresh momentum, `steps` leapfrog steps of size
    /// `eps`, Metropolis accept/reject.
    pub fn step(&mut self, rng: &mut Rng, eps: f64, steps: usize) -> Transition {
        for p in self.momentum.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        let kinetic0 = 0.5 * self.momentum.iter().map(|p| p * p).sum::<f64>();
        let h0 = self.value + kinetic0;
        self.prop_theta.copy_from_slice(&self.theta);
        self.prop_grad.copy_from_slice(&self.grad);
        let mut value = self.value;
        let mut divergent = false;
        for (p, g) in self.momentum.iter_mut().zip(&self.prop_grad) {
            *p -= 0.5 * eps * g;
        }
        for s in 0..steps {
            for (t, p) in self.prop_theta.iter_mut().zip(&self.momentum) {
                *t += eps * p;
            }
            value = self
                .potential
                .value_and_gradient(&self.prop_theta, &mut self.prop_grad);
            if !value.is_finite() || value - h0 > DIVERGENCE_THRESHOLD {
                divergent = true;
                break;
            }
            let scale = if s + 1 == steps { 0.5 } else { 1.0 };
            for (p, g) in self.momentum.iter_mut().zip(&self.prop_grad) {
                *p -= scale * eps * g;
            }
        }
        let energy_error = if divergent {
            f64::INFINITY
        } else {
            value + 0.5 * self.momentum.iter().map(|p| p * p).sum::<f64>() - h0
        };
        if !energy_error.is_finite() || energy_error.abs() > DIVERGENCE_THRESHOLD {
            return Transition {
                accepted: false,
                divergent: true,
                energy_error,
            };
        }
        let accept = energy_error <= 0.0 || rng.random::<f64>() < libm::exp(-energy_error);
        if accept {
            core::mem::swap(&mut self.theta, &mut self.prop_theta);
            core::mem::swap(&mut self.grad, &mut self.prop_grad);
            self.value = value;
        }
        Transition {
            accepted: accept,
            divergent: false,
            energy_error,
        }
    }
}

/// Warmup/sampling bookkeeping shared by every target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub accepted: usize,
    pub divergences: usize,
    pub warmup_acceptance: f64,
    pub step_size: f64,
    pub energy_errors: Vec<f64>,
}

impl RunStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.energy_errors.is_empty() {
            0.0
        } else {
            self.accepted as f64 / self.energy_errors.len() as f64
        }
    }

    pub fn median_abs_energy_error(&self) -> f64 {
        let mut v: Vec<f64> = self.energy_errors.iter().map(|e| e.abs()).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }
}

/// Runs warmup then `kept` iterations, calling `observe(iteration, θ, U)`
/// after every kept iteration.
pub fn run_chain<P: Potential>(
    potential: &P,
    init: Vec<f64>,
    cfg: &HmcConfig,
    initial_step: f64,
    rng: &mut Rng,
    mut observe: impl FnMut(usize, &[f64], f64) -> Result<()>,
) -> Result<RunStats> {
    cfg.validate()?;
    let mut sampler = Sampler::new(potential, init)?;
    let mut eps = initial_step;
    let jittered = |rng: &mut Rng, eps: f64| {
        if cfg.step_jitter > 0.0 {
            eps * (1.0 + cfg.step_jitter * (2.0 * rng.random::<f64>() - 1.0))
        } else {
            eps
        }
    };

    let mut warm_accepted = 0usize;
    let mut window_accepted = 0usize;
    for it in 0..cfg.warmup {
        let e = jittered(rng, eps);
        let t = sampler.step(rng, e, cfg.leapfrog_steps);
        if t.accepted {
            warm_accepted += 1;
            window_accepted += 1;
        }
        if let StepAdaptation::Windowed { target, window } = cfg.adaptation {
            if (it + 1) % window == 0 {
                let rate = window_accepted as f64 / window as f64;
                if rate > target + 0.1 {
                    eps *= 1.25;
                } else if rate < target - 0.1 {
                    eps *= 0.7;
                }
                window_accepted = 0;
            }
        }
    }
    let warmup_acceptance = if cfg.warmup > 0 {
        warm_accepted as f64 / cfg.warmup as f64
    } else {
        f64::NAN
    };
    if cfg.adaptation == StepAdaptation::HalveOnce && warmup_acceptance < 0.4 {
        eps *= 0.5;
    }

    let mut stats = RunStats {
        warmup_acceptance,
        step_size: eps,
        energy_errors: Vec::with_capacity(cfg.kept),
        ..Default::default()
    };
    for it in 0..cfg.kept {
        let e = jittered(rng, eps);
        let t = sampler.step(rng, e, cfg.leapfrog_steps);
        if t.accepted {
            stats.accepted += 1;
        }
        if t.divergent {
            stats.divergences += 1;
        }
        stats.energy_errors.push(t.energy_error);
        observe(it, sampler.position(), sampler.potential_value())?;
    }
    Ok(stats)
}

/// One chain over a [`PosteriorTarget`].
#[derive(Clone, Debug, PartialEq)]
pub struct HmcChain {
    /// `norms[l][t]` is `‖a_l‖²/N` at kept iteration `t`.
    pub norms: Vec<Vec<f64>>,
    /// Training mean squared error at every kept iteration.
    pub train_loss: Vec<f64>,
    /// Potential at every stored (thinned) sample.
    pub potentials: Vec<f64>,
    /// Raw thinned parameter vectors when `store_samples` is set.
    pub samples: Vec<Vec<f64>>,
    /// Network outputs at the test rows for every stored sample.
    pub test_predictions: Vec<DVector<f64>>,
    pub stats: RunStats,
    /// Effective sample size of each branch-norm series.
    pub norm_ess: Vec<f64>,
}

impl HmcChain {
    pub fn acceptance_rate(&self) -> f64 {
        self.stats.acceptance_rate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmcRun {
    pub chains: Vec<HmcChain>,
}

fn initial_point(target: &PosteriorTarget, cfg: &HmcConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    let s2 = target.prior_variance;
    let l = target.num_branches();
    let draw = |rng: &mut Rng| {
        sample_gaussian_params(
            rng,
            target.activations.clone(),
            target.input_dim(),
            target.width,
            s2,
            &vec![s2; l],
        )
    };
    match &cfg.init {
        Init::Explicit(theta) => {
            if theta.len() != target.dim() {
                return Err(Error::Dimension {
                    context: "explicit HMC init",
                    expected: target.dim(),
                    actual: theta.len(),
                });
            }
            Ok(theta.clone())
        }
        Init::Prior => Ok(draw(rng)?.to_flat()),
        Init::DataConsistent => {
            if target.gram.is_none() {
                return Err(Error::invalid(
                    "init",
                    "data-consistent init needs all-linear branches",
                ));
            }
            let mut params = draw(rng)?;
            data_consistent_shift(target, &mut params)?;
            Ok(params.to_flat())
        }
    }
}

/// Shifts `W_l` along `a_l` so that `f = y` on the training rows, using the
/// minimum-norm correction of the stacked `v_l = W_l a_l`.
fn data_consistent_shift(target: &PosteriorTarget, params: &mut NetworkParams) -> Result<()> {
    let s = target.output_scale();
    let n0 = target.input_dim();
    let p = target.num_train();
    let lb = target.num_branches();
    // residual r = y − s Σ X_l W_l a_l
    let mut resid = target.labels.clone();
    for (x, (w, a)) in target
        .inputs
        .iter()
        .zip(params.hidden.iter().zip(&params.readout))
    {
        resid -= x * (w * a) * s;
    }
    // Δv = s Xᵀ (s² X Xᵀ + T I)⁻¹ r, X = [X_0 … X_{L−1}]
    let mut xxt = DMatrix::zeros(p, p);
    for x in &target.inputs {
        xxt += x * x.transpose();
    }
    xxt *= s * s;
    for i in 0..p {
        xxt[(i, i)] += target.temperature;
    }
    let z = crate::linalg::SpdFactor::new(&xxt)?.solve_vec(&resid);
    for l in 0..lb {
        let dv = target.inputs[l].tr_mul(&z) * s;
        let a = &params.readout[l];
        let a_sq = a.norm_squared();
        if a_sq > 0.0 {
            params.hidden[l] += &dv * a.transpose() / a_sq;
        }
        debug_assert_eq!(dv.len(), n0);
    }
    Ok(())
}

/// Runs chain `index` of `cfg` (stream `HMC_BASE + index`).
pub fn sample_chain(target: &PosteriorTarget, cfg: &HmcConfig, index: usize) -> Result<HmcChain> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed, stream::HMC_BASE + index as u64);
    let init = initial_point(target, cfg, &mut rng)?;
    let eps = cfg
        .step_size
        .unwrap_or_else(|| 0.01 * libm::sqrt(target.temperature));
    let lb = target.num_branches();
    let n = target.width as f64;
    let n0 = target.input_dim();
    let per_branch = target.per_branch();
    let p = target.num_train() as f64;
    let mut chain = HmcChain {
        norms: vec![Vec::with_capacity(cfg.kept); lb],
        train_loss: Vec::with_capacity(cfg.kept),
        potentials: Vec::new(),
        samples: Vec::new(),
        test_predictions: Vec::new(),
        stats: RunStats::default(),
        norm_ess: Vec::new(),
    };
    let stats = run_chain(target, init, cfg, eps, &mut rng, |it, theta, u| {
        for l in 0..lb {
            let a = &theta[l * per_branch + n0 * target.width..(l + 1) * per_branch];
            chain.norms[l].push(a.iter().map(|v| v * v).sum::<f64>() / n);
        }
        let prior = theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * target.prior_variance);
        chain
            .train_loss
            .push(((u - prior) * 2.0 * target.temperature).max(0.0) / p);
        if it % cfg.thin == 0 {
            chain.potentials.push(u);
            if let Some(pred) = target.test_outputs(theta)? {
                chain.test_predictions.push(pred);
            }
            if cfg.store_samples {
                chain.samples.push(theta.to_vec());
            }
        }
        Ok(())
    })?;
    chain.norm_ess = chain
        .norms
        .iter()
        .map(|s| effective_sample_size(s))
        .collect();
    chain.stats = stats;
    Ok(chain)
}

/// Runs every chain sequentially.
pub fn sample(target: &PosteriorTarget, cfg: &HmcConfig) -> Result<HmcRun> {
    let chains = (0..cfg.num_chains)
        .map(|c| sample_chain(target, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(HmcRun { chains })
}

/// Effective sample size from the initial positive sequence of
/// autocorrelation pairs.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let var = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64)
}

/// Mean and batch-means standard error over several chains.
///
/// Each chain is cut into `⌊√n⌋` consecutive batches of equal size; the
/// standard error is the spread of all batch means over `√(#batches)`.
pub fn batch_means(chains: &[&[f64]]) -> Result<(f64, f64)> {
    let shortest = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if shortest < 4 {
        return Err(Error::TooFewSamples {
            required: 4,
            available: shortest,
        });
    }
    let num_batches = libm::floor(libm::sqrt(shortest as f64)) as usize;
    let size = shortest / num_batches;
    let mut means = Vec::with_capacity(num_batches * chains.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for c in chains {
        for x in c.iter() {
            total += x;
            count += 1;
        }
        for b in 0..num_batches {
            let batch = &c[b * size..(b + 1) * size];
            means.push(batch.iter().sum::<f64>() / size as f64);
        }
    }
    let mean = total / count as f64;
    let bm = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>() / (means.len() - 1) as f64;
    Ok((mean, libm::sqrt(var / means.len() as f64)))
}

/// Split-R̂ over several chains.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let half = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if half < 2 {
        return f64::NAN;
    }
    let parts: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[half..2 * half]])
        .collect();
    let m = parts.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return f64::NAN;
    }
    libm::sqrt(((n - 1.0) / n * w + b / n) / w)
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    /// `|mean − reference|` in standard errors.
    pub fn z_score(&self, reference: f64) -> f64 {
        (self.mean - reference).abs() / self.std_err
    }
}

/// Posterior mean of `‖a_l‖²/N` per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct NormEstimates {
    pub branches: Vec<Estimate>,
    pub rhat: Vec<f64>,
}

/// Minimum number of kept iterations (over all chains) for any estimate.
pub const MIN_KEPT: usize = 100;

pub fn estimate_norms(run: &HmcRun) -> Result<NormEstimates> {
    let total: usize = run.chains.iter().map(|c| c.train_loss.len()).sum();
    if run.chains.is_empty() || total < MIN_KEPT {
        return Err(Error::TooFewSamples {
            required: MIN_KEPT,
            available: total,
        });
    }
    let lb = run.chains[0].norms.len();
    let mut branches = Vec::with_capacity(lb);
    let mut rhat = Vec::with_capacity(lb);
    for l in 0..lb {
        let series: Vec<&[f64]> = run.chains.iter().map(|c| c.norms[l].as_slice()).collect();
        let (mean, std_err) = batch_means(&series)?;
        branches.push(Estimate { mean, std_err });
        rhat.push(split_rhat(&series));
    }
    Ok(NormEstimates { branches, rhat })
}

/// Sampled predictor statistics on the test rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorEstimate {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub bias: Estimate,
    pub variance_mean: Estimate,
    pub generalization: Estimate,
    pub samples: usize,
}

/// Empirical predictor moments from the recorded test predictions.
///
/// `generalization` is the posterior mean of the per-sample test MSE,
/// `bias` uses the sample-mean predictor, and `variance_mean` is their
/// difference. Standard errors come from batch means (the bias through its
/// linearization in the per-sample predictions).
pub fn estimate_predictor(run: &HmcRun, targets: &DVector<f64>) -> Result<PredictorEstimate> {
    let per_chain: Vec<&[DVector<f64>]> = run
        .chains
        .iter()
        .map(|c| c.test_predictions.as_slice())
        .collect();
    let total: usize = per_chain.iter().map(|c| c.len()).sum();
    if total < MIN_KEPT / 4 || per_chain.iter().any(|c| c.is_empty()) {
        return Err(Error::TooFewSamples {
            required: MIN_KEPT / 4,
            available: total,
        });
    }
    let t = targets.len();
    if t == 0 {
        return Err(Error::invalid("targets", "empty test set"));
    }
    if per_chain[0][0].len() != t {
        return Err(Error::Dimension {
            context: "estimate_predictor targets vs predictions",
            expected: per_chain[0][0].len(),
            actual: t,
        });
    }
    let mut mean = DVector::zeros(t);
    let mut second = DVector::zeros(t);
    for f in per_chain.iter().flat_map(|c| c.iter()) {
        mean += f;
        second += f.component_mul(f);
    }
    mean /= total as f64;
    second /= total as f64;
    let variance = (second - mean.component_mul(&mean)).map(|v| v.max(0.0));
    let bias_value = (&mean - targets).norm_squared() / t as f64;
    let slope = (&mean - targets) * (2.0 / t as f64);

    let mse: Vec<Vec<f64>> = per_chain
        .iter()
        .map(|c| {
            c.iter()
                .map(|f| (f - targets).norm_squared() / t as f64)
                .collect()
        })
        .collect();
    let lin: Vec<Vec<f64>> = per_chain
        .iter()
        .map(|c| c.iter().map(|f| slope.dot(f)).collect())
        .collect();
    let gen_refs: Vec<&[f64]> = mse.iter().map(|v| v.as_slice()).collect();
    let lin_refs: Vec<&[f64]> = lin.iter().map(|v| v.as_slice()).collect();
    let (gen_mean, gen_se) = batch_means(&gen_refs)?;
    let (_, bias_se) = batch_means(&lin_refs)?;
    // the variance term is the posterior mean of (f − mean)² averaged over nodes
    let var_series: Vec<Vec<f64>> = per_chain
        .iter()
        .map(|c| {
            c.iter()
                .map(|f| (f - &mean).norm_squared() / t as f64)
                .collect()
        })
        .collect();
    let var_refs: Vec<&[f64]> = var_series.iter().map(|v| v.as_slice()).collect();
    let (var_mean, var_se) = batch_means(&var_refs)?;
    Ok(PredictorEstimate {
        mean,
        variance,
        bias: Estimate {
            mean: bias_value,
            std_err: bias_se,
        },
        variance_mean: Estimate {
            mean: var_mean,
            std_err: var_se,
        },
        generalization: Estimate {
            mean: gen_mean,
            std_err: gen_se,
        },
        samples: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gaussian_inputs;
    use approx::assert_relative_eq;

    fn small_target(acts: Vec<Activation>, p: usize, seed: u64) -> PosteriorTarget {
        let n0 = 4;
        let inputs: Vec<DMatrix<f64>> = (0..acts.len())
            .map(|l| gaussian_inputs(p, n0, seed + l as u64))
            .collect();
        let labels = gaussian_inputs(p, 1, seed + 100).column(0).into_owned();
        PosteriorTarget::new(inputs, labels, acts, 3, 0.3, 0.8).unwrap()
    }

    fn finite_difference_check(target: &PosteriorTarget, seed: u64) {
        let mut rng = rng::seeded(seed, 0);
        let theta: Vec<f64> = (0..target.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (_, grad) = potential(&theta, target).unwrap();
        for k in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd =
                (potential(&up, target).unwrap().0 - potential(&dn, target).unwrap().0) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() <= 1e-5 * grad[k].abs().max(1.0),
                "param {k}: fd {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lin = small_target(vec![Activation::Identity; 2], 5, 1);
        finite_difference_check(&lin, 2);
        finite_difference_check(&lin.clone().without_gram_cache(), 3);
        let mlp = small_target(vec![Activation::Identity, Activation::Relu], 5, 4);
        finite_difference_check(&mlp, 5);
    }

    #[test]
    fn gram_and_generic_paths_agree() {
        let fast = small_target(vec![Activation::Identity; 3], 9, 7);
        let slow = fast.clone().without_gram_cache();
        let mut rng = rng::seeded(8, 0);
        let theta: Vec<f64> = (0..fast.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (u1, g1) = potential(&theta, &fast).unwrap();
        let (u2, g2) = potential(&theta, &slow).unwrap();
        assert_relative_eq!(u1, u2, max_relative = 1e-10);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_parameters_leave_only_the_data_term() {
        let t = small_target(vec![Activation::Identity, Activation::Relu], 6, 9);
        let (u, _) = potential(&vec![0.0; t.dim()], &t).unwrap();
        assert_relative_eq!(u, t.labels.norm_squared() / (2.0 * 0.3), epsilon = 1e-12);
    }

    #[test]
    fn no_data_gives_pure_gaussian() {
        let inputs = vec![DMatrix::zeros(0, 3)];
        let t = PosteriorTarget::new(
            inputs,
            DVector::zeros(0),
            vec![Activation::Identity],
            2,
            0.1,
            0.5,
        )
        .unwrap();
        let theta: Vec<f64> = (0..t.dim()).map(|i| i as f64 * 0.3 - 1.0).collect();
        let (u, g) = potential(&theta, &t).unwrap();
        assert_relative_eq!(
            u,
            theta.iter().map(|x| x * x).sum::<f64>() / 1.0,
            epsilon = 1e-12
        );
        for (gi, ti) in g.iter().zip(&theta) {
            assert_relative_eq!(*gi, ti / 0.5, epsilon = 1e-12);
        }
    }

    /// `U(x) = ½ xᵀ Σ⁻¹ x` for a fixed 2×2 covariance.
    struct Gaussian2 {
        precision: [[f64; 2]; 2],
    }

    impl Potential for Gaussian2 {
        fn dim(&self) -> usize {
            2
        }
        fn value_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let p = self.precision;
            g[0] = p[0][0] * x[0] + p[0][1] * x[1];
            g[1] = p[1][0] * x[0] + p[1][1] * x[1];
            0.5 * (x[0] * g[0] + x[1] * g[1])
        }
    }

    fn gaussian_moments(kept: usize, seed: u64) -> [f64; 3] {
        // Σ = [[1, 0.6], [0.6, 2]]
        let det = 2.0 - 0.36;
        let target = Gaussian2 {
            precision: [[2.0 / det, -0.6 / det], [-0.6 / det, 1.0 / det]],
        };
        let cfg = HmcConfig {
            step_size: Some(0.3),
            leapfrog_steps: 10,
            warmup: 200,
            kept,
            ..Default::default()
        };
        let mut rng = rng::seeded(seed, 0);
        let mut acc = [0.0; 3];
        run_chain(&target, vec![0.0, 0.0], &cfg, 0.3, &mut rng, |_, x, _| {
            acc[0] += x[0] * x[0];
            acc[1] += x[0] * x[1];
            acc[2] += x[1] * x[1];
            Ok(())
        })
        .unwrap();
        acc.map(|a| a / kept as f64)
    }

    #[test]
    fn gaussian_target_covariance() {
        let m = gaussian_moments(20_000, 1);
        // Var of a sample second moment is 2σ⁴/n for independent draws
        let n: f64 = 20_000.0;
        for (est, truth, var) in [
            (m[0], 1.0, 2.0),
            (m[1], 0.6, 1.0 * 2.0 + 0.36),
            (m[2], 2.0, 8.0),
        ] {
            let se = (var / n).sqrt() * 2.0; // allow for autocorrelation
            assert!((est - truth).abs() < 3.0 * se, "{est} vs {truth} (se {se})");
        }
    }

    #[test]
    fn gaussian_error_shrinks_with_more_samples() {
        let err = |kept| -> f64 {
            (0..8)
                .map(|s| {
                    let m = gaussian_moments(kept, 100 + s);
                    (m[0] - 1.0).powi(2) + (m[1] - 0.6).powi(2) + (m[2] - 2.0).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        let small = err(1000);
        let large = err(4000);
        // RMS error should roughly halve; allow generous noise
        assert!(large < 0.8 * small, "{small} -> {large}");
    }

    #[test]
    fn chains_are_seed_deterministic() {
        let t = small_target(vec![Activation::Identity; 2], 6, 20);
        let cfg = HmcConfig {
            warmup: 20,
            kept: 30,
            num_chains: 2,
            seed: 5,
            ..Default::default()
        };
        assert_eq!(sample(&t, &cfg).unwrap(), sample(&t, &cfg).unwrap());
    }

    #[test]
    fn prior_only_readout_variance() {
        let inputs = vec![DMatrix::zeros(0, 2)];
        let t = PosteriorTarget::new(
            inputs,
            DVector::zeros(0),
            vec![Activation::Identity],
            5,
            1.0,
            0.7,
        )
        .unwrap();
        let cfg = HmcConfig {
            step_size: Some(0.5),
            leapfrog_steps: 8,
            warmup: 100,
            kept: 4000,
            num_chains: 2,
            adaptation: StepAdaptation::Fixed,
            ..Default::default()
        };
        let run = sample(&t, &cfg).unwrap();
        let est = estimate_norms(&run).unwrap();
        // ‖a‖²/N has prior mean σ²
        assert!(est.branches[0].z_score(0.7) < 3.0, "{:?}", est.branches[0]);
    }

    #[test]
    fn too_few_samples_rejected() {
        let t = small_target(vec![Activation::Identity], 4, 1);
        let cfg = HmcConfig {
            warmup: 0,
            kept: 10,
            num_chains: 1,
            ..Default::default()
        };
        let run = sample(&t, &cfg).unwrap();
        assert!(matches!(
            estimate_norms(&run),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn ess_of_independent_and_correlated_series() {
        let mut rng = rng::seeded(3, 0);
        let iid: Vec<f64> = (0..4000)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 3000.0, "{ess}");
        let mut ar = vec![0.0; 4000];
        for i in 1..4000 {
            ar[i] = 0.9 * ar[i - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        // AR(1) with φ = 0.9 has τ = (1+φ)/(1−φ) = 19
        let ess = effective_sample_size(&ar);
        assert!(ess > 4000.0 / 40.0 && ess < 4000.0 / 10.0, "{ess}");
    }

    #[test]
    fn data_consistent_init_fits_labels() {
        let base = small_target(vec![Activation::Identity; 2], 5, 30);
        let t =
            PosteriorTarget::new(base.inputs, base.labels, base.activations, 3, 1e-4, 0.8).unwrap();
        let mut rng = rng::seeded(1, 0);
        let cfg = HmcConfig {
            init: Init::DataConsistent,
            ..Default::default()
        };
        let theta = initial_point(&t, &cfg, &mut rng).unwrap();
        // 2 branches × N0 = 4 columns can fit 5 labels
        assert!(t.squared_error(&theta) < 1e-3 * t.labels.norm_squared());
        let mlp = small_target(vec![Activation::Identity, Activation::Relu], 5, 3);
        assert!(initial_point(&mlp, &cfg, &mut rng).is_err());
    }
}

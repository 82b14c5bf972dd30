//! Executable demonstrations of minibatch-discretization pitfalls and the
//! variance-reduced gradient estimator that repairs them.
//!
//! Three stories live here:
//!
//! 1. Minimizing KL(p‖q) over q *without* a unit-mass constraint follows
//!    dq/dt = p/q pointwise, whose closed form is q(t) = √(2pt + q₀²): the
//!    mass explodes and even rescaling yields √p, not p.
//!    [`unconstrained_kl_flow`] integrates the ODE to exhibit this.
//! 2. The same dynamics bite a normalized model when KL is discretized over
//!    a minibatch without renormalizing inside the batch
//!    ([`naive_minibatch_kl_grad`]); normalizing both discretized
//!    distributions over the minibatch restores Gibbs' inequality
//!    ([`normalized_minibatch_kl`]).
//! 3. Gradient estimators of the form (1/n) Σ f·dq/dθ admit a free additive
//!    control term K·(1/n) Σ dq/dθ that is zero in expectation (uniform
//!    i.i.d. sampling, normalized q); K* chosen per coordinate to minimize
//!    variance ([`ControlVariate`], [`stabilized_gradient`]) also restores
//!    minibatch mass preservation on average
//!    ([`mass_preservation_check`]).

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Value};
use crate::flow::{FlowError, FlowModel};

#[derive(Debug, Error)]
pub enum PitfallError {
    #[error("grid density must have q > 0 everywhere")]
    NonPositiveDensity,
    #[error("grid density must have p ≥ 0 everywhere")]
    NegativeTarget,
    #[error("time step must be positive")]
    BadTimeStep,
    #[error("length mismatch")]
    LengthMismatch,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Pointwise densities on a finite grid for the unconstrained-flow demo.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub grid: Vec<f64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: Vec<f64>, q: Vec<f64>, p: Vec<f64>) -> Result<Self, PitfallError> {
        if grid.len() != q.len() || grid.len() != p.len() {
            return Err(PitfallError::LengthMismatch);
        }
        if q.iter().any(|v| *v <= 0.0) {
            return Err(PitfallError::NonPositiveDensity);
        }
        if p.iter().any(|v| *v < 0.0) {
            return Err(PitfallError::NegativeTarget);
        }
        Ok(GridDensity { grid, q, p })
    }
}

/// Integrate dq/dt = p/q per grid point with classical RK4 up to time `t`.
/// The exact solution is √(2pt + q₀²); the integrator is kept independent of
/// it so the two can be compared.
pub fn unconstrained_kl_flow(
    grid: &GridDensity,
    t_horizon: f64,
    dt: f64,
) -> Result<Vec<f64>, PitfallError> {
    if dt <= 0.0 {
        return Err(PitfallError::BadTimeStep);
    }
    let mut q = grid.q.clone();
    for (qi, &p) in q.iter_mut().zip(grid.p.iter()) {
        let mut t = 0.0;
        while t < t_horizon {
            let h = dt.min(t_horizon - t);
            let k1 = p / *qi;
            let k2 = p / (*qi + 0.5 * h * k1);
            let k3 = p / (*qi + 0.5 * h * k2);
            let k4 = p / (*qi + h * k3);
            *qi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            assert!(*qi > 0.0, "q left the positive cone (p >= 0 forbids this)");
            t += h;
        }
    }
    Ok(q)
}

/// Gradient of the naive minibatch KL, d/dθ Σᵢ p̃_B(xᵢ)·(−log p_G(xᵢ)),
/// with no normalization over the batch. Documented-pathological: repeated
/// descent steps on one fixed minibatch inflate Σᵢ p_G(xᵢ) without bound.
pub fn naive_minibatch_kl_grad(
    model: &FlowModel,
    x: &[f64],
    n: usize,
    ptb: &[f64],
) -> Result<Vec<f64>, PitfallError> {
    let dim = model.dim();
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let xv = tape.leaf(&x[i * dim..(i + 1) * dim]);
        let lp = staged.log_prob(&mut tape, xv)?;
        let neg = tape.neg(lp);
        terms.push(tape.scale(neg, ptb[i]));
    }
    let stack = tape.concat(&terms);
    let loss = tape.sum(stack);
    Ok(tape.gradient(loss, staged.param_leaves())?)
}

/// One trajectory of the naive-KL demo: gradient steps on a fixed batch,
/// recording the minibatch mass Σᵢ p_G(xᵢ) after each step.
pub fn naive_kl_demo(
    model: &mut FlowModel,
    x: &[f64],
    n: usize,
    ptb: &[f64],
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>, PitfallError> {
    let dim = model.dim();
    let mass = |m: &FlowModel| -> Result<f64, PitfallError> {
        let mut total = 0.0;
        for i in 0..n {
            total += m.log_prob_one(&x[i * dim..(i + 1) * dim])?.exp();
        }
        Ok(total)
    };
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(mass(model)?);
    for _ in 0..steps {
        let grad = naive_minibatch_kl_grad(model, x, n, ptb)?;
        for (p, g) in model.params_mut().iter_mut().zip(grad.iter()) {
            *p -= learning_rate * g;
        }
        trace.push(mass(model)?);
    }
    Ok(trace)
}

/// KL(p_B^{d|m} ‖ p_G^{d|m}) with both sides normalized over the minibatch.
/// Non-negative by Gibbs' inequality; zero iff the weights are proportional.
pub fn normalized_minibatch_kl(ptb: &[f64], pg: &[f64]) -> f64 {
    let zb: f64 = ptb.iter().sum();
    let zg: f64 = pg.iter().sum();
    ptb.iter()
        .zip(pg.iter())
        .map(|(b, g)| {
            let bn = b / zb;
            if bn == 0.0 {
                0.0
            } else {
                bn * (bn / (g / zg)).ln()
            }
        })
        .sum()
}

/// Differentiable normalized minibatch KL from constant log p̃_B and
/// tape-valued log p_G scalars.
pub fn normalized_minibatch_kl_value(
    tape: &mut Tape,
    log_ptb: &[f64],
    log_pg: &[Value],
) -> Result<Value, PitfallError> {
    assert_eq!(log_ptb.len(), log_pg.len());
    // p_B side is constant: normalize in plain arithmetic
    let m = log_ptb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_b = m + log_ptb.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let lg = tape.concat(log_pg);
    let lse_g = tape.log_sum_exp(lg)?;
    // Σ b̃ᵢ [log b̃ᵢ − (log p_G,i − LSE_G)]
    let mut terms = Vec::with_capacity(log_ptb.len());
    for (i, lb) in log_ptb.iter().enumerate() {
        let bn = (lb - lse_b).exp();
        let lgn = tape.sub(log_pg[i], lse_g);
        let neg = tape.neg(lgn);
        let inner = tape.add_const(neg, lb - lse_b);
        terms.push(tape.scale(inner, bn));
    }
    let stack = tape.concat(&terms);
    Ok(tape.sum(stack))
}

// ── Stabilizing trick ────────────────────────────────────────────────

/// Finite distribution q(θ) = softmax(θ) with closed-form dq/dθ; the
/// surrogate model for the estimator studies. It is normalized by
/// construction, which is exactly the property the trick exploits
/// (Σᵢ dqᵢ/dθⱼ = 0).
#[derive(Debug, Clone)]
pub struct SoftmaxDensity {
    pub theta: Vec<f64>,
}

impl SoftmaxDensity {
    pub fn new(theta: Vec<f64>) -> Self {
        SoftmaxDensity { theta }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        let m = self.theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.theta.iter().map(|t| (t - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// dq_i/dθ_j = q_i (δ_ij − q_j)
    pub fn dq_dtheta(&self) -> Vec<Vec<f64>> {
        let q = self.probs();
        let k = q.len();
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| q[i] * (if i == j { 1.0 } else { 0.0 } - q[j]))
                    .collect()
            })
            .collect()
    }
}

/// Running estimates of the optimal per-coordinate control constant
/// K*_j = −⟨(dq/dθ_j)² f⟩ / ⟨(dq/dθ_j)²⟩.
///
/// Running means use exponential decay (default 0.99) over past minibatches;
/// an exact-moment constructor exists for the oracle tests.
#[derive(Debug, Clone)]
pub struct ControlVariate {
    pub decay: f64,
    sum_sq: Vec<f64>,
    sum_sq_f: Vec<f64>,
    initialized: bool,
}

impl ControlVariate {
    pub fn new(n_params: usize, decay: f64) -> Self {
        ControlVariate {
            decay,
            sum_sq: vec![0.0; n_params],
            sum_sq_f: vec![0.0; n_params],
            initialized: false,
        }
    }

    pub fn is_warmed_up(&self) -> bool {
        self.initialized
    }

    /// Fold one minibatch of per-sample gradients dq(xᵢ)/dθ and values fᵢ
    /// into the running means.
    pub fn update(&mut self, per_sample_dq: &[Vec<f64>], f: &[f64]) {
        assert_eq!(per_sample_dq.len(), f.len());
        let n = f.len() as f64;
        let k = self.sum_sq.len();
        let mut batch_sq = vec![0.0; k];
        let mut batch_sq_f = vec![0.0; k];
        for (dq, fi) in per_sample_dq.iter().zip(f.iter()) {
            assert_eq!(dq.len(), k);
            for j in 0..k {
                let s = dq[j] * dq[j];
                batch_sq[j] += s;
                batch_sq_f[j] += s * fi;
            }
        }
        for j in 0..k {
            batch_sq[j] /= n;
            batch_sq_f[j] /= n;
        }
        if !self.initialized {
            self.sum_sq = batch_sq;
            self.sum_sq_f = batch_sq_f;
            self.initialized = true;
        } else {
            for j in 0..k {
                self.sum_sq[j] = self.decay * self.sum_sq[j] + (1.0 - self.decay) * batch_sq[j];
                self.sum_sq_f[j] =
                    self.decay * self.sum_sq_f[j] + (1.0 - self.decay) * batch_sq_f[j];
            }
        }
    }

    /// Exact moments under uniform state sampling on a finite surrogate.
    pub fn from_exact_moments(density: &SoftmaxDensity, f: &[f64]) -> Self {
        let dq = density.dq_dtheta();
        let states = density.len();
        let k = density.len();
        let mut sum_sq = vec![0.0; k];
        let mut sum_sq_f = vec![0.0; k];
        for i in 0..states {
            for j in 0..k {
                let s = dq[i][j] * dq[i][j];
                sum_sq[j] += s / states as f64;
                sum_sq_f[j] += s * f[i] / states as f64;
            }
        }
        ControlVariate {
            decay: 1.0,
            sum_sq,
            sum_sq_f,
            initialized: true,
        }
    }

    /// K*_j, with a division guard: coordinates whose running denominator is
    /// below 1e-30 get K* = 0.
    pub fn k_star(&self) -> Vec<f64> {
        self.sum_sq
            .iter()
            .zip(self.sum_sq_f.iter())
            .map(|(d, n)| if *d < 1e-30 { 0.0 } else { -n / d })
            .collect()
    }
}

/// Variance-reduced estimate of A_j = E[f·dq/dθ_j]:
/// Â_j = (1/n) [Σᵢ (dq(xᵢ)/dθ_j) fᵢ + K*_j Σᵢ dq(xᵢ)/dθ_j].
/// Unbiased for any constants K* because E[Σᵢ dq/dθ] = 0.
pub fn stabilized_gradient(
    per_sample_dq: &[Vec<f64>],
    f: &[f64],
    cv: &ControlVariate,
) -> Vec<f64> {
    assert_eq!(per_sample_dq.len(), f.len());
    let n = f.len() as f64;
    let k_star = cv.k_star();
    let k = k_star.len();
    let mut out = vec![0.0; k];
    for (dq, fi) in per_sample_dq.iter().zip(f.iter()) {
        for j in 0..k {
            out[j] += dq[j] * (fi + k_star[j]);
        }
    }
    for o in out.iter_mut() {
        *o /= n;
    }
    out
}

/// Per-coordinate first and second moments of an estimator over all ordered
/// minibatches of the given size under uniform state sampling.
pub fn enumerate_estimator_moments(
    density: &SoftmaxDensity,
    f: &[f64],
    batch_size: usize,
    k_star: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let states = density.len();
    let dq = density.dq_dtheta();
    let k = density.len();
    let mut mean = vec![0.0; k];
    let mut second = vec![0.0; k];
    let total = (states as f64).powi(batch_size as i32);
    let mut batch = vec![0usize; batch_size];
    loop {
        for j in 0..k {
            let mut est = 0.0;
            for &i in &batch {
                est += dq[i][j] * (f[i] + k_star[j]);
            }
            est /= batch_size as f64;
            mean[j] += est / total;
            second[j] += est * est / total;
        }
        // odometer over ordered minibatches
        let mut pos = 0;
        loop {
            if pos == batch_size {
                return (mean, second);
            }
            batch[pos] += 1;
            if batch[pos] < states {
                break;
            }
            batch[pos] = 0;
            pos += 1;
        }
    }
}

/// Outcome of the mass-preservation experiment.
#[derive(Debug, Clone)]
pub struct MassReport {
    pub corrected_mean: f64,
    pub corrected_se: f64,
    pub naive_mean: f64,
    pub naive_se: f64,
}

/// Expected minibatch mass change under gradient steps on a discrete
/// surrogate: with the exact K* correction it is zero on average, while the
/// naive estimator (K = 0) strictly inflates the sampled mass.
pub fn mass_preservation_check(
    density: &SoftmaxDensity,
    f: &[f64],
    n_batches: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> MassReport {
    let states = density.len();
    let dq = density.dq_dtheta();
    let k = density.len();
    let cv = ControlVariate::from_exact_moments(density, f);
    let k_star = cv.k_star();

    let mut stats = [(0.0f64, 0.0f64); 2]; // (sum, sumsq) for corrected, naive
    let mut batch = vec![0usize; batch_size];
    for _ in 0..n_batches {
        for b in batch.iter_mut() {
            *b = rng.random_range(0..states);
        }
        for (mode, stat) in stats.iter_mut().enumerate() {
            // δθ_j = lr · (1/n) Σᵢ dq(xᵢ)/dθ_j (fᵢ + K_j)
            let mut dtheta = vec![0.0; k];
            for &i in &batch {
                for j in 0..k {
                    let kj = if mode == 0 { k_star[j] } else { 0.0 };
                    dtheta[j] += dq[i][j] * (f[i] + kj);
                }
            }
            // mass change at the sampled points: Σᵢ Σⱼ dq(xᵢ)/dθ_j · δθ_j
            let mut dm = 0.0;
            for &i in &batch {
                for j in 0..k {
                    dm += dq[i][j] * learning_rate * dtheta[j] / batch_size as f64;
                }
            }
            stat.0 += dm;
            stat.1 += dm * dm;
        }
    }
    let nb = n_batches as f64;
    let summarize = |(sum, sumsq): (f64, f64)| {
        let mean = sum / nb;
        let var = (sumsq / nb - mean * mean).max(0.0);
        (mean, (var / nb).sqrt())
    };
    let (corrected_mean, corrected_se) = summarize(stats[0]);
    let (naive_mean, naive_se) = summarize(stats[1]);
    MassReport {
        corrected_mean,
        corrected_se,
        naive_mean,
        naive_se,
    }
}

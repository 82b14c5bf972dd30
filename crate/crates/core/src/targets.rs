//! Target Boltzmann densities.
//!
//! Energies are dimensionless with β absorbed, so log p̃_B(x) = −energy(x)
//! and the partition function never appears: every downstream computation
//! works with ratios or differences in which it cancels.
//!
//! The 12-dimensional double well has a bimodal first coordinate,
//! U₁(x₁) = a·x₁⁴ − b·x₁² + c·x₁, and independent wide Gaussians on the
//! remaining coordinates. With c ≠ 0 the two wells carry different mass; the
//! minor-mode probability is always obtained by quadrature at runtime, never
//! hard-coded.
//!
//! Per-term capping replaces each one-dimensional term by a C¹ function that
//! is exactly the term between two knee points (where the term's slope
//! reaches the threshold) and continues linearly with slope ±threshold
//! outside them, so the gradient is bounded without ever being zeroed.

use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Value};

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cap threshold {threshold} is below the interior slope maximum {interior_max} of the well term; capping would clip inside the wells")]
    CapTooTight { threshold: f64, interior_max: f64 },
    #[error("cap threshold must be positive, got {0}")]
    CapNotPositive(f64),
    #[error("discrete space must be non-empty")]
    EmptySpace,
    #[error("discrete weights must be positive")]
    NonPositiveWeight,
}

/// A target density known up to its normalization constant.
pub trait EnergyModel: Send + Sync {
    fn dim(&self) -> usize;

    /// βU_B(x); log p̃_B(x) = −energy(x). Pure, safe to call concurrently.
    fn energy(&self, x: &[f64]) -> f64;

    /// Differentiable energy on a tape (x is a dim-length vector node).
    fn energy_tape(&self, tape: &mut Tape, x: Value) -> Result<Value, AutodiffError>;
}

/// Evaluate energies for a batch of points, chunked over worker threads.
/// The worker count is capped by the `BOLTZLAB_THREADS` environment variable
/// (default 1). Results are written per-index, so the output is independent
/// of the worker count.
pub fn energy_batch(target: &dyn EnergyModel, x: &[f64], n: usize) -> Vec<f64> {
    let d = target.dim();
    assert_eq!(x.len(), n * d);
    let workers = std::env::var("BOLTZLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
        .min(n.max(1));
    let mut out = vec![0.0; n];
    if workers == 1 || n < 2 * workers {
        for i in 0..n {
            out[i] = target.energy(&x[i * d..(i + 1) * d]);
        }
        return out;
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let start = w * chunk;
            scope.spawn(move || {
                for (k, o) in slot.iter_mut().enumerate() {
                    let i = start + k;
                    *o = target.energy(&x[i * d..(i + 1) * d]);
                }
            });
        }
    });
    out
}

// ── Double well ──────────────────────────────────────────────────────

/// Locations of the two minima and the barrier top of the 1-D well term.
#[derive(Debug, Clone, Copy)]
pub struct WellExtrema {
    pub left_min: f64,
    pub saddle: f64,
    pub right_min: f64,
}

#[derive(Debug, Clone, Copy)]
struct CapKnees {
    /// Identity region of the 1-D well term.
    poly_lo: f64,
    poly_hi: f64,
    /// Identity half-width of the quadratic terms.
    quad: f64,
    threshold: f64,
}

/// `dim`-dimensional double well: bimodal first coordinate plus independent
/// Gaussians of width `sigma_wide` on the rest.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    dim: usize,
    a: f64,
    b: f64,
    c: f64,
    sigma_wide: f64,
    cap: Option<CapKnees>,
    first: Arc<Vec<usize>>,
    rest: Arc<Vec<usize>>,
}

impl Default for DoubleWell {
    fn default() -> Self {
        DoubleWell::new(12)
    }
}

impl DoubleWell {
    pub fn new(dim: usize) -> Self {
        DoubleWell::with_coefficients(dim, 1.0, 6.0, 1.0, 10.0)
    }

    pub fn with_coefficients(dim: usize, a: f64, b: f64, c: f64, sigma_wide: f64) -> Self {
        assert!(dim >= 1);
        assert!(a > 0.0 && sigma_wide > 0.0);
        DoubleWell {
            dim,
            a,
            b,
            c,
            sigma_wide,
            cap: None,
            first: Arc::new(vec![0]),
            rest: Arc::new((1..dim).collect()),
        }
    }

    /// Enable per-term capping with the given gradient threshold.
    pub fn with_cap(mut self, threshold: f64) -> Result<Self, TargetError> {
        if !(threshold > 0.0) {
            return Err(TargetError::CapNotPositive(threshold));
        }
        if !threshold.is_finite() {
            self.cap = None;
            return Ok(self);
        }
        // Interior slope extrema of U₁' = 4a s³ − 2b s + c sit at ±√(b/6a);
        // the threshold must clear them or the identity region would be
        // interrupted inside the wells.
        let interior_max = if self.b > 0.0 {
            let s = (self.b / (6.0 * self.a)).sqrt();
            self.poly_deriv(s).abs().max(self.poly_deriv(-s).abs())
        } else {
            self.poly_deriv(0.0).abs()
        };
        if threshold <= interior_max {
            return Err(TargetError::CapTooTight {
                threshold,
                interior_max,
            });
        }
        let poly_hi = self.solve_deriv_above(threshold);
        let poly_lo = self.solve_deriv_below(-threshold);
        let quad = threshold * self.sigma_wide * self.sigma_wide;
        self.cap = Some(CapKnees {
            poly_lo,
            poly_hi,
            quad,
            threshold,
        });
        Ok(self)
    }

    pub fn coefficients(&self) -> (f64, f64, f64) {
        (self.a, self.b, self.c)
    }

    pub fn sigma_wide(&self) -> f64 {
        self.sigma_wide
    }

    pub fn cap_threshold(&self) -> Option<f64> {
        self.cap.map(|c| c.threshold)
    }

    /// Raw (uncapped) 1-D well term.
    pub fn poly(&self, s: f64) -> f64 {
        let s2 = s * s;
        self.a * s2 * s2 - self.b * s2 + self.c * s
    }

    fn poly_deriv(&self, s: f64) -> f64 {
        4.0 * self.a * s * s * s - 2.0 * self.b * s + self.c
    }

    /// Rightmost solution of U₁'(s) = target (target > interior maxima).
    fn solve_deriv_above(&self, target: f64) -> f64 {
        let mut hi = 1.0 + (self.b / self.a).sqrt().max(1.0);
        while self.poly_deriv(hi) < target {
            hi *= 2.0;
        }
        let mut lo = if self.b > 0.0 {
            (self.b / (6.0 * self.a)).sqrt()
        } else {
            0.0
        };
        bisect(|s| self.poly_deriv(s) - target, &mut lo, &mut hi);
        0.5 * (lo + hi)
    }

    /// Leftmost solution of U₁'(s) = target (target < interior minima).
    fn solve_deriv_below(&self, target: f64) -> f64 {
        let mut lo = -(1.0 + (self.b / self.a).sqrt().max(1.0));
        while self.poly_deriv(lo) > target {
            lo *= 2.0;
        }
        let mut hi = if self.b > 0.0 {
            -(self.b / (6.0 * self.a)).sqrt()
        } else {
            0.0
        };
        // poly_deriv is increasing through the crossing as s grows
        bisect(|s| self.poly_deriv(s) - target, &mut lo, &mut hi);
        0.5 * (lo + hi)
    }

    /// Capped 1-D well term: identity on [poly_lo, poly_hi], linear with
    /// slope ±threshold outside.
    fn poly_capped(&self, s: f64) -> f64 {
        match self.cap {
            None => self.poly(s),
            Some(k) => {
                if s > k.poly_hi {
                    self.poly(k.poly_hi) + k.threshold * (s - k.poly_hi)
                } else if s < k.poly_lo {
                    self.poly(k.poly_lo) - k.threshold * (s - k.poly_lo)
                } else {
                    self.poly(s)
                }
            }
        }
    }

    fn quad_term(&self, s: f64) -> f64 {
        s * s / (2.0 * self.sigma_wide * self.sigma_wide)
    }

    fn quad_capped(&self, s: f64) -> f64 {
        match self.cap {
            None => self.quad_term(s),
            Some(k) => {
                if s > k.quad {
                    self.quad_term(k.quad) + k.threshold * (s - k.quad)
                } else if s < -k.quad {
                    self.quad_term(k.quad) - k.threshold * (s + k.quad)
                } else {
                    self.quad_term(s)
                }
            }
        }
    }

    /// Roots of U₁' ordered left minimum, saddle, right minimum.
    pub fn extrema(&self) -> WellExtrema {
        // U₁' = 4a s³ − 2b s + c has three real roots for a genuine double
        // well; scan for sign changes and bisect each bracket.
        let bound = 1.0 + ((2.0 * self.b + self.c.abs()) / self.a).cbrt().max(1.0);
        let n = 4096;
        let mut roots = Vec::new();
        let mut prev_s = -bound;
        let mut prev_f = self.poly_deriv(prev_s);
        for i in 1..=n {
            let s = -bound + 2.0 * bound * i as f64 / n as f64;
            let f = self.poly_deriv(s);
            if prev_f == 0.0 {
                roots.push(prev_s);
            } else if prev_f * f < 0.0 {
                let (mut lo, mut hi) = (prev_s, s);
                bisect(|u| self.poly_deriv(u), &mut lo, &mut hi);
                roots.push(0.5 * (lo + hi));
            }
            prev_s = s;
            prev_f = f;
        }
        assert!(
            roots.len() == 3,
            "expected a double well (3 stationary points), found {}",
            roots.len()
        );
        WellExtrema {
            left_min: roots[0],
            saddle: roots[1],
            right_min: roots[2],
        }
    }

    /// Minor-mode mass ratio ρ* = P(x₁ > saddle) under exp(−U₁), by adaptive
    /// quadrature of the (capped, when enabled) well term. The wide Gaussian
    /// dimensions factor out exactly.
    pub fn minor_mode_ratio(&self) -> f64 {
        let (log_left, log_right) = self.well_log_masses();
        1.0 / (1.0 + (log_left - log_right).exp())
    }

    /// log of the 1-D well partition function restricted to a half-line,
    /// split at the saddle, for free-energy oracles: (log ∫_left, log ∫_right).
    pub fn well_log_masses(&self) -> (f64, f64) {
        let ext = self.extrema();
        let shift = self.poly(ext.left_min).min(self.poly(ext.right_min));
        let f = |s: f64| (-(self.poly_capped(s) - shift)).exp();
        let bound = self.integration_bound(shift);
        let right = adaptive_simpson(&f, ext.saddle, bound, 1e-12, 40);
        let left = adaptive_simpson(&f, -bound, ext.saddle, 1e-12, 40);
        (left.ln() - shift, right.ln() - shift)
    }

    fn integration_bound(&self, shift: f64) -> f64 {
        // expand until the integrand is negligible
        let mut bound = 2.0;
        while (self.poly_capped(bound) - shift).min(self.poly_capped(-bound) - shift) < 60.0 {
            bound *= 1.5;
        }
        bound
    }
}

impl EnergyModel for DoubleWell {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let mut e = self.poly_capped(x[0]);
        for &v in &x[1..] {
            e += self.quad_capped(v);
        }
        e
    }

    fn energy_tape(&self, tape: &mut Tape, x: Value) -> Result<Value, AutodiffError> {
        let x1 = tape.gather(x, &self.first);
        let poly = match self.cap {
            None => self.poly_tape(tape, x1),
            Some(k) => {
                // identity inside [lo, hi] via clamped input, linear tails
                let clamped = tape.min_const(x1, k.poly_hi);
                let clamped = tape.max_const(clamped, k.poly_lo);
                let inner = self.poly_tape(tape, clamped);
                let up = tape.add_const(x1, -k.poly_hi);
                let up = tape.relu(up);
                let up = tape.scale(up, k.threshold);
                let down = tape.neg(x1);
                let down = tape.add_const(down, k.poly_lo);
                let down = tape.relu(down);
                let down = tape.scale(down, k.threshold);
                let t = tape.add(inner, up);
                tape.add(t, down)
            }
        };
        let poly = tape.sum(poly);
        if self.dim == 1 {
            return Ok(poly);
        }
        let rest = tape.gather(x, &self.rest);
        let quad = match self.cap {
            None => {
                let sq = tape.square(rest);
                let s = tape.sum(sq);
                tape.scale(s, 1.0 / (2.0 * self.sigma_wide * self.sigma_wide))
            }
            Some(k) => {
                let clamped = tape.min_const(rest, k.quad);
                let clamped = tape.max_const(clamped, -k.quad);
                let sq = tape.square(clamped);
                let inner = tape.scale(sq, 1.0 / (2.0 * self.sigma_wide * self.sigma_wide));
                let up = tape.add_const(rest, -k.quad);
                let up = tape.relu(up);
                let down = tape.neg(rest);
                let down = tape.add_const(down, -k.quad);
                let down = tape.relu(down);
                let tails = tape.add(up, down);
                let tails = tape.scale(tails, k.threshold);
                let t = tape.add(inner, tails);
                tape.sum(t)
            }
        };
        Ok(tape.add(poly, quad))
    }
}

impl DoubleWell {
    /// a·s⁴ − b·s² + c·s on tape, elementwise.
    fn poly_tape(&self, tape: &mut Tape, s: Value) -> Value {
        let s2 = tape.square(s);
        let s4 = tape.square(s2);
        let t4 = tape.scale(s4, self.a);
        let t2 = tape.scale(s2, -self.b);
        let t1 = tape.scale(s, self.c);
        let t = tape.add(t4, t2);
        tape.add(t, t1)
    }
}

fn bisect(f: impl Fn(f64) -> f64, lo: &mut f64, hi: &mut f64) {
    let mut flo = f(*lo);
    for _ in 0..200 {
        let mid = 0.5 * (*lo + *hi);
        let fm = f(mid);
        if fm == 0.0 {
            *lo = mid;
            *hi = mid;
            return;
        }
        if flo * fm < 0.0 {
            *hi = mid;
        } else {
            *lo = mid;
            flo = fm;
        }
        if (*hi - *lo).abs() < 1e-14 * (1.0 + lo.abs() + hi.abs()) {
            return;
        }
    }
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let c = 0.5 * (a + b);
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_rec(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let (d, e) = (0.5 * (a + c), 0.5 * (c + b));
    let (fd, fe) = (f(d), f(e));
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, c, fa, fc, fd, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, c, b, fc, fb, fe, right, 0.5 * tol, depth - 1)
    }
}

// ── Discrete verification spaces ─────────────────────────────────────

/// Finite state space with unnormalized target and sampler masses; used to
/// verify estimator identities against exact sums.
#[derive(Debug, Clone)]
pub struct DiscreteSpace {
    pub states: Vec<Vec<f64>>,
    pub weights_b: Vec<f64>,
    pub weights_g: Vec<f64>,
}

impl DiscreteSpace {
    pub fn new(
        states: Vec<Vec<f64>>,
        weights_b: Vec<f64>,
        weights_g: Vec<f64>,
    ) -> Result<Self, TargetError> {
        if states.is_empty() {
            return Err(TargetError::EmptySpace);
        }
        assert_eq!(states.len(), weights_b.len());
        assert_eq!(states.len(), weights_g.len());
        if weights_b.iter().chain(weights_g.iter()).any(|w| *w <= 0.0) {
            return Err(TargetError::NonPositiveWeight);
        }
        Ok(DiscreteSpace {
            states,
            weights_b,
            weights_g,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn z_b(&self) -> f64 {
        self.weights_b.iter().sum()
    }

    pub fn z_g(&self) -> f64 {
        self.weights_g.iter().sum()
    }

    /// Normalized target probabilities.
    pub fn p_b(&self) -> Vec<f64> {
        let z = self.z_b();
        self.weights_b.iter().map(|w| w / z).collect()
    }

    /// Normalized sampler probabilities.
    pub fn p_g(&self) -> Vec<f64> {
        let z = self.z_g();
        self.weights_g.iter().map(|w| w / z).collect()
    }

    /// Exact Q = Σ p_B f.
    pub fn exact_q(&self, f: &[f64]) -> f64 {
        let pb = self.p_b();
        pb.iter().zip(f.iter()).map(|(p, v)| p * v).sum()
    }

    /// Exact variance of the single-sample raw importance estimator
    /// g = f·p_B/p_G under p_G: E[g²] − Q². The n-sample estimator has
    /// variance 1/n times this.
    pub fn exact_estimator_variance(&self, f: &[f64]) -> f64 {
        let pb = self.p_b();
        let pg = self.p_g();
        let q = self.exact_q(f);
        let second: f64 = (0..self.len())
            .map(|i| {
                let g = f[i] * pb[i] / pg[i];
                pg[i] * g * g
            })
            .sum();
        second - q * q
    }

    /// E_{p_G}[(p_B/p_G)²] = exp(RN₂(p_B‖p_G)) = Var + 1.
    pub fn exp_renyi2(&self) -> f64 {
        let pb = self.p_b();
        let pg = self.p_g();
        (0..self.len()).map(|i| pb[i] * pb[i] / pg[i]).sum()
    }

    /// Draw a state index from p_G.
    pub fn sample_g(&self, rng: &mut impl rand::Rng) -> usize {
        let z = self.z_g();
        let mut u: f64 = rng.random::<f64>() * z;
        for (i, w) in self.weights_g.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.len() - 1
    }
}

/// Exact mean and single-sample estimator variance over a discrete space.
pub fn discrete_exact(space: &DiscreteSpace, f: &[f64]) -> Result<(f64, f64), TargetError> {
    if space.is_empty() {
        return Err(TargetError::EmptySpace);
    }
    Ok((space.exact_q(f), space.exact_estimator_variance(f)))
}

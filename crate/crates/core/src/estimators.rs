//! Importance-sampling estimators over model samples.
//!
//! All weight arithmetic happens in log space with log-sum-exp reductions;
//! raw exponentials of log-weights are only materialized after normalization,
//! so the estimators survive |log w| far beyond 30. Self-normalized weights
//! are the default since the target's partition function is unknown; the raw
//! path exists for oracle tests on discrete surrogates with known
//! normalization.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("all importance weights underflowed to zero; keep the computation in log space (log-sum-exp) rather than exponentiating raw weights")]
    AllZeroWeights,
    #[error("length mismatch between inputs")]
    LengthMismatch,
}

/// Summary of a reweighted estimate.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub q_hat: f64,
    pub n: usize,
    /// Delta-method variance estimate of the self-normalized Q̂:
    /// Σ w̃ᵢ²(fᵢ − Q̂)².
    pub empirical_variance: f64,
    /// Effective sample size (Σw)²/Σw² ∈ (0, n].
    pub ess: f64,
    pub log_z_hat: Option<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log importance weights log p̃_B − log p_G.
pub fn log_weights(log_pg: &[f64], log_ptb: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    if log_pg.len() != log_ptb.len() {
        return Err(EstimatorError::LengthMismatch);
    }
    Ok(log_ptb
        .iter()
        .zip(log_pg.iter())
        .map(|(b, g)| b - g)
        .collect())
}

/// Weights normalized to sum 1, computed stably from log weights.
pub fn normalized_weights(log_w: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(EstimatorError::AllZeroWeights);
    }
    Ok(log_w.iter().map(|lw| (lw - lse).exp()).collect())
}

/// Self-normalized reweighted expectation of `f` under the target:
/// Q̂ = Σ f(xᵢ) w̃ᵢ with w̃ᵢ = wᵢ / Σ wⱼ, wᵢ = p̃_B(xᵢ)/p_G(xᵢ).
pub fn reweighted_expectation(
    log_pg: &[f64],
    log_ptb: &[f64],
    f: &[f64],
) -> Result<EstimatorReport, EstimatorError> {
    let n = f.len();
    if n < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: n });
    }
    if log_pg.len() != n || log_ptb.len() != n {
        return Err(EstimatorError::LengthMismatch);
    }
    let lw = log_weights(log_pg, log_ptb)?;
    let wn = normalized_weights(&lw)?;
    let q_hat: f64 = wn.iter().zip(f.iter()).map(|(w, v)| w * v).sum();
    let empirical_variance: f64 = wn
        .iter()
        .zip(f.iter())
        .map(|(w, v)| w * w * (v - q_hat) * (v - q_hat))
        .sum();
    let ess = 1.0 / wn.iter().map(|w| w * w).sum::<f64>();
    let log_z_hat = log_sum_exp(&lw) - (n as f64).ln();
    Ok(EstimatorReport {
        q_hat,
        n,
        empirical_variance,
        ess,
        log_z_hat: Some(log_z_hat),
    })
}

/// Unnormalized estimator Q̂ = (1/n) Σ f(xᵢ)·wᵢ from raw log weights; only
/// meaningful when the weights use normalized densities (known Z). This is
/// the unbiased form the exact-sum oracles check.
pub fn reweighted_expectation_raw(log_w: &[f64], f: &[f64]) -> f64 {
    assert_eq!(log_w.len(), f.len());
    let n = f.len() as f64;
    log_w
        .iter()
        .zip(f.iter())
        .map(|(lw, v)| lw.exp() * v)
        .sum::<f64>()
        / n
}

/// log Ẑ_B = log-mean-exp of (log p̃_B − log p_G); an unbiased estimator of
/// Z_B in expectation of the exponential.
pub fn estimate_log_z(log_pg: &[f64], log_ptb: &[f64]) -> Result<f64, EstimatorError> {
    let n = log_pg.len();
    if n < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: n });
    }
    let lw = log_weights(log_pg, log_ptb)?;
    let lse = log_sum_exp(&lw);
    if !lse.is_finite() {
        return Err(EstimatorError::AllZeroWeights);
    }
    Ok(lse - (n as f64).ln())
}

/// Second moment of mean-normalized weights, optionally with a fixed
/// integrand: mean((wᵢ/mean w)² fᵢ²), or with f absent the sample estimate of
/// E_{p_G}[(p_B/p_G)²] = exp(RN₂) = Var[p_B/p_G] + 1.
///
/// Reported as a diagnostic; the masked L² loss is the stable training
/// surrogate for it.
pub fn variance_loss(log_pg: &[f64], log_ptb: &[f64], f: Option<&[f64]>) -> f64 {
    let n = log_pg.len() as f64;
    let lw: Vec<f64> = log_ptb
        .iter()
        .zip(log_pg.iter())
        .map(|(b, g)| b - g)
        .collect();
    let log_mean = log_sum_exp(&lw) - n.ln();
    match f {
        Some(fv) => {
            lw.iter()
                .zip(fv.iter())
                .map(|(l, v)| (2.0 * (l - log_mean)).exp() * v * v)
                .sum::<f64>()
                / n
        }
        None => lw.iter().map(|l| (2.0 * (l - log_mean)).exp()).sum::<f64>() / n,
    }
}

/// Free-energy difference to an alternate state with energy U_C:
/// ΔF̂ = −log Σᵢ w̃ᵢ exp(−(U_C − U_B)(xᵢ)), with β = 1. Fully in log space,
/// so a constant energy offset is recovered exactly.
pub fn free_energy_difference(
    log_pg: &[f64],
    log_ptb: &[f64],
    u_c_minus_u_b: &[f64],
) -> Result<f64, EstimatorError> {
    let n = log_pg.len();
    if n < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: n });
    }
    if log_ptb.len() != n || u_c_minus_u_b.len() != n {
        return Err(EstimatorError::LengthMismatch);
    }
    let lw = log_weights(log_pg, log_ptb)?;
    let denom = log_sum_exp(&lw);
    if !denom.is_finite() {
        return Err(EstimatorError::AllZeroWeights);
    }
    let shifted: Vec<f64> = lw
        .iter()
        .zip(u_c_minus_u_b.iter())
        .map(|(l, du)| l - du)
        .collect();
    Ok(denom - log_sum_exp(&shifted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::DiscreteSpace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space16() -> DiscreteSpace {
        let wb: Vec<f64> = (0..16).map(|i| 1.0 + ((i * 7) % 5) as f64).collect();
        let wg: Vec<f64> = (0..16).map(|i| 2.0 + ((i * 3) % 4) as f64).collect();
        DiscreteSpace::new((0..16).map(|i| vec![i as f64]).collect(), wb, wg).unwrap()
    }

    #[test]
    fn perfect_sampler_gives_sample_mean_and_full_ess() {
        let n = 64;
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        let log_pg: Vec<f64> = (0..n).map(|i| -1.3 + (i % 3) as f64).collect();
        let log_ptb = log_pg.clone(); // p_G = p_B
        let rep = reweighted_expectation(&log_pg, &log_ptb, &f).unwrap();
        let mean = f.iter().sum::<f64>() / n as f64;
        assert!((rep.q_hat - mean).abs() < 1e-12);
        assert!((rep.ess - n as f64).abs() < 1e-9);
    }

    #[test]
    fn constant_f_is_exactly_one() {
        let log_pg = [0.3, -0.7, 1.1, 0.0];
        let log_ptb = [5.0, 4.0, 6.5, 3.0];
        let f = [1.0; 4];
        let rep = reweighted_expectation(&log_pg, &log_ptb, &f).unwrap();
        assert!((rep.q_hat - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ess_is_n_iff_weights_equal() {
        let log_pg = [0.0, 0.0, 0.0];
        let equal = [2.0, 2.0, 2.0];
        let rep = reweighted_expectation(&log_pg, &equal, &[1.0, 2.0, 3.0]).unwrap();
        assert!((rep.ess - 3.0).abs() < 1e-12);
        let unequal = [2.0, 1.0, 2.0];
        let rep = reweighted_expectation(&log_pg, &unequal, &[1.0, 2.0, 3.0]).unwrap();
        assert!(rep.ess < 3.0 - 1e-9);
        assert!(rep.ess > 0.0);
    }

    #[test]
    fn reweighted_mean_matches_exact_over_minibatches() {
        // 16-state space, 10⁵ minibatches of 32: mean of Q̂ within 3 SE of Q
        let space = space16();
        let f: Vec<f64> = (0..16).map(|i| ((i * i) % 7) as f64 * 0.5 - 1.0).collect();
        let (q, var1) = crate::targets::discrete_exact(&space, &f).unwrap();
        let pb = space.p_b();
        let pg = space.p_g();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (batches, n) = (100_000usize, 32usize);
        let mut acc = 0.0;
        for _ in 0..batches {
            let mut qb = 0.0;
            for _ in 0..n {
                let i = space.sample_g(&mut rng);
                qb += f[i] * pb[i] / pg[i];
            }
            acc += qb / n as f64;
        }
        let mean = acc / batches as f64;
        let se = (var1 / (n as f64 * batches as f64)).sqrt();
        assert!((mean - q).abs() <= 3.0 * se, "{mean} vs {q} (se {se})");
    }

    #[test]
    fn variance_identity_on_surrogate() {
        // empirical Var(Q̂) over minibatches matches (1/n)(E[g²] − Q²) within 5%
        let space = space16();
        let f: Vec<f64> = (0..16).map(|i| 1.0 + (i as f64 * 0.3).sin()).collect();
        let (_, var1) = crate::targets::discrete_exact(&space, &f).unwrap();
        let pb = space.p_b();
        let pg = space.p_g();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (batches, n) = (100_000usize, 8usize);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..batches {
            let mut qb = 0.0;
            for _ in 0..n {
                let i = space.sample_g(&mut rng);
                qb += f[i] * pb[i] / pg[i];
            }
            qb /= n as f64;
            sum += qb;
            sumsq += qb * qb;
        }
        let mean = sum / batches as f64;
        let emp_var = sumsq / batches as f64 - mean * mean;
        let predicted = var1 / n as f64;
        let rel = (emp_var - predicted).abs() / predicted;
        assert!(rel < 0.05, "empirical {emp_var} vs predicted {predicted}");
    }

    #[test]
    fn log_z_exact_for_proportional_densities() {
        // p̃_B = c·p_G → logZ = log c for every batch
        let c: f64 = 7.5;
        let log_pg = [0.1, -2.0, 1.4, 0.6];
        let log_ptb: Vec<f64> = log_pg.iter().map(|l| l + c.ln()).collect();
        let z = estimate_log_z(&log_pg, &log_ptb).unwrap();
        assert!((z - c.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_z_converges_on_surrogate() {
        let space = space16();
        let lzb = space.z_b().ln();
        let pg = space.p_g();
        let wb = &space.weights_b;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // Z estimates over many batches: mean of exp within 3 SE of Z_B
        let (batches, n) = (20_000usize, 64usize);
        let mut zs = Vec::with_capacity(batches);
        for _ in 0..batches {
            let mut log_pg_s = Vec::with_capacity(n);
            let mut log_ptb_s = Vec::with_capacity(n);
            for _ in 0..n {
                let i = space.sample_g(&mut rng);
                log_pg_s.push(pg[i].ln());
                log_ptb_s.push(wb[i].ln());
            }
            zs.push(estimate_log_z(&log_pg_s, &log_ptb_s).unwrap().exp());
        }
        let mean = zs.iter().sum::<f64>() / batches as f64;
        let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / batches as f64;
        let se = (var / batches as f64).sqrt();
        assert!(
            (mean - lzb.exp()).abs() <= 3.0 * se,
            "{mean} vs {} (se {se})",
            lzb.exp()
        );
    }

    #[test]
    fn variance_loss_examples() {
        // constant weights → 1
        let log_pg = [0.2, 0.2, 0.2];
        let log_ptb = [1.0, 1.0, 1.0];
        assert!((variance_loss(&log_pg, &log_ptb, None) - 1.0).abs() < 1e-12);

        // 2-state exact: E_{p_G}[(p_B/p_G)²] = 25/9 with many samples in
        // proportion 0.9/0.1 — use exact proportions as a weighted check
        let space = DiscreteSpace::new(
            vec![vec![0.0], vec![1.0]],
            vec![0.5, 0.5],
            vec![0.9, 0.1],
        )
        .unwrap();
        assert!((space.exp_renyi2() - 25.0 / 9.0).abs() < 1e-12);

        // sample estimate converges to it
        let pb = space.p_b();
        let pg = space.p_g();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400_000usize;
        let mut log_pg_s = Vec::with_capacity(n);
        let mut log_ptb_s = Vec::with_capacity(n);
        for _ in 0..n {
            let i = space.sample_g(&mut rng);
            log_pg_s.push(pg[i].ln());
            log_ptb_s.push(pb[i].ln());
        }
        let est = variance_loss(&log_pg_s, &log_ptb_s, None);
        assert!((est - 25.0 / 9.0).abs() < 0.05, "{est}");
    }

    #[test]
    fn exp_renyi2_at_least_one() {
        // Jensen: E[w²]/E[w]² ≥ 1 for any positive weights
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        use rand::Rng;
        for _ in 0..10_000 {
            let n = rng.random_range(2..20);
            let log_pg: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let log_ptb: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = variance_loss(&log_pg, &log_ptb, None);
            assert!(v >= 1.0 - 1e-12, "exp(RN2) estimate {v} < 1");
        }
    }

    #[test]
    fn free_energy_zero_for_same_state() {
        let log_pg = [0.4, -1.0, 0.0];
        let log_ptb = [2.0, 1.0, 0.5];
        let du = [0.0; 3];
        let df = free_energy_difference(&log_pg, &log_ptb, &du).unwrap();
        assert_eq!(df, 0.0);
    }

    #[test]
    fn free_energy_recovers_constant_shift_exactly() {
        let log_pg = [0.4, -1.0, 0.0, 2.0];
        let log_ptb = [2.0, 1.0, 0.5, -0.3];
        for c in [-3.0, 0.25, 10.0] {
            let du = [c; 4];
            let df = free_energy_difference(&log_pg, &log_ptb, &du).unwrap();
            assert!((df - c).abs() < 1e-12, "{df} vs {c}");
        }
    }

    #[test]
    fn unbiasedness_of_raw_estimator() {
        // raw path with known-Z weights: E[Q̂] = Q over 10⁵ minibatches
        let space = space16();
        let f: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) * 0.25).collect();
        let (q, var1) = crate::targets::discrete_exact(&space, &f).unwrap();
        let pb = space.p_b();
        let pg = space.p_g();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (batches, n) = (100_000usize, 4usize);
        let mut acc = 0.0;
        for _ in 0..batches {
            let mut lw = Vec::with_capacity(n);
            let mut fs = Vec::with_capacity(n);
            for _ in 0..n {
                let i = space.sample_g(&mut rng);
                lw.push((pb[i] / pg[i]).ln());
                fs.push(f[i]);
            }
            acc += reweighted_expectation_raw(&lw, &fs);
        }
        let mean = acc / batches as f64;
        let se = (var1 / (n as f64 * batches as f64)).sqrt();
        assert!((mean - q).abs() <= 3.0 * se, "{mean} vs {q} se {se}");
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(
            reweighted_expectation(&[0.0], &[0.0], &[1.0]),
            Err(EstimatorError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn underflow_reported() {
        let log_pg = [0.0, 0.0];
        let log_ptb = [f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(matches!(
            reweighted_expectation(&log_pg, &log_ptb, &[1.0, 1.0]),
            Err(EstimatorError::AllZeroWeights)
        ));
    }
}

//! Central finite-difference gradient checks.
//!
//! The differences are computed directly from loss re-evaluations and never
//! touch the tape's backward pass, so they serve as an independent oracle for
//! every gradient in the crate.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Worst relative error between an analytic gradient and central differences,
/// restricted to coordinates with |analytic| > `floor`.
pub fn max_rel_error(
    analytic: &[f64],
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    floor: f64,
) -> f64 {
    let fd = central_diff(f, x, h);
    let mut worst = 0.0f64;
    for (g, d) in analytic.iter().zip(fd.iter()) {
        if g.abs() > floor {
            let rel = (g - d).abs() / g.abs().max(d.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

/// log|det J| of a map R^d → R^d, with J assembled column-by-column from
/// central differences and reduced by LU elimination with partial pivoting.
pub fn jacobian_logdet(f: impl Fn(&[f64], &mut [f64]), x: &[f64], h: f64) -> f64 {
    let d = x.len();
    let mut jac = vec![0.0; d * d]; // row-major
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for j in 0..d {
        let orig = xp[j];
        xp[j] = orig + h;
        f(&xp, &mut fp);
        xp[j] = orig - h;
        f(&xp, &mut fm);
        xp[j] = orig;
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    log_abs_det(&mut jac, d)
}

/// log|det| via in-place LU with partial pivoting.
pub fn log_abs_det(a: &mut [f64], d: usize) -> f64 {
    let mut log_det = 0.0;
    for k in 0..d {
        let mut piv = k;
        for i in k + 1..d {
            if a[i * d + k].abs() > a[piv * d + k].abs() {
                piv = i;
            }
        }
        if piv != k {
            for j in 0..d {
                a.swap(k * d + j, piv * d + j);
            }
        }
        let pivot = a[k * d + k];
        assert!(pivot != 0.0, "singular jacobian");
        log_det += pivot.abs().ln();
        for i in k + 1..d {
            let factor = a[i * d + k] / pivot;
            for j in k..d {
                a[i * d + j] -= factor * a[k * d + j];
            }
        }
    }
    log_det
}

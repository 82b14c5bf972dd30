//! Python bindings for the boltzlab toolkit.
//!
//! Exposes the flow model, the double-well target, the four losses (values
//! and gradients), the importance-sampling estimators, the parallel-tempering
//! sampler, and the training loops. Batches cross the boundary as plain
//! lists of floats (row-major), which is plenty for desk-scale work.
//!
//!     import boltzlab_py as bl
//!     dw = bl.DoubleWell(dim=12)
//!     flow = bl.Flow(dim=12, blocks=8, hidden=32, seed=1)
//!     xs, logps = flow.sample(1024, seed=7)

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use boltzlab::autodiff::Tape;
use boltzlab::estimators;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::{self, Batch, LossConfig, LossKind};
use boltzlab::pitfalls;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::{DoubleWell as CoreDoubleWell, EnergyModel};
use boltzlab::trainer::{self, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flatten(rows: &[Vec<f64>], dim: usize) -> PyResult<Vec<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(PyValueError::new_err(format!(
                "expected rows of length {dim}, got {}",
                r.len()
            )));
        }
        flat.extend_from_slice(r);
    }
    Ok(flat)
}

fn unflatten(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(|c| c.to_vec()).collect()
}

/// Double-well target density with optional per-term energy capping.
#[pyclass(name = "DoubleWell", skip_from_py_object)]
#[derive(Clone)]
struct PyDoubleWell {
    inner: CoreDoubleWell,
}

#[pymethods]
impl PyDoubleWell {
    #[new]
    #[pyo3(signature = (dim=12, a=1.0, b=6.0, c=1.0, sigma_wide=10.0, cap_threshold=None))]
    fn new(
        dim: usize,
        a: f64,
        b: f64,
        c: f64,
        sigma_wide: f64,
        cap_threshold: Option<f64>,
    ) -> PyResult<Self> {
        let mut dw = CoreDoubleWell::with_coefficients(dim, a, b, c, sigma_wide);
        if let Some(t) = cap_threshold {
            dw = dw.with_cap(t).map_err(value_err)?;
        }
        Ok(PyDoubleWell { inner: dw })
    }

    /// βU_B(x); log p̃_B(x) = −energy(x).
    fn energy(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err("dimension mismatch"));
        }
        Ok(self.inner.energy(&x))
    }

    fn energy_batch(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let flat = flatten(&x, self.inner.dim())?;
        Ok(boltzlab::targets::energy_batch(
            &self.inner,
            &flat,
            x.len(),
        ))
    }

    /// Barrier-top location of the bimodal coordinate.
    fn saddle(&self) -> f64 {
        self.inner.extrema().saddle
    }

    fn minima(&self) -> (f64, f64) {
        let e = self.inner.extrema();
        (e.left_min, e.right_min)
    }

    /// Quadrature mass fraction of the minor mode (never hard-coded).
    fn minor_mode_ratio(&self) -> f64 {
        self.inner.minor_mode_ratio()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

/// Affine coupling normalizing flow over a Gaussian base.
#[pyclass(name = "Flow")]
struct PyFlow {
    inner: FlowModel,
}

#[pymethods]
impl PyFlow {
    #[new]
    #[pyo3(signature = (dim, blocks=8, hidden=32, sigma=1.0, scale_clamp=4.0, celu_alpha=1.0, seed=0))]
    fn new(
        dim: usize,
        blocks: usize,
        hidden: usize,
        sigma: f64,
        scale_clamp: f64,
        celu_alpha: f64,
        seed: u64,
    ) -> Self {
        let cfg = FlowConfig {
            dim,
            blocks,
            hidden,
            sigma,
            scale_clamp,
            celu_alpha,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyFlow {
            inner: FlowModel::init(cfg, &mut rng),
        }
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Sample n points: returns (points, log_probs).
    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, x, log_pg) = self.inner.sample_batch(n, &mut rng).map_err(runtime_err)?;
        Ok((unflatten(&x, self.inner.dim()), log_pg))
    }

    /// G: latent batch → (data batch, per-sample log|det ∂G/∂z|).
    fn generate(&self, z: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = self.inner.dim();
        let mut xs = Vec::with_capacity(z.len());
        let mut lds = Vec::with_capacity(z.len());
        let mut x = vec![0.0; d];
        for row in &z {
            if row.len() != d {
                return Err(PyValueError::new_err("dimension mismatch"));
            }
            lds.push(self.inner.generate_one(row, &mut x).map_err(runtime_err)?);
            xs.push(x.clone());
        }
        Ok((xs, lds))
    }

    /// F: data batch → (latent batch, per-sample log|det ∂F/∂x|).
    fn invert(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = self.inner.dim();
        let mut zs = Vec::with_capacity(x.len());
        let mut lds = Vec::with_capacity(x.len());
        let mut z = vec![0.0; d];
        for row in &x {
            if row.len() != d {
                return Err(PyValueError::new_err("dimension mismatch"));
            }
            lds.push(self.inner.invert_one(row, &mut z).map_err(runtime_err)?);
            zs.push(z.clone());
        }
        Ok((zs, lds))
    }

    fn log_prob(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let d = self.inner.dim();
        x.iter()
            .map(|row| {
                if row.len() != d {
                    return Err(PyValueError::new_err("dimension mismatch"));
                }
                self.inner.log_prob_one(row).map_err(runtime_err)
            })
            .collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner
            .save(std::path::Path::new(path))
            .map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyFlow {
            inner: FlowModel::load(std::path::Path::new(path)).map_err(runtime_err)?,
        })
    }

    /// Value and parameter gradient of one of the four losses at the current
    /// parameters. `kind` ∈ {"klz", "klx", "klz_df", "l2_masked"}; klz and
    /// klx take raw points/latents, the detached losses take generated
    /// points.
    #[pyo3(signature = (kind, points, target, detach_k=true, apply_mask=true, self_normalize=true))]
    fn loss_and_grad(
        &self,
        kind: &str,
        points: Vec<Vec<f64>>,
        target: &PyDoubleWell,
        detach_k: bool,
        apply_mask: bool,
        self_normalize: bool,
    ) -> PyResult<(f64, Vec<f64>)> {
        let kind = LossKind::parse(kind)
            .ok_or_else(|| PyValueError::new_err("kind must be klz|klx|klz_df|l2_masked"))?;
        let n = points.len();
        let d = self.inner.dim();
        let flat = flatten(&points, d)?;
        let cfg = LossConfig {
            kind,
            detach_k,
            apply_mask,
            self_normalize,
        };
        let mut tape = Tape::new();
        let staged = self.inner.stage(&mut tape);
        let loss = match kind {
            LossKind::Klz => losses::klz_loss(&mut tape, &staged, &flat, n).map_err(runtime_err)?,
            LossKind::Klx => losses::klx_loss(&mut tape, &staged, &flat, n, &target.inner)
                .map_err(runtime_err)?,
            LossKind::KlzDf | LossKind::L2Masked => {
                let log_pg: Vec<f64> = points
                    .iter()
                    .map(|row| self.inner.log_prob_one(row).map_err(runtime_err))
                    .collect::<PyResult<_>>()?;
                let log_ptb: Vec<f64> =
                    points.iter().map(|row| -target.inner.energy(row)).collect();
                let batch =
                    Batch::new(flat.clone(), n, d, None, log_pg, log_ptb).map_err(runtime_err)?;
                match kind {
                    LossKind::KlzDf => {
                        losses::klz_df_loss(&mut tape, &staged, &batch, &cfg)
                            .map_err(runtime_err)?
                            .0
                    }
                    _ => losses::l2_masked_loss(&mut tape, &staged, &batch, &cfg)
                        .map_err(runtime_err)?,
                }
            }
        };
        let grad = tape
            .gradient(loss, staged.param_leaves())
            .map_err(runtime_err)?;
        Ok((tape.scalar(loss), grad))
    }

    /// Data-dependent pre-training on the given points. Returns the metrics
    /// records as key=value lines.
    #[pyo3(signature = (data, target, iters, batch_size=256, learning_rate=1e-3, seed=0, eval_every=100, n_eval=4096))]
    #[allow(clippy::too_many_arguments)]
    fn pretrain(
        &mut self,
        data: Vec<Vec<f64>>,
        target: &PyDoubleWell,
        iters: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
        eval_every: usize,
        n_eval: usize,
    ) -> PyResult<Vec<String>> {
        let d = self.inner.dim();
        let flat = flatten(&data, d)?;
        let dataset = boltzlab::sampler::Dataset {
            dim: d,
            count: data.len(),
            target_id: "python".into(),
            config_hash: 0,
            seed,
            data: flat,
        };
        let cfg = TrainConfig {
            iters,
            batch_size,
            learning_rate,
            seed,
            eval_every,
            n_eval,
            ..TrainConfig::desk(iters, seed, target.inner.extrema().saddle)
        };
        let result = trainer::pretrain(&mut self.inner, &dataset, &target.inner, &cfg)
            .map_err(runtime_err)?;
        if let Some(a) = result.aborted {
            return Err(PyRuntimeError::new_err(format!(
                "aborted at iteration {}: {}",
                a.iter, a.reason
            )));
        }
        Ok(result.metrics.iter().map(|m| m.to_line()).collect())
    }

    /// Data-free fine-tuning with klx, klz_df, or l2_masked.
    #[pyo3(signature = (target, iters, loss="l2_masked", batch_size=256, learning_rate=1e-4, seed=0, eval_every=100, n_eval=4096, detach_k=true, apply_mask=true, self_normalize=true))]
    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &mut self,
        target: &PyDoubleWell,
        iters: usize,
        loss: &str,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
        eval_every: usize,
        n_eval: usize,
        detach_k: bool,
        apply_mask: bool,
        self_normalize: bool,
    ) -> PyResult<Vec<String>> {
        let kind = LossKind::parse(loss)
            .ok_or_else(|| PyValueError::new_err("loss must be klx|klz_df|l2_masked"))?;
        if kind == LossKind::Klz {
            return Err(PyValueError::new_err(
                "klz needs reference data; use pretrain",
            ));
        }
        let cfg = TrainConfig {
            iters,
            batch_size,
            learning_rate,
            seed,
            eval_every,
            n_eval,
            loss: LossConfig {
                kind,
                detach_k,
                apply_mask,
                self_normalize,
            },
            ..TrainConfig::desk(iters, seed, target.inner.extrema().saddle)
        };
        let result =
            trainer::finetune(&mut self.inner, &target.inner, &cfg).map_err(runtime_err)?;
        if let Some(a) = result.aborted {
            return Err(PyRuntimeError::new_err(format!(
                "aborted at iteration {}: {}",
                a.iter, a.reason
            )));
        }
        Ok(result.metrics.iter().map(|m| m.to_line()).collect())
    }
}

/// Parallel-tempered Metropolis-Hastings samples from a target.
#[pyfunction]
#[pyo3(signature = (target, total_samples, seed=0, burn_in=2000, thinning=5))]
fn pt_sample(
    target: &PyDoubleWell,
    total_samples: usize,
    seed: u64,
    burn_in: usize,
    thinning: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = PtConfig {
        burn_in,
        thinning,
        ..PtConfig::default_ladder(total_samples, seed)
    };
    let (ds, _) = pt_run(&cfg, &target.inner).map_err(value_err)?;
    Ok(unflatten(&ds.data, ds.dim))
}

/// Self-normalized importance-sampling report as a dict-like tuple:
/// (q_hat, ess, empirical_variance, log_z_hat).
#[pyfunction]
fn reweighted_expectation(
    log_pg: Vec<f64>,
    log_ptb: Vec<f64>,
    f: Vec<f64>,
) -> PyResult<(f64, f64, f64, f64)> {
    let rep = estimators::reweighted_expectation(&log_pg, &log_ptb, &f).map_err(value_err)?;
    Ok((
        rep.q_hat,
        rep.ess,
        rep.empirical_variance,
        rep.log_z_hat.unwrap_or(f64::NAN),
    ))
}

#[pyfunction]
fn estimate_log_z(log_pg: Vec<f64>, log_ptb: Vec<f64>) -> PyResult<f64> {
    estimators::estimate_log_z(&log_pg, &log_ptb).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (log_pg, log_ptb, f=None))]
fn variance_loss(log_pg: Vec<f64>, log_ptb: Vec<f64>, f: Option<Vec<f64>>) -> f64 {
    estimators::variance_loss(&log_pg, &log_ptb, f.as_deref())
}

#[pyfunction]
fn free_energy_difference(
    log_pg: Vec<f64>,
    log_ptb: Vec<f64>,
    u_c_minus_u_b: Vec<f64>,
) -> PyResult<f64> {
    estimators::free_energy_difference(&log_pg, &log_ptb, &u_c_minus_u_b).map_err(value_err)
}

/// Minibatch KL with both sides normalized over the batch (Gibbs-safe).
#[pyfunction]
fn normalized_minibatch_kl(ptb: Vec<f64>, pg: Vec<f64>) -> PyResult<f64> {
    if ptb.len() != pg.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(pitfalls::normalized_minibatch_kl(&ptb, &pg))
}

/// Integrate dq/dt = p/q on a grid; returns q at the time horizon.
#[pyfunction]
fn unconstrained_kl_flow(
    grid: Vec<f64>,
    q0: Vec<f64>,
    p: Vec<f64>,
    t_horizon: f64,
    dt: f64,
) -> PyResult<Vec<f64>> {
    let gd = pitfalls::GridDensity::new(grid, q0, p).map_err(value_err)?;
    pitfalls::unconstrained_kl_flow(&gd, t_horizon, dt).map_err(value_err)
}

#[pymodule]
fn boltzlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDoubleWell>()?;
    m.add_class::<PyFlow>()?;
    m.add_function(wrap_pyfunction!(pt_sample, m)?)?;
    m.add_function(wrap_pyfunction!(reweighted_expectation, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_log_z, m)?)?;
    m.add_function(wrap_pyfunction!(variance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(free_energy_difference, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_minibatch_kl, m)?)?;
    m.add_function(wrap_pyfunction!(unconstrained_kl_flow, m)?)?;
    Ok(())
}

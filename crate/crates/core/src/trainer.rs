//! Optimization loops: data-dependent pre-training with the klz loss,
//! data-free fine-tuning with any of the data-free losses, plus evaluation
//! diagnostics (minor-mode fraction, K tracking, energy traces).
//!
//! Determinism contract: (seed, config, dataset) fully determine every
//! recorded metric. All randomness flows from ChaCha8 streams derived from
//! the config seed; wall-clock timings are kept out of the metrics records
//! written to disk and only surface on stderr.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::estimators;
use crate::flow::FlowModel;
use crate::losses::{self, Batch, LossConfig, LossKind};
use crate::pitfalls::ControlVariate;
use crate::sampler::Dataset;
use crate::targets::{energy_batch, EnergyModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset dim {dataset} does not match model dim {model}")]
    DimMismatch { dataset: usize, model: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("n_eval must be at least 1000, got {0}")]
    EvalTooSmall(usize),
    #[error("batch size must be ≥ 1")]
    BadBatchSize,
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
    #[error(transparent)]
    Estimator(#[from] crate::estimators::EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn default_adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Optimizer {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Shared training knobs for one phase.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub n_eval: usize,
    /// x₁ cutoff for minor-mode counting (the saddle point for the double
    /// well).
    pub mode_threshold: f64,
    /// Loss selection; only consulted by [`finetune`].
    pub loss: LossConfig,
    /// Variance-reduction wrapper around the klz_df gradient (score-function
    /// control variate with running K*). Costs one backward pass per sample.
    pub trick_enabled: bool,
    /// Print progress lines (with wall-clock timings) to stderr.
    pub progress: bool,
}

impl TrainConfig {
    pub fn desk(iters: usize, seed: u64, mode_threshold: f64) -> Self {
        TrainConfig {
            iters,
            batch_size: 256,
            optimizer: OptimizerKind::default_adam(),
            learning_rate: 1e-3,
            seed,
            eval_every: 100,
            n_eval: 4096,
            mode_threshold,
            loss: LossConfig::default(),
            trick_enabled: false,
            progress: false,
        }
    }
}

/// One evaluation record. `wall_ms` is informational only and never written
/// into the deterministic metrics stream.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss_value: f64,
    pub minor_mode_fraction: f64,
    pub mean_ub: f64,
    pub k_estimate: f64,
    pub ess: f64,
    pub log_z_hat: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// Stable key=value line; field names are part of the public contract.
    pub fn to_line(&self) -> String {
        format!(
            "iter={} loss_value={} minor_mode_fraction={} mean_UB={} K_estimate={} ess={} logZ_hat={} grad_norm={}",
            self.iter,
            self.loss_value,
            self.minor_mode_fraction,
            self.mean_ub,
            self.k_estimate,
            self.ess,
            self.log_z_hat,
            self.grad_norm
        )
    }
}

/// Why a run stopped early, with the offending batch for diagnosis.
#[derive(Debug, Clone)]
pub struct AbortInfo {
    pub iter: usize,
    pub reason: String,
    pub batch: Option<Batch>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainResult {
    pub metrics: Vec<MetricsRecord>,
    /// Per-iteration loss values.
    pub loss_trace: Vec<f64>,
    /// Per-iteration minibatch K estimates (fine-tuning only).
    pub k_trace: Vec<f64>,
    /// Per-iteration mean U_B over the generated batch (fine-tuning only).
    pub mean_ub_trace: Vec<f64>,
    /// Set when the run aborted on a non-finite loss; the model keeps the
    /// last parameters that evaluated to a finite loss.
    pub aborted: Option<AbortInfo>,
}

/// Point-in-time diagnostics of a model against a target.
pub fn evaluate(
    model: &FlowModel,
    target: &dyn EnergyModel,
    n_eval: usize,
    mode_threshold: f64,
    rng: &mut impl Rng,
) -> Result<MetricsRecord, TrainError> {
    if n_eval < 1000 {
        return Err(TrainError::EvalTooSmall(n_eval));
    }
    let (_, x, log_pg) = model.sample_batch(n_eval, rng)?;
    let d = model.dim();
    let energies = energy_batch(target, &x, n_eval);
    let log_ptb: Vec<f64> = energies.iter().map(|e| -e).collect();
    let minor = (0..n_eval).filter(|i| x[i * d] > mode_threshold).count() as f64
        / n_eval as f64;
    let mean_ub = energies.iter().sum::<f64>() / n_eval as f64;
    let k = log_ptb
        .iter()
        .zip(log_pg.iter())
        .map(|(b, g)| b - g)
        .sum::<f64>()
        / n_eval as f64;
    // evaluation never fails on bad numbers; it reports them
    let (ess, log_z_hat) =
        match estimators::reweighted_expectation(&log_pg, &log_ptb, &vec![1.0; n_eval]) {
            Ok(rep) => (rep.ess, rep.log_z_hat.unwrap_or(f64::NAN)),
            Err(_) => (f64::NAN, f64::NAN),
        };
    Ok(MetricsRecord {
        iter: 0,
        loss_value: f64::NAN,
        minor_mode_fraction: minor,
        mean_ub,
        k_estimate: k,
        ess,
        log_z_hat,
        grad_norm: f64::NAN,
        wall_ms: 0.0,
    })
}

fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Data-dependent pre-training with the klz loss over shuffled minibatches.
pub fn pretrain(
    model: &mut FlowModel,
    dataset: &Dataset,
    target: &dyn EnergyModel,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if dataset.count == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.dim != model.dim() {
        return Err(TrainError::DimMismatch {
            dataset: dataset.dim,
            model: model.dim(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::BadBatchSize);
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_rng.set_stream(10);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(11);

    let d = model.dim();
    let mut order: Vec<usize> = (0..dataset.count).collect();
    let mut cursor = dataset.count; // force a shuffle on first use
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.param_count());
    let mut result = TrainResult::default();
    let mut batch_x = vec![0.0; cfg.batch_size * d];
    let mut prev_params = model.params().to_vec();
    let started = std::time::Instant::now();

    record_eval(model, target, cfg, &mut eval_rng, 0, f64::NAN, f64::NAN, started, &mut result)?;

    for iter in 0..cfg.iters {
        for slot in 0..cfg.batch_size {
            if cursor >= dataset.count {
                shuffle(&mut order, &mut train_rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            batch_x[slot * d..(slot + 1) * d].copy_from_slice(dataset.point(idx));
        }
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let (loss_value, grad) = match losses::klz_loss(&mut tape, &staged, &batch_x, cfg.batch_size)
        {
            Ok(loss) => {
                let v = tape.scalar(loss);
                match tape.gradient(loss, staged.param_leaves()) {
                    Ok(g) => (v, g),
                    Err(e) => {
                        model.set_params(&prev_params);
                        result.aborted = Some(AbortInfo {
                            iter,
                            reason: format!("backward failed: {e}"),
                            batch: None,
                        });
                        return Ok(result);
                    }
                }
            }
            Err(e) => {
                model.set_params(&prev_params);
                result.aborted = Some(AbortInfo {
                    iter,
                    reason: format!("loss failed: {e}"),
                    batch: None,
                });
                return Ok(result);
            }
        };
        if !loss_value.is_finite() {
            model.set_params(&prev_params);
            result.aborted = Some(AbortInfo {
                iter,
                reason: format!("non-finite loss {loss_value}"),
                batch: None,
            });
            return Ok(result);
        }
        result.loss_trace.push(loss_value);
        prev_params.copy_from_slice(model.params());
        opt.step(model.params_mut(), &grad);

        let last = iter + 1 == cfg.iters;
        if (iter + 1) % cfg.eval_every == 0 || last {
            record_eval(
                model,
                target,
                cfg,
                &mut eval_rng,
                iter + 1,
                loss_value,
                grad_norm(&grad),
                started,
                &mut result,
            )?;
        }
    }
    Ok(result)
}

/// Data-free fine-tuning. Per step: sample z, generate (and detach) the batch
/// where the loss requires it, compute the loss, step the optimizer.
pub fn finetune(
    model: &mut FlowModel,
    target: &dyn EnergyModel,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::BadBatchSize);
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_rng.set_stream(20);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(21);

    let d = model.dim();
    let n = cfg.batch_size;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.param_count());
    let mut result = TrainResult::default();
    let mut prev_params = model.params().to_vec();
    let mut cv = ControlVariate::new(model.param_count(), 0.99);
    let started = std::time::Instant::now();

    record_eval(model, target, cfg, &mut eval_rng, 0, f64::NAN, f64::NAN, started, &mut result)?;

    for iter in 0..cfg.iters {
        // detached generated batch (also used for the per-step diagnostics)
        let (z, x, log_pg) = model.sample_batch(n, &mut train_rng)?;
        let energies = energy_batch(target, &x, n);
        let log_ptb: Vec<f64> = energies.iter().map(|e| -e).collect();
        let batch = match Batch::new(x, n, d, Some(z), log_pg, log_ptb) {
            Ok(b) => b,
            Err(e) => {
                model.set_params(&prev_params);
                result.aborted = Some(AbortInfo {
                    iter,
                    reason: format!("batch construction failed: {e}"),
                    batch: None,
                });
                return Ok(result);
            }
        };
        result.k_trace.push(losses::track_k(&batch));
        result
            .mean_ub_trace
            .push(energies.iter().sum::<f64>() / n as f64);

        let step = finetune_step(model, target, cfg, &batch, &mut cv);
        let (loss_value, grad) = match step {
            Ok(pair) => pair,
            Err(e) => {
                model.set_params(&prev_params);
                result.aborted = Some(AbortInfo {
                    iter,
                    reason: format!("loss failed: {e}"),
                    batch: Some(batch),
                });
                return Ok(result);
            }
        };
        if !loss_value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            model.set_params(&prev_params);
            result.aborted = Some(AbortInfo {
                iter,
                reason: format!("non-finite loss {loss_value} or gradient"),
                batch: Some(batch),
            });
            return Ok(result);
        }
        result.loss_trace.push(loss_value);
        prev_params.copy_from_slice(model.params());
        opt.step(model.params_mut(), &grad);

        let last = iter + 1 == cfg.iters;
        if (iter + 1) % cfg.eval_every == 0 || last {
            record_eval(
                model,
                target,
                cfg,
                &mut eval_rng,
                iter + 1,
                loss_value,
                grad_norm(&grad),
                started,
                &mut result,
            )?;
        }
    }
    Ok(result)
}

fn finetune_step(
    model: &FlowModel,
    target: &dyn EnergyModel,
    cfg: &TrainConfig,
    batch: &Batch,
    cv: &mut ControlVariate,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    match cfg.loss.kind {
        LossKind::Klx => {
            let z = batch.z.as_ref().expect("generated batch has latents");
            let loss = losses::klx_loss(&mut tape, &staged, z, batch.n, target)?;
            let g = tape
                .gradient(loss, staged.param_leaves())
                .map_err(losses::LossError::from)?;
            Ok((tape.scalar(loss), g))
        }
        LossKind::KlzDf => {
            if cfg.trick_enabled {
                return klz_df_stabilized(model, cfg, batch, cv);
            }
            let (loss, report) = losses::klz_df_loss(&mut tape, &staged, batch, &cfg.loss)?;
            if cfg.progress && !report.weight_overflow.is_empty() {
                eprintln!(
                    "warning: {} importance weights exceeded |log w| > 30",
                    report.weight_overflow.len()
                );
            }
            let g = tape
                .gradient(loss, staged.param_leaves())
                .map_err(losses::LossError::from)?;
            Ok((tape.scalar(loss), g))
        }
        LossKind::L2Masked => {
            let loss = losses::l2_masked_loss(&mut tape, &staged, batch, &cfg.loss)?;
            let g = tape
                .gradient(loss, staged.param_leaves())
                .map_err(losses::LossError::from)?;
            Ok((tape.scalar(loss), g))
        }
        LossKind::Klz => {
            let loss = losses::klz_loss(&mut tape, &staged, &batch.x, batch.n)?;
            let g = tape
                .gradient(loss, staged.param_leaves())
                .map_err(losses::LossError::from)?;
            Ok((tape.scalar(loss), g))
        }
    }
}

/// klz_df gradient with the stabilizing control variate: the loss gradient is
/// (1/n) Σᵢ fᵢ·∇log p_G(xᵢ) with detached fᵢ = −w̃ᵢ, and adding
/// K*·(1/n) Σᵢ ∇log p_G(xᵢ) leaves the expectation unchanged because
/// E_{p_G}[∇log p_G] = 0. K* comes from running means over *past* batches.
fn klz_df_stabilized(
    model: &FlowModel,
    cfg: &TrainConfig,
    batch: &Batch,
    cv: &mut ControlVariate,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let n = batch.n;
    // detached weights, normalized by batch mean as in the plain loss
    let log_w: Vec<f64> = batch
        .log_ptb
        .iter()
        .zip(batch.log_pg.iter())
        .map(|(b, g)| b - g)
        .collect();
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_mean = m + (log_w.iter().map(|l| (l - m).exp()).sum::<f64>() / n as f64).ln();
    let weights: Vec<f64> = if cfg.loss.self_normalize {
        log_w.iter().map(|l| (l - log_mean).exp()).collect()
    } else {
        log_w.iter().map(|l| l.exp()).collect()
    };

    let mut roots = Vec::with_capacity(n);
    let mut loss_value = 0.0;
    // klz_df per-sample term U_N(F)/2σ² − logdet_F equals −log p_G minus the
    // base normalization constant, so the score ∇log p_G carries the whole
    // gradient and the value only shifts
    let norm_const = model.dim() as f64 * model.base().log_norm_const();
    for i in 0..n {
        let xv = tape.leaf(batch.point(i));
        let lp = staged.log_prob(&mut tape, xv)?;
        loss_value += weights[i] * (-tape.scalar(lp) - norm_const) / n as f64;
        roots.push(lp);
    }
    let scores = tape
        .per_sample_gradients(&roots, staged.param_leaves())
        .map_err(losses::LossError::from)?;
    let f: Vec<f64> = weights.iter().map(|w| -w).collect();
    let grad = crate::pitfalls::stabilized_gradient(&scores, &f, cv);
    cv.update(&scores, &f);
    Ok((loss_value, grad))
}

#[allow(clippy::too_many_arguments)]
fn record_eval(
    model: &FlowModel,
    target: &dyn EnergyModel,
    cfg: &TrainConfig,
    eval_rng: &mut ChaCha8Rng,
    iter: usize,
    loss_value: f64,
    gnorm: f64,
    started: std::time::Instant,
    result: &mut TrainResult,
) -> Result<(), TrainError> {
    let mut rec = evaluate(model, target, cfg.n_eval, cfg.mode_threshold, eval_rng)?;
    rec.iter = iter;
    rec.loss_value = loss_value;
    rec.grad_norm = gnorm;
    rec.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    if cfg.progress {
        eprintln!("[{:>8.1} ms] {}", rec.wall_ms, rec.to_line());
    }
    result.metrics.push(rec);
    Ok(())
}

/// Fisher–Yates with the train stream; avoids pulling in a shuffle API whose
/// draw pattern might change under us.
fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Windowed means of a trace; used by the δK diagnostic.
pub fn windowed_means(trace: &[f64], window: usize) -> Vec<f64> {
    trace
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Standard deviations of consecutive windows, matching [`windowed_means`].
pub fn windowed_stds(trace: &[f64], window: usize) -> Vec<f64> {
    trace
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| {
            let m = c.iter().sum::<f64>() / window as f64;
            (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / window as f64).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::sampler::{pt_run, PtConfig};
    use crate::targets::DoubleWell;

    fn small_model(seed: u64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlowModel::init(
            FlowConfig {
                dim: 2,
                blocks: 4,
                hidden: 8,
                sigma: 1.0,
                scale_clamp: 4.0,
                celu_alpha: 1.0,
            },
            &mut rng,
        )
    }

    fn base_energy_dataset(n: usize, seed: u64) -> Dataset {
        // reference data drawn from the standard normal base itself
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 2)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Dataset {
            dim: 2,
            count: n,
            target_id: "base".into(),
            config_hash: 0,
            seed,
            data,
        }
    }

    struct BaseEnergy;
    impl EnergyModel for BaseEnergy {
        fn dim(&self) -> usize {
            2
        }
        fn energy(&self, x: &[f64]) -> f64 {
            x.iter().map(|v| v * v).sum::<f64>() / 2.0 + (2.0 * std::f64::consts::PI).ln()
        }
        fn energy_tape(
            &self,
            tape: &mut Tape,
            x: crate::autodiff::Value,
        ) -> Result<crate::autodiff::Value, crate::autodiff::AutodiffError> {
            let sq = tape.square(x);
            let s = tape.sum(sq);
            let s = tape.scale(s, 0.5);
            Ok(tape.add_const(s, (2.0 * std::f64::consts::PI).ln()))
        }
    }

    #[test]
    fn pretrain_on_base_data_starts_near_optimum() {
        // identity-initialized flow on base-distribution data: the starting
        // gradient norm is far below a perturbed model's
        let dataset = base_energy_dataset(2048, 1);
        let cfg = TrainConfig {
            iters: 1,
            batch_size: 256,
            n_eval: 1000,
            ..TrainConfig::desk(1, 2, 0.0)
        };
        let mut m = small_model(3);
        let r = pretrain(&mut m, &dataset, &BaseEnergy, &cfg).unwrap();
        let g0 = r.metrics.last().unwrap().grad_norm;

        let mut mp = small_model(3);
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in mp.params_mut() {
            *p += rng.random_range(-0.4..0.4);
        }
        let rp = pretrain(&mut mp, &dataset, &BaseEnergy, &cfg).unwrap();
        let g1 = rp.metrics.last().unwrap().grad_norm;
        assert!(g0 < 0.1 * g1, "identity-start grad {g0} vs perturbed {g1}");
    }

    #[test]
    fn pretrain_is_deterministic() {
        let dw = DoubleWell::with_coefficients(2, 1.0, 6.0, 1.0, 10.0);
        let pt = PtConfig::default_ladder(4000, 3);
        let (dataset, _) = pt_run(&pt, &dw).unwrap();
        let cfg = TrainConfig {
            iters: 40,
            batch_size: 64,
            eval_every: 10,
            n_eval: 1000,
            ..TrainConfig::desk(40, 7, dw.extrema().saddle)
        };
        let mut m1 = small_model(9);
        let r1 = pretrain(&mut m1, &dataset, &dw, &cfg).unwrap();
        let mut m2 = small_model(9);
        let r2 = pretrain(&mut m2, &dataset, &dw, &cfg).unwrap();
        assert_eq!(m1.params(), m2.params());
        let lines1: Vec<String> = r1.metrics.iter().map(|m| m.to_line()).collect();
        let lines2: Vec<String> = r2.metrics.iter().map(|m| m.to_line()).collect();
        assert_eq!(lines1, lines2);
    }

    #[test]
    fn pretrain_loss_decreases_in_windows() {
        let dw = DoubleWell::with_coefficients(2, 1.0, 6.0, 1.0, 10.0);
        let pt = PtConfig::default_ladder(8000, 13);
        let (dataset, _) = pt_run(&pt, &dw).unwrap();
        let cfg = TrainConfig {
            iters: 600,
            batch_size: 64,
            eval_every: 200,
            n_eval: 1000,
            ..TrainConfig::desk(600, 17, dw.extrema().saddle)
        };
        let mut m = small_model(19);
        let r = pretrain(&mut m, &dataset, &dw, &cfg).unwrap();
        assert!(r.aborted.is_none());
        let means = windowed_means(&r.loss_trace, 200);
        for w in means.windows(2) {
            assert!(
                w[1] <= w[0] + 0.05 * w[0].abs(),
                "windowed loss increased: {means:?}"
            );
        }
    }

    #[test]
    fn finetune_zero_iterations_only_initial_eval() {
        let dw = DoubleWell::with_coefficients(2, 1.0, 6.0, 1.0, 10.0);
        let mut m = small_model(21);
        let before = m.params().to_vec();
        let cfg = TrainConfig {
            iters: 0,
            n_eval: 1000,
            learning_rate: 1e-4,
            ..TrainConfig::desk(0, 23, dw.extrema().saddle)
        };
        let r = finetune(&mut m, &dw, &cfg).unwrap();
        assert_eq!(m.params(), &before[..]);
        assert_eq!(r.metrics.len(), 1);
        assert_eq!(r.metrics[0].iter, 0);
    }

    #[test]
    fn finetune_l2_runs_and_is_deterministic() {
        let dw = DoubleWell::with_coefficients(2, 1.0, 6.0, 1.0, 10.0);
        let saddle = dw.extrema().saddle;
        let run = || {
            let mut m = small_model(31);
            let cfg = TrainConfig {
                iters: 50,
                batch_size: 32,
                eval_every: 25,
                n_eval: 1000,
                learning_rate: 1e-4,
                ..TrainConfig::desk(50, 37, saddle)
            };
            let r = finetune(&mut m, &dw, &cfg).unwrap();
            (m.params().to_vec(), r)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(p1, p2);
        assert!(r1.aborted.is_none());
        assert_eq!(r1.loss_trace, r2.loss_trace);
        assert_eq!(r1.k_trace, r2.k_trace);
    }

    #[test]
    fn evaluate_identity_flow_against_base() {
        // threshold 0 on a symmetric base → fraction 0.5 within 3 SE
        let m = small_model(41);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let rec = evaluate(&m, &BaseEnergy, 100_000, 0.0, &mut rng).unwrap();
        let se = (0.5 * 0.5 / 100_000.0f64).sqrt();
        assert!((rec.minor_mode_fraction - 0.5).abs() <= 3.0 * se);
        // p_G = p_B exactly: full effective sample size and logZ = 0
        assert!((rec.ess - 100_000.0).abs() < 1.0);
        assert!(rec.log_z_hat.abs() < 1e-10);
        assert!(rec.k_estimate.abs() < 1e-10);
    }

    #[test]
    fn evaluate_rejects_small_n() {
        let m = small_model(47);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            evaluate(&m, &BaseEnergy, 10, 0.0, &mut rng),
            Err(TrainError::EvalTooSmall(10))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_metrics() {
        let dw = DoubleWell::with_coefficients(2, 1.0, 6.0, 1.0, 10.0);
        let mut m = small_model(51);
        let cfg = TrainConfig {
            iters: 20,
            batch_size: 32,
            n_eval: 2000,
            learning_rate: 1e-4,
            ..TrainConfig::desk(20, 53, dw.extrema().saddle)
        };
        finetune(&mut m, &dw, &cfg).unwrap();
        let dir = std::env::temp_dir().join("boltzlab-trainer-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        m.save(&path).unwrap();
        let loaded = FlowModel::load(&path).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(99);
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let a = evaluate(&m, &dw, 1000, 0.0, &mut rng1).unwrap();
        let b = evaluate(&loaded, &dw, 1000, 0.0, &mut rng2).unwrap();
        assert_eq!(a.to_line(), b.to_line());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn stabilized_klz_df_step_runs() {
        let dw = DoubleWell::with_coefficients(2, 1.0, 6.0, 1.0, 10.0);
        let mut m = small_model(61);
        let cfg = TrainConfig {
            iters: 10,
            batch_size: 16,
            n_eval: 1000,
            learning_rate: 1e-4,
            loss: LossConfig {
                kind: LossKind::KlzDf,
                ..LossConfig::default()
            },
            trick_enabled: true,
            ..TrainConfig::desk(10, 63, dw.extrema().saddle)
        };
        let r = finetune(&mut m, &dw, &cfg).unwrap();
        assert!(r.aborted.is_none());
        assert_eq!(r.loss_trace.len(), 10);
        assert!(r.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn abort_restores_last_good_params_and_dumps_batch() {
        // a target whose energy blows up once x drifts: force non-finite loss
        struct Explosive;
        impl EnergyModel for Explosive {
            fn dim(&self) -> usize {
                2
            }
            fn energy(&self, x: &[f64]) -> f64 {
                // NaN once any coordinate leaves a tiny box
                if x.iter().any(|v| v.abs() > 0.05) {
                    f64::NAN
                } else {
                    0.0
                }
            }
            fn energy_tape(
                &self,
                tape: &mut Tape,
                _x: crate::autodiff::Value,
            ) -> Result<crate::autodiff::Value, crate::autodiff::AutodiffError> {
                Ok(tape.leaf_scalar(f64::NAN))
            }
        }
        let mut m = small_model(71);
        let cfg = TrainConfig {
            iters: 5,
            batch_size: 8,
            n_eval: 1000,
            learning_rate: 1e-4,
            loss: LossConfig {
                kind: LossKind::Klx,
                ..LossConfig::default()
            },
            ..TrainConfig::desk(5, 73, 0.0)
        };
        // evaluation itself tolerates NaN energies (means go NaN), but the
        // batch constructor rejects non-finite log p̃_B, producing an abort
        let r = finetune(&mut m, &Explosive, &cfg).unwrap();
        let abort = r.aborted.expect("must abort");
        assert_eq!(abort.iter, 0);
    }

    #[test]
    fn windowed_helpers() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(windowed_means(&xs, 5), vec![2.0, 7.0]);
        let stds = windowed_stds(&xs, 5);
        assert!((stds[0] - stds[1]).abs() < 1e-12);
    }
}

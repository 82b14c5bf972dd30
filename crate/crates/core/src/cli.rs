//! Command implementations behind the `boltzlab` binary.
//!
//! Every command writes a `resolved.cfg` artifact holding the fully resolved
//! configuration; re-running a command from that artifact reproduces all
//! outputs byte for byte. Exit codes: 0 success, 1 usage/config error,
//! 2 numerical abort (last-good checkpoint saved).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, DataFormat, ExperimentConfig};
use crate::flow::FlowModel;
use crate::losses::LossKind;
use crate::pitfalls::{self, ControlVariate, GridDensity, SoftmaxDensity};
use crate::sampler::{config_hash, pt_run, Dataset};
use crate::targets::energy_batch;
use crate::trainer::{self, TrainConfig, TrainResult};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("numerical abort at iteration {iter}: {reason} (checkpoint saved to {checkpoint})")]
    NumericalAbort {
        iter: usize,
        reason: String,
        checkpoint: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Sampler(#[from] crate::sampler::SamplerError),
    #[error("{0}")]
    Checkpoint(#[from] crate::flow::CheckpointError),
    #[error("{0}")]
    Train(#[from] trainer::TrainError),
    #[error("{0}")]
    Flow(#[from] crate::flow::FlowError),
    #[error("{0}")]
    Pitfall(#[from] crate::pitfalls::PitfallError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NumericalAbort { .. } => 2,
            _ => 1,
        }
    }
}

fn write_resolved(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.cfg"), cfg.resolved_text())?;
    Ok(())
}

pub fn dataset_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    match cfg.sampler_format {
        DataFormat::Text => out.join("dataset.txt"),
        DataFormat::Binary => out.join("dataset.bin"),
    }
}

/// `sample-data`: run parallel tempering, write the dataset and a sampling
/// report.
pub fn cmd_sample_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    write_resolved(cfg, out)?;
    let target = cfg.build_target()?;
    let pt = cfg.pt_config();
    let (mut dataset, report) = pt_run(&pt, &target)?;
    dataset.target_id = "double_well".into();
    dataset.config_hash = config_hash(&cfg.resolved_text());
    let path = dataset_path(cfg, out);
    match cfg.sampler_format {
        DataFormat::Text => dataset.save_text(&path)?,
        DataFormat::Binary => dataset.save_binary(&path)?,
    }

    let saddle = target.extrema().saddle;
    let minor = (0..dataset.count)
        .filter(|i| dataset.point(*i)[0] > saddle)
        .count() as f64
        / dataset.count.max(1) as f64;
    let mut rep = String::new();
    let _ = writeln!(rep, "samples {}", dataset.count);
    let _ = writeln!(rep, "dim {}", dataset.dim);
    let _ = writeln!(rep, "minor_mode_fraction {minor}");
    let _ = writeln!(rep, "quadrature_minor_mode_ratio {}", target.minor_mode_ratio());
    for (i, r) in report.acceptance_rates.iter().enumerate() {
        let _ = writeln!(rep, "acceptance_rate[T={}] {r}", pt.temperatures[i]);
    }
    for (i, r) in report.swap_rates.iter().enumerate() {
        let _ = writeln!(
            rep,
            "swap_rate[{}<->{}] {r}",
            pt.temperatures[i],
            pt.temperatures[i + 1]
        );
    }
    for w in &report.warnings {
        let _ = writeln!(rep, "warning {w}");
    }
    std::fs::write(out.join("sampling_report.txt"), rep)?;
    Ok(())
}

fn write_metrics(result: &TrainResult, path: &Path) -> Result<(), CliError> {
    let mut text = String::new();
    for rec in &result.metrics {
        let _ = writeln!(text, "{}", rec.to_line());
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn handle_abort(
    result: &TrainResult,
    model: &FlowModel,
    out: &Path,
    ckpt_name: &str,
) -> Result<(), CliError> {
    if let Some(abort) = &result.aborted {
        let ckpt = out.join(ckpt_name);
        model.save(&ckpt)?;
        if let Some(batch) = &abort.batch {
            let mut dump = String::new();
            let _ = writeln!(dump, "iter {}", abort.iter);
            let _ = writeln!(dump, "reason {}", abort.reason);
            for i in 0..batch.n {
                let row: Vec<String> =
                    batch.point(i).iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(
                    dump,
                    "x {} log_pg {:.16e} log_ptb {:.16e}",
                    row.join(" "),
                    batch.log_pg[i],
                    batch.log_ptb[i]
                );
            }
            std::fs::write(out.join("abort_batch.txt"), dump)?;
        }
        return Err(CliError::NumericalAbort {
            iter: abort.iter,
            reason: abort.reason.clone(),
            checkpoint: ckpt.display().to_string(),
        });
    }
    Ok(())
}

fn train_config(cfg: &ExperimentConfig, phase: LossKind, progress: bool) -> Result<TrainConfig, CliError> {
    let mode_threshold = cfg.resolved_mode_threshold()?;
    Ok(if phase == LossKind::Klz {
        TrainConfig {
            iters: cfg.resolved_pretrain_iters(),
            batch_size: cfg.pretrain_batch_size,
            optimizer: cfg.pretrain_optimizer,
            learning_rate: cfg.pretrain_learning_rate,
            seed: cfg.seed,
            eval_every: cfg.pretrain_eval_every,
            n_eval: cfg.pretrain_n_eval,
            mode_threshold,
            loss: crate::losses::LossConfig {
                kind: LossKind::Klz,
                ..cfg.loss_config()
            },
            trick_enabled: false,
            progress,
        }
    } else {
        TrainConfig {
            iters: cfg.finetune_iters,
            batch_size: cfg.finetune_batch_size,
            optimizer: cfg.finetune_optimizer,
            learning_rate: cfg.finetune_learning_rate,
            seed: cfg.seed,
            eval_every: cfg.finetune_eval_every,
            n_eval: cfg.finetune_n_eval,
            mode_threshold,
            loss: cfg.loss_config(),
            trick_enabled: cfg.finetune_trick_enabled,
            progress,
        }
    })
}

/// `pretrain`: train a fresh identity-initialized model on the dataset in
/// the output directory with the klz loss.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path, progress: bool) -> Result<(), CliError> {
    write_resolved(cfg, out)?;
    let data_file = dataset_path(cfg, out);
    if !data_file.exists() {
        return Err(CliError::Usage(format!(
            "dataset {} not found; run sample-data into the same --out first",
            data_file.display()
        )));
    }
    let dataset = Dataset::load(&data_file)?;
    let target = cfg.build_target()?;
    if dataset.dim != cfg.target_dim {
        return Err(CliError::Usage(format!(
            "dataset dim {} does not match target.dim {}",
            dataset.dim, cfg.target_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FlowModel::init(cfg.flow_config(), &mut rng);
    let tc = train_config(cfg, LossKind::Klz, progress)?;
    let result = trainer::pretrain(&mut model, &dataset, &target, &tc)?;
    write_metrics(&result, &out.join("pretrain_metrics.txt"))?;
    handle_abort(&result, &model, out, "pretrain.ckpt")?;
    model.save(&out.join("pretrain.ckpt"))?;
    Ok(())
}

/// `finetune`: continue from a checkpoint with the configured data-free loss.
pub fn cmd_finetune(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    progress: bool,
) -> Result<(), CliError> {
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found (finetune requires --checkpoint)",
            checkpoint.display()
        )));
    }
    write_resolved(cfg, out)?;
    let mut model = FlowModel::load(checkpoint)?;
    if model.dim() != cfg.target_dim {
        return Err(CliError::Usage(format!(
            "checkpoint dim {} does not match target.dim {}",
            model.dim(),
            cfg.target_dim
        )));
    }
    let target = cfg.build_target()?;
    let tc = train_config(cfg, cfg.finetune_loss, progress)?;
    let result = trainer::finetune(&mut model, &target, &tc)?;
    write_metrics(&result, &out.join("finetune_metrics.txt"))?;
    handle_abort(&result, &model, out, "finetune.ckpt")?;
    model.save(&out.join("finetune.ckpt"))?;
    Ok(())
}

/// Density histogram over [lo, hi] with `bins` bins; integrates to 1.
fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0f64; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let mut b = ((v - lo) / width) as isize;
        if b < 0 {
            b = 0;
        }
        if b as usize >= bins {
            b = bins as isize - 1;
        }
        counts[b as usize] += 1.0;
    }
    let total: f64 = values.len() as f64;
    for c in counts.iter_mut() {
        *c /= total * width;
    }
    counts
}

/// `eval`: sample the checkpointed model, emit a metrics record plus CSV
/// histograms of the x₁ marginal and of U_B(x_G) against the dataset.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path) -> Result<(), CliError> {
    if cfg.eval_n < 1000 {
        return Err(CliError::Usage(format!(
            "eval.n must be at least 1000, got {}",
            cfg.eval_n
        )));
    }
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let data_file = dataset_path(cfg, out);
    if !data_file.exists() {
        return Err(CliError::Usage(format!(
            "dataset {} not found; eval compares generated energies against it",
            data_file.display()
        )));
    }
    write_resolved(cfg, out)?;
    let model = FlowModel::load(checkpoint)?;
    let target = cfg.build_target()?;
    let dataset = Dataset::load(&data_file)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(30);
    let threshold = cfg.resolved_mode_threshold()?;
    let mut rec = trainer::evaluate(&model, &target, cfg.eval_n, threshold, &mut rng)?;
    rec.iter = 0;
    std::fs::write(out.join("eval_report.txt"), format!("{}\n", rec.to_line()))?;

    // histograms from a fresh deterministic sample
    let mut rng2 = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng2.set_stream(31);
    let (_, x, _) = model.sample_batch(cfg.eval_n, &mut rng2)?;
    let d = model.dim();
    let x1: Vec<f64> = (0..cfg.eval_n).map(|i| x[i * d]).collect();
    let ub_gen = energy_batch(&target, &x, cfg.eval_n);
    let ub_data = energy_batch(&target, &dataset.data, dataset.count);

    let bins = cfg.eval_bins;
    let (lo1, hi1) = bounds(&x1);
    let h1 = histogram(&x1, lo1, hi1, bins);
    let mut csv = String::from("bin_left,bin_right,density\n");
    let w1 = (hi1 - lo1) / bins as f64;
    for (i, h) in h1.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{}",
            lo1 + w1 * i as f64,
            lo1 + w1 * (i + 1) as f64,
            h
        );
    }
    std::fs::write(out.join("hist_x1.csv"), csv)?;

    let (lo_u, hi_u) = bounds_pair(&ub_gen, &ub_data);
    let hg = histogram(&ub_gen, lo_u, hi_u, bins);
    let hd = histogram(&ub_data, lo_u, hi_u, bins);
    let wu = (hi_u - lo_u) / bins as f64;
    let mut csv = String::from("bin_left,bin_right,density_generated,density_dataset\n");
    for i in 0..bins {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            lo_u + wu * i as f64,
            lo_u + wu * (i + 1) as f64,
            hg[i],
            hd[i]
        );
    }
    std::fs::write(out.join("hist_ub.csv"), csv)?;
    Ok(())
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = 1e-9 * (hi - lo).abs().max(1.0);
    (lo - pad, hi + pad)
}

fn bounds_pair(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (la, ha) = bounds(a);
    let (lb, hb) = bounds(b);
    (la.min(lb), ha.max(hb))
}

/// `pitfall-demo`: CSV traces for the four demonstration modes.
pub fn cmd_pitfall_demo(cfg: &ExperimentConfig, out: &Path, mode: &str) -> Result<(), CliError> {
    write_resolved(cfg, out)?;
    match mode {
        "flow-ode" => pitfall_flow_ode(cfg, out),
        "naive-kl" => pitfall_naive_kl(cfg, out),
        "normalized-kl" => pitfall_normalized_kl(cfg, out),
        "stabilizer" => pitfall_stabilizer(cfg, out),
        other => Err(CliError::Usage(format!(
            "unknown pitfall-demo mode {other:?} (expected flow-ode, naive-kl, normalized-kl, stabilizer)"
        ))),
    }
}

fn pitfall_flow_ode(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(40);
    let n = cfg.pitfall_grid_points;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let q0: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let dx = 1.0 / n as f64;
    let mass: f64 = p.iter().sum::<f64>() * dx;
    for v in p.iter_mut() {
        *v /= mass;
    }
    let gd = GridDensity::new(grid.clone(), q0.clone(), p.clone())?;
    let t = cfg.pitfall_t_horizon;
    let qt = pitfalls::unconstrained_kl_flow(&gd, t, cfg.pitfall_dt)?;
    let mut csv = String::from("x,q0,qT,closed_form,rel_err\n");
    for i in 0..n {
        let closed = (2.0 * p[i] * t + q0[i] * q0[i]).sqrt();
        let rel = (qt[i] - closed).abs() / closed;
        let _ = writeln!(csv, "{},{},{},{},{}", grid[i], q0[i], qt[i], closed, rel);
    }
    std::fs::write(out.join("flow-ode.csv"), csv)?;
    Ok(())
}

fn pitfall_naive_kl(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(41);
    let mut model = FlowModel::init(
        crate::flow::FlowConfig {
            dim: 2,
            blocks: 4,
            hidden: 8,
            sigma: 1.0,
            scale_clamp: 4.0,
            celu_alpha: 1.0,
        },
        &mut rng,
    );
    let n = 8;
    let mut x = vec![0.0; n * 2];
    for v in x.iter_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    let ptb: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let trace = pitfalls::naive_kl_demo(
        &mut model,
        &x,
        n,
        &ptb,
        cfg.pitfall_steps,
        cfg.pitfall_learning_rate,
    )?;
    let mut csv = String::from("step,minibatch_mass\n");
    for (i, m) in trace.iter().enumerate() {
        let _ = writeln!(csv, "{i},{m}");
    }
    std::fs::write(out.join("naive-kl.csv"), csv)?;
    Ok(())
}

fn pitfall_normalized_kl(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(42);
    let mut csv = String::from("trial,n,kl\n");
    for trial in 0..cfg.pitfall_trials {
        let n = rng.random_range(2..16);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..10.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..10.0)).collect();
        let kl = pitfalls::normalized_minibatch_kl(&b, &g);
        let _ = writeln!(csv, "{trial},{n},{kl}");
    }
    std::fs::write(out.join("normalized-kl.csv"), csv)?;
    Ok(())
}

fn pitfall_stabilizer(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let k = cfg.pitfall_states;
    let theta: Vec<f64> = (0..k).map(|i| 0.3 * (i as f64 - 0.5 * k as f64)).collect();
    let density = SoftmaxDensity::new(theta);
    let q = density.probs();
    // f = p_B/q for a deterministic synthetic target
    let wb: Vec<f64> = (0..k).map(|i| 1.0 + ((i * 5) % 3) as f64).collect();
    let zb: f64 = wb.iter().sum();
    let f: Vec<f64> = (0..k).map(|i| (wb[i] / zb) / q[i]).collect();
    let cv = ControlVariate::from_exact_moments(&density, &f);
    let k_star = cv.k_star();
    let zeros = vec![0.0; k];
    let (mean_naive, second_naive) =
        pitfalls::enumerate_estimator_moments(&density, &f, cfg.pitfall_batch_size, &zeros);
    let (mean_stab, second_stab) =
        pitfalls::enumerate_estimator_moments(&density, &f, cfg.pitfall_batch_size, &k_star);
    let mut csv = String::from("coord,naive_var,stabilized_var,predicted_reduction\n");
    let dq = density.dq_dtheta();
    for j in 0..k {
        let vn = second_naive[j] - mean_naive[j] * mean_naive[j];
        let vs = second_stab[j] - mean_stab[j] * mean_stab[j];
        let e_sq: f64 = (0..k).map(|i| dq[i][j] * dq[i][j]).sum::<f64>() / k as f64;
        let e_sq_f: f64 = (0..k).map(|i| dq[i][j] * dq[i][j] * f[i]).sum::<f64>() / k as f64;
        let pred = e_sq_f * e_sq_f / e_sq / cfg.pitfall_batch_size as f64;
        let _ = writeln!(csv, "{j},{vn},{vs},{pred}");
    }
    std::fs::write(out.join("stabilizer.csv"), csv)?;
    Ok(())
}

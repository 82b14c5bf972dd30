use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::estimators;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::{LossConfig, LossKind};
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::{DoubleWell, EnergyModel};
use boltzlab::trainer::{evaluate, finetune, pretrain, windowed_means, windowed_stds, TrainConfig};

const SEED: u64 = 20240601;

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let rho = target.minor_mode_ratio();
    let saddle = target.extrema().saddle;
    println!("rho* = {rho}, saddle = {saddle}");

    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();

    let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma: 1.0, scale_clamp: 4.0, celu_alpha: 1.0 };
    let tc = |iters: usize, lr: f64, loss: LossConfig| TrainConfig {
        iters, batch_size: 256, learning_rate: lr, eval_every: 250, n_eval: 4096, loss,
        ..TrainConfig::desk(iters, SEED, saddle)
    };

    let t0 = Instant::now();
    let mut partial = FlowModel::init(cfgf.clone(), &mut ChaCha8Rng::seed_from_u64(SEED));
    pretrain(&mut partial, &dataset, &target, &tc(200, 1e-3, LossConfig::default())).unwrap();
    let mut full = FlowModel::init(cfgf.clone(), &mut ChaCha8Rng::seed_from_u64(SEED));
    let rfull = pretrain(&mut full, &dataset, &target, &tc(2000, 1e-3, LossConfig::default())).unwrap();
    println!("pretrains done in {:?}; full pretrain final loss {}", t0.elapsed(), rfull.loss_trace.last().unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let prec = evaluate(&partial, &target, 50_000, saddle, &mut rng).unwrap();
    let frec = evaluate(&full, &target, 50_000, saddle, &mut rng).unwrap();
    println!("partial pretrain: fraction {} mean_UB {} ess {} K {}", prec.minor_mode_fraction, prec.mean_ub, prec.ess, prec.k_estimate);
    println!("full pretrain:    fraction {} mean_UB {} ess {} K {}", frec.minor_mode_fraction, frec.mean_ub, frec.ess, frec.k_estimate);

    // 7a: klx from partial
    let t1 = Instant::now();
    let mut klx_model = partial.clone();
    let rklx = finetune(&mut klx_model, &target, &tc(5000, 1e-4, LossConfig { kind: LossKind::Klx, ..LossConfig::default() })).unwrap();
    let krec = evaluate(&klx_model, &target, 50_000, saddle, &mut rng).unwrap();
    println!("klx from partial: fraction {} (bound {}) aborted {:?} [{:?}]", krec.minor_mode_fraction, 0.2*rho, rklx.aborted.as_ref().map(|a| &a.reason), t1.elapsed());
    // fraction trace
    let fr: Vec<f64> = rklx.metrics.iter().map(|m| m.minor_mode_fraction).collect();
    println!("klx fraction trace: {:?}", &fr);

    // 7b: l2 from full
    let t2 = Instant::now();
    let mut l2_model = full.clone();
    let rl2 = finetune(&mut l2_model, &target, &tc(5000, 1e-4, LossConfig::default())).unwrap();
    let lrec = evaluate(&l2_model, &target, 50_000, saddle, &mut rng).unwrap();
    println!("l2 from full: fraction {} vs rho {} rel {} aborted {:?} [{:?}]", lrec.minor_mode_fraction, rho, (lrec.minor_mode_fraction - rho).abs()/rho, rl2.aborted.as_ref().map(|a| &a.reason), t2.elapsed());

    // criterion 8
    let means = windowed_means(&rl2.k_trace, 200);
    let stds = windowed_stds(&rl2.k_trace, 200);
    let mut ok8 = true;
    for i in 1..means.len() {
        if means[i] < means[i-1] - 0.05*stds[i-1] { ok8 = false; println!("  K drop at window {i}: {} -> {} (eps {})", means[i-1], means[i], 0.05*stds[i-1]); }
    }
    println!("criterion 8 (delta-K windows non-decreasing): {ok8}; first window {} last {}", means[0], means.last().unwrap());

    // criterion 9: ablations
    let t3 = Instant::now();
    let mut nd = full.clone();
    let rnd = finetune(&mut nd, &target, &tc(5000, 1e-4, LossConfig { detach_k: false, ..LossConfig::default() })).unwrap();
    let mut nm = full.clone();
    let rnm = finetune(&mut nm, &target, &tc(5000, 1e-4, LossConfig { apply_mask: false, ..LossConfig::default() })).unwrap();
    let tail_var = |trace: &[f64]| {
        let tail = &trace[trace.len() - trace.len()/4..];
        let m = tail.iter().sum::<f64>()/tail.len() as f64;
        tail.iter().map(|v| (v-m)*(v-m)).sum::<f64>()/tail.len() as f64
    };
    println!("criterion 9 tail variances: full {} nodetach {} nomask {} (aborts {:?} {:?}) [{:?}]",
        tail_var(&rl2.mean_ub_trace), tail_var(&rnd.mean_ub_trace), tail_var(&rnm.mean_ub_trace),
        rnd.aborted.as_ref().map(|a| &a.reason), rnm.aborted.as_ref().map(|a| &a.reason), t3.elapsed());

    // criterion 10
    let (log_left, log_right) = target.well_log_masses();
    let df_quad = log_left - log_right;
    let n = 100_000usize;
    let (_, x, log_pg) = l2_model.sample_batch(n, &mut rng).unwrap();
    let d = 12;
    let log_ptb: Vec<f64> = (0..n).map(|i| -target.energy(&x[i*d..(i+1)*d])).collect();
    let left: Vec<f64> = (0..n).map(|i| if x[i*d] <= saddle { 1.0 } else { 0.0 }).collect();
    let right: Vec<f64> = left.iter().map(|v| 1.0-v).collect();
    let ql = estimators::reweighted_expectation(&log_pg, &log_ptb, &left).unwrap();
    let qr = estimators::reweighted_expectation(&log_pg, &log_ptb, &right).unwrap();
    let df_hat = (ql.q_hat/qr.q_hat).ln();
    println!("criterion 10: dF_hat {} vs quad {} rel {} (ess {})", df_hat, df_quad, (df_hat-df_quad).abs()/df_quad.abs(), ql.ess);
}

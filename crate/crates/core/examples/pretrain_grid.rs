use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::DoubleWell;
use boltzlab::trainer::{evaluate, pretrain, OptimizerKind, TrainConfig};

const SEED: u64 = 20240601;

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    let rho = target.minor_mode_ratio();
    println!("rho* = {rho:.5}  (logZ_B approx 45.5)");
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();

    for (alpha, sigma, lr, b2) in [
        (1.0, 1.0, 1e-3, 0.999),
        (4.0, 1.0, 1e-3, 0.999),
        (4.0, 1.0, 2e-3, 0.999),
        (8.0, 1.0, 2e-3, 0.999),
        (4.0, 1.0, 2e-3, 0.99),
        (1.0, 10.0, 1e-3, 0.999),
        (1.0, 10.0, 2e-3, 0.999),
        (4.0, 10.0, 2e-3, 0.999),
    ] {
        let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma, scale_clamp: 4.0, celu_alpha: alpha };
        let mut m = FlowModel::init(cfgf, &mut ChaCha8Rng::seed_from_u64(SEED));
        let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: lr, eval_every: 2000, n_eval: 4096,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: b2, eps: 1e-8 },
            loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED, saddle) };
        let r = pretrain(&mut m, &dataset, &target, &tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let rec = evaluate(&m, &target, 50_000, saddle, &mut rng).unwrap();
        println!("alpha {alpha} sigma {sigma} lr {lr} b2 {b2}: ab {:?} | frac {:.5} mean_UB {:.3} ess {:.0} K {:.3}",
            r.aborted.is_some(), rec.minor_mode_fraction, rec.mean_ub, rec.ess, rec.k_estimate);
    }
}

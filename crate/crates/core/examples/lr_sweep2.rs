use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::{LossConfig, LossKind};
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::DoubleWell;
use boltzlab::trainer::{evaluate, finetune, pretrain, OptimizerKind, TrainConfig};

const SEED: u64 = 20240601;

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    let rho = target.minor_mode_ratio();
    println!("rho* = {rho}");
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();
    let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma: 1.0, scale_clamp: 4.0, celu_alpha: 1.0 };

    let mut best: Option<(f64, f64, FlowModel)> = None;
    for (lr, beta2) in [(5e-3, 0.999), (7e-3, 0.999), (1e-2, 0.999), (5e-3, 0.99), (7e-3, 0.99), (1e-2, 0.99)] {
        let mut m = FlowModel::init(cfgf.clone(), &mut ChaCha8Rng::seed_from_u64(SEED));
        let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: lr, eval_every: 1000, n_eval: 4096,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2, eps: 1e-8 },
            loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED, saddle) };
        let r = pretrain(&mut m, &dataset, &target, &tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let rec = evaluate(&m, &target, 50_000, saddle, &mut rng).unwrap();
        println!("lr {lr} b2 {beta2}: aborted {:?} | fraction {:.5} mean_UB {:.3} ess {:.0} K {:.3}",
            r.aborted.is_some(), rec.minor_mode_fraction, rec.mean_ub, rec.ess, rec.k_estimate);
        let score = (rec.minor_mode_fraction - rho).abs() / rho;
        if best.as_ref().map(|b| score < b.0).unwrap_or(true) && r.aborted.is_none() {
            best = Some((score, lr, m));
        }
    }
    let (score, blr, full) = best.unwrap();
    println!("best pretrain: lr {blr} (rel dev {score:.3})");

    // l2 finetune from the best pretrain at two lrs
    for flr in [1e-4, 3e-4] {
        let mut m = full.clone();
        let tc = TrainConfig { iters: 5000, batch_size: 256, learning_rate: flr, eval_every: 500, n_eval: 4096,
            loss: LossConfig::default(), ..TrainConfig::desk(5000, SEED, saddle) };
        let r = finetune(&mut m, &target, &tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let rec = evaluate(&m, &target, 50_000, saddle, &mut rng).unwrap();
        let fr: Vec<String> = r.metrics.iter().map(|x| format!("{:.4}", x.minor_mode_fraction)).collect();
        println!("l2 lr {flr}: final fraction {:.5} (rho {:.5}, rel {:.3}) aborted {:?}", rec.minor_mode_fraction, rho, (rec.minor_mode_fraction-rho).abs()/rho, r.aborted.is_some());
        println!("   trace: {}", fr.join(" "));
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::DoubleWell;
use boltzlab::trainer::{evaluate, pretrain, TrainConfig};

const SEED: u64 = 20240601;

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    let rho = target.minor_mode_ratio();
    println!("rho* = {rho}");
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();

    let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma: 1.0, scale_clamp: 4.0, celu_alpha: 1.0 };
    for lr in [1e-3, 2e-3, 3e-3, 5e-3] {
        let mut m = FlowModel::init(cfgf.clone(), &mut ChaCha8Rng::seed_from_u64(SEED));
        let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: lr, eval_every: 500, n_eval: 4096,
            loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED, saddle) };
        let r = pretrain(&mut m, &dataset, &target, &tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let rec = evaluate(&m, &target, 50_000, saddle, &mut rng).unwrap();
        println!("pretrain lr {lr}: aborted {:?} final loss {:.3} | fraction {:.5} (rho {:.5}) mean_UB {:.3} ess {:.0}/50000 K {:.3}",
            r.aborted.as_ref().map(|a| &a.reason), r.loss_trace.last().unwrap(), rec.minor_mode_fraction, rho, rec.mean_ub, rec.ess, rec.k_estimate);
        // fraction trace during training
        let fr: Vec<String> = r.metrics.iter().map(|m| format!("{:.4}", m.minor_mode_fraction)).collect();
        println!("   fractions during pretrain: {}", fr.join(" "));
        // also the partial state at 200 iters, same lr
        let mut mp = FlowModel::init(cfgf.clone(), &mut ChaCha8Rng::seed_from_u64(SEED));
        let tcp = TrainConfig { iters: 200, ..tc.clone() };
        pretrain(&mut mp, &dataset, &target, &tcp).unwrap();
        let recp = evaluate(&mp, &target, 50_000, saddle, &mut rng).unwrap();
        println!("   partial(200) state: fraction {:.5} mean_UB {:.3} ess {:.0} K {:.3}", recp.minor_mode_fraction, recp.mean_ub, recp.ess, recp.k_estimate);
    }
}

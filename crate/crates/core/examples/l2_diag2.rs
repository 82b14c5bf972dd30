use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::{DoubleWell, EnergyModel};
use boltzlab::trainer::{evaluate, finetune, pretrain, TrainConfig};

const SEED: u64 = 20240601;

fn profile(m: &FlowModel, target: &DoubleWell, saddle: f64, label: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 50_000;
    let (_, x, log_pg) = m.sample_batch(n, &mut rng).unwrap();
    let d = 12;
    let rs: Vec<f64> = (0..n).map(|i| -target.energy(&x[i*d..(i+1)*d]) - log_pg[i]).collect();
    let k = rs.iter().sum::<f64>() / n as f64;
    let mut minor_dev = Vec::new();
    let mut major_dev = Vec::new();
    for i in 0..n {
        if x[i*d] > saddle { minor_dev.push(rs[i]-k) } else { major_dev.push(rs[i]-k) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let med = |v: &mut Vec<f64>| { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] };
    let mut md = minor_dev.clone();
    let mut jd = major_dev.clone();
    println!("{label}: frac {:.5} K {:.3} | minor dev mean {:+.4} med {:+.4} masked-in {:.3} | major dev mean {:+.4} med {:+.4} masked-in {:.3}",
        minor_dev.len() as f64 / n as f64, k,
        mean(&minor_dev), med(&mut md), minor_dev.iter().filter(|v| **v > 0.0).count() as f64 / minor_dev.len().max(1) as f64,
        mean(&major_dev), med(&mut jd), major_dev.iter().filter(|v| **v > 0.0).count() as f64 / major_dev.len().max(1) as f64);
}

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    let rho = target.minor_mode_ratio();
    println!("rho* = {rho:.5}");
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();
    let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma: 1.0, scale_clamp: 4.0, celu_alpha: 1.0 };
    let mut m = FlowModel::init(cfgf, &mut ChaCha8Rng::seed_from_u64(SEED));
    let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: 1e-3, eval_every: 2000, n_eval: 4096,
        loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED, saddle) };
    pretrain(&mut m, &dataset, &target, &tc).unwrap();
    profile(&m, &target, saddle, "pretrained(lr 1e-3)");

    // short l2 bursts with profiles in between
    for burst in 0..6 {
        let tc = TrainConfig { iters: 500, batch_size: 256, learning_rate: 1e-4, eval_every: 500, n_eval: 1000,
            seed: SEED + burst, loss: LossConfig::default(), ..TrainConfig::desk(500, SEED + burst, saddle) };
        let r = finetune(&mut m, &target, &tc).unwrap();
        assert!(r.aborted.is_none());
        profile(&m, &target, saddle, &format!("after l2 burst {}", (burst+1)*500));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let rec = evaluate(&m, &target, 50_000, saddle, &mut rng).unwrap();
    println!("final: fraction {:.5} mean_UB {:.3} ess {:.0} K {:.3}", rec.minor_mode_fraction, rec.mean_ub, rec.ess, rec.k_estimate);
}

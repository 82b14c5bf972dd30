use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::{DoubleWell, EnergyModel};
use boltzlab::trainer::{pretrain, OptimizerKind, TrainConfig};

const SEED: u64 = 20240601;

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    let rho = target.minor_mode_ratio();
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();
    let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma: 1.0, scale_clamp: 4.0, celu_alpha: 1.0 };
    let mut m = FlowModel::init(cfgf.clone(), &mut ChaCha8Rng::seed_from_u64(SEED));
    let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: 5e-3, eval_every: 2000, n_eval: 4096,
        optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.99, eps: 1e-8 },
        loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED, saddle) };
    pretrain(&mut m, &dataset, &target, &tc).unwrap();

    // r statistics over a large generated sample
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 50_000;
    let (_, x, log_pg) = m.sample_batch(n, &mut rng).unwrap();
    let d = 12;
    let mut r_minor = Vec::new();
    let mut r_major = Vec::new();
    let mut u_minor = Vec::new();
    for i in 0..n {
        let xi = &x[i*d..(i+1)*d];
        let r = -target.energy(xi) - log_pg[i];
        if xi[0] > saddle { r_minor.push(r); u_minor.push(target.energy(xi)); } else { r_major.push(r); }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let k = (r_minor.iter().sum::<f64>() + r_major.iter().sum::<f64>()) / n as f64;
    println!("rho* {rho:.5}, model fraction {:.5}", r_minor.len() as f64 / n as f64);
    println!("K (overall mean r) = {k:.4}");
    println!("minor: n {} mean r {:.4} (dev {:+.4}), mean U_B {:.3}", r_minor.len(), mean(&r_minor), mean(&r_minor)-k, mean(&u_minor));
    println!("major: n {} mean r {:.4} (dev {:+.4})", r_major.len(), mean(&r_major), mean(&r_major)-k);
    let frac_in_minor = r_minor.iter().filter(|r| **r > k).count() as f64 / r_minor.len().max(1) as f64;
    let frac_in_major = r_major.iter().filter(|r| **r > k).count() as f64 / r_major.len().max(1) as f64;
    println!("masked-in fraction: minor {frac_in_minor:.3} major {frac_in_major:.3}");

    // r as a function of x1 position: bin by x1
    println!("\nx1-binned mean r (dev from K):");
    let mut bins = vec![(0usize, 0.0f64); 24];
    for i in 0..n {
        let xi = &x[i*d..(i+1)*d];
        let r = -target.energy(xi) - log_pg[i];
        let b = (((xi[0] + 3.0) / 6.0 * 24.0) as isize).clamp(0, 23) as usize;
        bins[b].0 += 1; bins[b].1 += r;
    }
    for (bi, (c, s)) in bins.iter().enumerate() {
        if *c > 10 {
            let center = -3.0 + (bi as f64 + 0.5) / 24.0 * 6.0;
            println!("  x1 {:+.2}: n {:6} mean dev {:+.4}", center, c, s / *c as f64 - k);
        }
    }

    // dataset-side diagnostic: r on data points (p_B samples)
    let mut rd_minor = Vec::new();
    let mut rd_major = Vec::new();
    for i in 0..20_000 {
        let xi = dataset.point(i);
        let r = -target.energy(xi) - m.log_prob_one(xi).unwrap();
        if xi[0] > saddle { rd_minor.push(r); } else { rd_major.push(r); }
    }
    println!("\ndata-side r: minor mean {:.4}, major mean {:.4} (K {k:.4})", mean(&rd_minor), mean(&rd_major));
}

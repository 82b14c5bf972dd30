use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::{DoubleWell, EnergyModel};
use boltzlab::trainer::{pretrain, TrainConfig};

const SEED: u64 = 20240601;

fn profile(m: &FlowModel, target: &DoubleWell, saddle: f64, label: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 40_000;
    let (_, x, log_pg) = m.sample_batch(n, &mut rng).unwrap();
    let d = 12;
    let rs: Vec<f64> = (0..n).map(|i| -target.energy(&x[i*d..(i+1)*d]) - log_pg[i]).collect();
    let k = rs.iter().sum::<f64>() / n as f64;
    let (mut md, mut x1m) = (Vec::new(), Vec::new());
    for i in 0..n { if x[i*d] > saddle { md.push(rs[i]-k); x1m.push(x[i*d]); } }
    let frac = md.len() as f64 / n as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mu = mean(&x1m);
    let sd = (x1m.iter().map(|v| (v-mu)*(v-mu)).sum::<f64>() / x1m.len().max(1) as f64).sqrt();
    md.sort_by(|a,b| a.partial_cmp(b).unwrap());
    let med = if md.is_empty() { f64::NAN } else { md[md.len()/2] };
    println!("{label}: frac {:.5} K {:.3} minor-dev med {:+.3} | minor x1 mean {:.2} std {:.2}", frac, k, med, mu, sd);
}

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    println!("rho* = {:.5} (target minor x1 ~1.69 std ~0.21)", target.minor_mode_ratio());
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();
    for (alpha, sigma, lr) in [
        (10.0, 10.0, 1e-3), (10.0, 1.0, 1e-3), (20.0, 10.0, 1e-3), (5.0, 10.0, 1e-3), (10.0, 10.0, 5e-4), (40.0, 10.0, 1e-3),
    ] {
        let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma, scale_clamp: 4.0, celu_alpha: alpha };
        let mut m = FlowModel::init(cfgf, &mut ChaCha8Rng::seed_from_u64(SEED));
        let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: lr, eval_every: 4000, n_eval: 1000,
            loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED, saddle) };
        let r = pretrain(&mut m, &dataset, &target, &tc).unwrap();
        profile(&m, &target, saddle, &format!("alpha {alpha} sigma {sigma} lr {lr} (ab {})", r.aborted.is_some()));
    }
}

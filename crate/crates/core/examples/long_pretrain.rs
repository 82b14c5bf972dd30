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
    let n = 50_000;
    let (_, x, log_pg) = m.sample_batch(n, &mut rng).unwrap();
    let d = 12;
    let rs: Vec<f64> = (0..n).map(|i| -target.energy(&x[i*d..(i+1)*d]) - log_pg[i]).collect();
    let k = rs.iter().sum::<f64>() / n as f64;
    let (mut md, mut jd) = (Vec::new(), Vec::new());
    for i in 0..n { if x[i*d] > saddle { md.push(rs[i]-k) } else { jd.push(rs[i]-k) } }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let frac = md.len() as f64 / n as f64;
    md.sort_by(|a,b| a.partial_cmp(b).unwrap());
    jd.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("{label}: frac {:.5} K {:.3} | minor mean {:+.3} med {:+.3} | major mean {:+.3} med {:+.3}",
        frac, k, mean(&md), md[md.len().max(1)/2], mean(&jd), jd[jd.len()/2]);
}

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    println!("rho* = {:.5}", target.minor_mode_ratio());
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();
    for sigma in [1.0, 10.0] {
        let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma, scale_clamp: 4.0, celu_alpha: 1.0 };
        let mut m = FlowModel::init(cfgf, &mut ChaCha8Rng::seed_from_u64(SEED));
        for chunk in 0..5 {
            let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: 1e-3, eval_every: 4000, n_eval: 1000,
                seed: SEED + chunk, loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED + chunk, saddle) };
            let r = pretrain(&mut m, &dataset, &target, &tc).unwrap();
            assert!(r.aborted.is_none());
            profile(&m, &target, saddle, &format!("sigma {sigma} after {} iters", (chunk+1)*2000));
        }
    }
}

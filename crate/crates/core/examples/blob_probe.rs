use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::{DoubleWell, EnergyModel};
use boltzlab::trainer::{pretrain, TrainConfig};

const SEED: u64 = 20240601;

fn stats(label: &str, rows: &[Vec<f64>]) {
    if rows.is_empty() { println!("{label}: empty"); return; }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows { for (m, v) in mean.iter_mut().zip(r) { *m += v / n; } }
    let mut std = vec![0.0; d];
    for r in rows { for j in 0..d { std[j] += (r[j]-mean[j]).powi(2) / n; } }
    let stds: Vec<String> = std.iter().map(|v| format!("{:.2}", v.sqrt())).collect();
    let means: Vec<String> = mean.iter().map(|v| format!("{:+.2}", v)).collect();
    println!("{label}: n {} mean [{}] std [{}]", rows.len(), means.join(","), stds.join(","));
}

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, SEED) };
    let (dataset, _) = pt_run(&pt, &target).unwrap();
    let cfgf = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma: 10.0, scale_clamp: 4.0, celu_alpha: 1.0 };
    let mut m = FlowModel::init(cfgf, &mut ChaCha8Rng::seed_from_u64(SEED));
    let tc = TrainConfig { iters: 2000, batch_size: 256, learning_rate: 1e-3, eval_every: 4000, n_eval: 1000,
        loss: LossConfig::default(), ..TrainConfig::desk(2000, SEED, saddle) };
    pretrain(&mut m, &dataset, &target, &tc).unwrap();

    // model samples split by mode
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 40_000;
    let (_, x, _) = m.sample_batch(n, &mut rng).unwrap();
    let d = 12;
    let (mut minor, mut major) = (Vec::new(), Vec::new());
    for i in 0..n {
        let row = x[i*d..(i+1)*d].to_vec();
        if row[0] > saddle { minor.push(row) } else { major.push(row) }
    }
    stats("model minor x", &minor);
    stats("model major x", &major);

    // data split by mode
    let (mut dminor, mut dmajor) = (Vec::new(), Vec::new());
    for i in 0..40_000 {
        let row = dataset.point(i).to_vec();
        if row[0] > saddle { dminor.push(row) } else { dmajor.push(row) }
    }
    stats("data  minor x", &dminor);
    stats("data  major x", &dmajor);

    // data mapped to z
    let mut zrow = vec![0.0; d];
    let map = |rows: &[Vec<f64>], m: &FlowModel| -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for r in rows.iter().take(3000) {
            let mut zr = zrow.clone();
            m.invert_one(r, &mut zr).unwrap();
            out.push(zr);
        }
        out
    };
    stats("F(data minor) z/sigma=10", &map(&dminor, &m));
    stats("F(data major) z/sigma=10", &map(&dmajor, &m));
}

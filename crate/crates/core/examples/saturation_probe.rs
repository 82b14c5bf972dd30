use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::{DoubleWell, EnergyModel};
use boltzlab::trainer::{pretrain, TrainConfig};

const SEED: u64 = 20240601;

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

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 20_000;
    let (z, x, _) = m.sample_batch(n, &mut rng).unwrap();
    let d = 12;
    // stats of raw scales split by final mode
    let mut sat_any_minor = 0usize; let mut n_minor = 0usize;
    let mut sat_any_major = 0usize; let mut n_major = 0usize;
    let mut max_raw: f64 = 0.0;
    let mut block_sat = vec![0usize; 8];
    for i in 0..n {
        let raws = m.raw_scales_along_generate(&z[i*d..(i+1)*d]).unwrap();
        let minor = x[i*d] > saddle;
        let mut any = false;
        for (b, rb) in raws.iter().enumerate() {
            for r in rb {
                max_raw = max_raw.max(r.abs());
                if r.abs() > 8.0 { any = true; block_sat[b] += 1; }
            }
        }
        if minor { n_minor += 1; if any { sat_any_minor += 1; } } else { n_major += 1; if any { sat_any_major += 1; } }
    }
    println!("max |raw| = {max_raw:.2} (clamp 4)");
    println!("samples with some |raw| > 8: minor {}/{}  major {}/{}", sat_any_minor, n_minor, sat_any_major, n_major);
    println!("per-block saturated counts: {block_sat:?}");
}

use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use boltzlab::flow::{FlowConfig, FlowModel};
use boltzlab::losses::LossConfig;
use boltzlab::losses::LossKind;
use boltzlab::sampler::{pt_run, PtConfig};
use boltzlab::targets::DoubleWell;
use boltzlab::trainer::{finetune, pretrain, TrainConfig};

fn main() {
    let target = DoubleWell::new(12).with_cap(50.0).unwrap();
    let saddle = target.extrema().saddle;
    println!("rho* = {}", target.minor_mode_ratio());
    println!("saddle = {saddle}");

    let t0 = Instant::now();
    let pt = PtConfig { total_samples: 100_000, burn_in: 10_000, ..PtConfig::default_ladder(100_000, 1) };
    let (dataset, rep) = pt_run(&pt, &target).unwrap();
    println!("PT data: {:?} ({} samples), swap rates {:?}", t0.elapsed(), dataset.count, rep.swap_rates);
    let minor = (0..dataset.count).filter(|i| dataset.point(*i)[0] > saddle).count() as f64 / dataset.count as f64;
    println!("dataset minor fraction = {minor}");

    let cfg = FlowConfig { dim: 12, blocks: 8, hidden: 32, sigma: 1.0, scale_clamp: 4.0, celu_alpha: 1.0 };
    let mut model = FlowModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
    println!("params: {}", model.param_count());

    let t0 = Instant::now();
    let tc = TrainConfig { iters: 50, batch_size: 256, learning_rate: 1e-3, eval_every: 1000, n_eval: 4096, ..TrainConfig::desk(50, 1, saddle) };
    let r = pretrain(&mut model, &dataset, &target, &tc).unwrap();
    println!("50 pretrain steps: {:?} -> {:.3} ms/step, loss {} -> {}", t0.elapsed(), t0.elapsed().as_secs_f64()*20.0, r.loss_trace[0], r.loss_trace.last().unwrap());

    let t0 = Instant::now();
    let tc = TrainConfig { iters: 50, batch_size: 256, learning_rate: 1e-4, eval_every: 1000, n_eval: 4096,
        loss: LossConfig { kind: LossKind::L2Masked, ..LossConfig::default() }, ..TrainConfig::desk(50, 1, saddle) };
    let r = finetune(&mut model, &target, &tc).unwrap();
    println!("50 l2 finetune steps: {:?} -> {:.3} ms/step, loss {} -> {}", t0.elapsed(), t0.elapsed().as_secs_f64()*20.0, r.loss_trace[0], r.loss_trace.last().unwrap());

    let t0 = Instant::now();
    let tc = TrainConfig { iters: 50, batch_size: 256, learning_rate: 1e-4, eval_every: 1000, n_eval: 4096,
        loss: LossConfig { kind: LossKind::Klx, ..LossConfig::default() }, ..TrainConfig::desk(50, 1, saddle) };
    let r = finetune(&mut model, &target, &tc).unwrap();
    println!("50 klx finetune steps: {:?} -> {:.3} ms/step, loss {} -> {}", t0.elapsed(), t0.elapsed().as_secs_f64()*20.0, r.loss_trace[0], r.loss_trace.last().unwrap());
}

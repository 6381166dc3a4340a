use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use deep_edmd::dataset::{epoch_windows, gather_batch};
use deep_edmd::dempc::{DeMpc, MpcConfig};
use deep_edmd::harness::{fit, prepare, simulate_episodes, AnyModel, ExperimentConfig, ModelKind, Preset};
use deep_edmd::koopman::{deep_losses, DeepArch, DeepKoopmanModel, LossWeights};
use deep_edmd::mlp_baseline::{mlp_loss, MlpArch, MlpLossWeights, MlpModel};
use deep_edmd::numkit::{svd, Matrix};
use deep_edmd::plant::VehicleState;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn linear_algebra(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(128, 128, &mut rng);
    let b = random(128, 128, &mut rng);
    c.bench_function("matmul_128", |bch| bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    let tall = random(400, 18, &mut rng);
    c.bench_function("svd_400x18", |bch| bch.iter(|| svd(black_box(&tall)).unwrap()));
}

fn losses(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.data.steps = 600;
    let prep = prepare(&cfg, simulate_episodes(&cfg).unwrap()).unwrap();
    let windows = epoch_windows(&prep.data.train, 41, 2, 0);
    let batch = gather_batch(&prep.data.train, &windows[..32], 41, 2);
    let deep = DeepKoopmanModel::new(DeepArch::new(6, 2, 10), 1).unwrap();
    let w = LossWeights::default();
    c.bench_function("deep_loss_grad_b32_p41", |bch| bch.iter(|| deep_losses(&deep, black_box(&batch), &w).unwrap()));
    let mlp = MlpModel::new(MlpArch::new(6, 2), 1).unwrap();
    let mw = MlpLossWeights::default();
    c.bench_function("mlp_loss_grad_b32_p41", |bch| bch.iter(|| mlp_loss(&mlp, black_box(&batch), &mw).unwrap()));
}

fn mpc(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.data.steps = 600;
    let prep = prepare(&cfg, simulate_episodes(&cfg).unwrap()).unwrap();
    let trained = fit(&cfg, &prep, ModelKind::Edmd, false, &cfg.train).unwrap();
    let AnyModel::Linear(model) = &trained.checkpoint.model else { unreachable!() };
    let reference = vec![VehicleState::new(5.0, 0.0, 0.0); 60];
    for (np, nc) in [(10, 7), (60, 50)] {
        let mc = MpcConfig { np, nc, ..MpcConfig::default() };
        let mut ctrl = DeMpc::new(model, prep.stats.clone(), mc, 2).unwrap();
        let x = VehicleState::new(4.0, 0.1, 0.05);
        c.bench_function(&format!("mpc_step_np{np}_nc{nc}"), |bch| {
            bch.iter(|| {
                ctrl.reset(Default::default());
                ctrl.step(black_box(&x), &reference[..np]).unwrap()
            })
        });
    }
}

criterion_group!(benches, linear_algebra, losses, mpc);
criterion_main!(benches);

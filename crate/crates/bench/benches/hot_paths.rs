use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qnet_core::atvc::{AtvcModel, CommTopology, ModelConfig};
use qnet_core::env::{AllocationAction, Env, EnvConfig};
use qnet_core::nn::Graph;
use qnet_core::oracle::{stationary_drop_rate, ChainSpec};
use qnet_core::trainer::{compute_advantages, minibatch_loss, simulate, Driver, PpoConfig};

fn env_step(c: &mut Criterion) {
    let mut env = Env::new(EnvConfig::table1()).unwrap();
    let actions: Vec<AllocationAction> = (0..3).map(|i| AllocationAction::from_fractions(i, vec![0.5, 0.5])).collect();
    c.bench_function("env step (3 schedulers)", |b| {
        b.iter(|| {
            let obs = env.observe_all();
            black_box(env.step(black_box(&actions)).unwrap());
            obs
        })
    });
}

fn minibatch(c: &mut Criterion) {
    let env = EnvConfig::table1();
    let model = AtvcModel::new(ModelConfig::default()).unwrap();
    let driver = Driver::Learned {
        model: &model,
        fusion: qnet_core::atvc::Fusion::Soft,
        deterministic: false,
    };
    let (_, traj) = simulate(driver, &env, 4, 1, true).unwrap();
    let mut traj = traj.unwrap();
    let ppo = PpoConfig::default();
    compute_advantages(&mut traj, ppo.discount, ppo.gae_lambda);
    let topology = CommTopology::new(&env.resolved_access_map());
    let rows: Vec<usize> = (0..ppo.minibatch_size).collect();
    let mut params = model.params.clone();
    let mut g = Graph::new();
    c.bench_function("minibatch forward+backward (128 rows)", |b| {
        b.iter(|| {
            g.clear();
            let (loss, terms) = minibatch_loss(&mut g, &model, &topology, &traj, &rows, 0.2, &ppo).unwrap();
            g.backward(loss, &mut params).unwrap();
            terms
        })
    });
}

fn rollout(c: &mut Criterion) {
    let env = EnvConfig::table1();
    let model = AtvcModel::new(ModelConfig::default()).unwrap();
    let driver = Driver::Learned {
        model: &model,
        fusion: qnet_core::atvc::Fusion::Soft,
        deterministic: false,
    };
    c.bench_function("recorded rollout (8 episodes)", |b| {
        b.iter(|| simulate(driver, &env, 8, black_box(3), true).unwrap())
    });
}

fn oracle(c: &mut Criterion) {
    let spec = ChainSpec::new(5, 0.9, 1.0).unwrap();
    c.bench_function("stationary drop rate (B=5)", |b| {
        b.iter(|| stationary_drop_rate(black_box(&spec)).unwrap())
    });
}

criterion_group!(benches, env_step, minibatch, rollout, oracle);
criterion_main!(benches);

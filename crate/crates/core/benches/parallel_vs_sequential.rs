use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use madist::collect::collect_random;
use madist::embed::{EmbedConfig, EmbeddingModel};
use madist::envs::EnvSpec;
use madist::latent::{choose_sequence, dynamics_loss, LatentDynamics, LatentTriples, PlanConfig};
use madist::oracle::compute_mad;
use madist::trajdata::extract_all_pairs;
use madist::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn embedding(exec: Exec) -> EmbeddingModel {
    let cfg = EmbedConfig {
        exec,
        ..EmbedConfig::default()
    };
    EmbeddingModel::new(2, cfg).unwrap()
}

fn loss_batch(c: &mut Criterion) {
    let spec = EnvSpec::open_grid(10, 10);
    let trajs = collect_random(&spec, 50, 0).unwrap();
    let pairs = extract_all_pairs(&trajs, Some(3));
    let batch = &pairs[..512];
    let mut group = c.benchmark_group("embedding_loss_512");
    for (name, exec) in MODES {
        let model = embedding(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.loss_batch(batch).unwrap())
        });
    }
    group.finish();
}

fn dynamics_batch(c: &mut Criterion) {
    let spec = EnvSpec::open_grid(10, 10);
    let trajs = collect_random(&spec, 50, 0).unwrap();
    let emb = embedding(Exec::default());
    let data = LatentTriples::new(&trajs, &emb).unwrap();
    let model = LatentDynamics::new(64, 4, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let batch: Vec<usize> = (0..512).map(|i| i % data.len()).collect();
    let mut group = c.benchmark_group("dynamics_loss_512");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| dynamics_loss(&model, &data, &batch, exec).unwrap())
        });
    }
    group.finish();
}

fn all_pairs_bfs(c: &mut Criterion) {
    let spec = EnvSpec::open_grid(20, 20);
    let mut group = c.benchmark_group("all_pairs_bfs_20x20");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| compute_mad(&spec, exec).unwrap())
        });
    }
    group.finish();
}

fn planner_scoring(c: &mut Criterion) {
    let emb = embedding(Exec::default());
    let model = LatentDynamics::new(64, 4, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let z = vec![0.1; 64];
    let z_goal = vec![0.7; 64];
    let mut group = c.benchmark_group("plan_step_200_sequences");
    for (name, exec) in MODES {
        let cfg = PlanConfig {
            num_sequences: 200,
            exec,
            ..PlanConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| choose_sequence(&model, &emb, &z, &z_goal, &cfg, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    loss_batch,
    dynamics_batch,
    all_pairs_bfs,
    planner_scoring
);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedpeft::data::{dirichlet_partition, make_synthetic, AugmentConfig, Generator, SyntheticTaskSpec};
use fedpeft::federation::{run_training, FederationConfig, LocalTraining, RunOptions};
use fedpeft::model::{build_model, ModelSpec, VitSpec};
use fedpeft::peft::{apply_mode, Bottleneck, TuningMode};
use fedpeft::privacy::DpConfig;
use fedpeft::tensor::{Graph, SgdConfig, Tensor};

fn round(c: &mut Criterion) {
    let spec = ModelSpec::Vit(VitSpec {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        embed_dim: 32,
        mlp_hidden_dim: 64,
        depth: 2,
        num_heads: 2,
        num_classes: 4,
    });
    let task = SyntheticTaskSpec {
        num_classes: 4,
        samples_per_class: 32,
        generator: Generator::Images {
            image_size: 16,
            channels: 3,
            noise: 0.3,
            spots_per_class: 3,
        },
        shift: 0.0,
        task_seed: 1,
    };
    let data = make_synthetic(&task, 2).unwrap();
    let partition = dirichlet_partition(data.labels(), 8, 1.0, 3).unwrap();
    let base = apply_mode(
        build_model::<f32>(&spec, 4).unwrap(),
        TuningMode::Adapter {
            bottleneck: Bottleneck::Width(8),
        },
        4,
    )
    .unwrap();
    let cfg = FederationConfig {
        num_clients: 8,
        clients_per_round: 4,
        rounds: 1,
        local_epochs: 1,
        seed: 5,
        local: LocalTraining {
            sgd: SgdConfig {
                learning_rate: 0.05,
                weight_decay: 1e-4,
                batch_size: 8,
            },
            dp: DpConfig::default(),
            augment: AugmentConfig::default(),
        },
    };

    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for (name, threads) in [("sequential", 1), ("parallel", 0)] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut m = base.clone();
                run_training(&mut m, &data, &partition, &cfg, &data, &RunOptions { threads }, |_| Ok(())).unwrap();
                black_box(m)
            })
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = Tensor::<f32>::new(vec![n, n], (0..n * n).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
        let b = Tensor::<f32>::new(vec![n, n], (0..n * n).map(|i| (i % 5) as f32 * 0.2).collect()).unwrap();
        group.bench_function(BenchmarkId::from_parameter(n), |bench| {
            bench.iter(|| {
                let mut g = Graph::inference();
                let x = g.input(a.clone());
                let y = g.input(b.clone());
                let z = g.matmul(x, y).unwrap();
                black_box(g.value(z).data()[0])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, round, matmul);
criterion_main!(benches);

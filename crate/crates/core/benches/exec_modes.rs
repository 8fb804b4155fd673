//! Sequential vs parallel execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dgk_core::codec::ActionVocabulary;
use dgk_core::exec::ExecMode;
use dgk_core::inference::sample_rollout;
use dgk_core::model::{Model, ModelConfig};
use dgk_core::scene::Scene;
use dgk_core::simulator::{generate_scene, WorldConfig};
use dgk_core::training::{evaluate, prepare_all, TrainConfig, Trainer};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn setup() -> (Model, Vec<Scene>) {
    let model = Model::new(ModelConfig::symmetric(32, 2, 4, 169, 60), ActionVocabulary::default(), 0).expect("model");
    let scenes = (0..32).map(|i| generate_scene(&WorldConfig::default(), i).expect("scene")).collect();
    (model, scenes)
}

fn bench(c: &mut Criterion) {
    let (model, scenes) = setup();
    let examples = prepare_all(&scenes, &model.vocab, Default::default(), 60, ExecMode::Sequential).expect("examples");

    let mut g = c.benchmark_group("train_step_batch16");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig { batch_size: 16, epochs: 1000, exec, ..TrainConfig::default() };
        let mut trainer = Trainer::new(model.clone(), cfg, scenes.len()).expect("trainer");
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| trainer.train_step(&scenes).expect("step")));
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_32_scenes");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(&model, &examples, exec).expect("eval")));
    }
    g.finish();

    let mut g = c.benchmark_group("rollout_64_samples");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_rollout(&model, &scenes[0], 64, 60, 1.0, 0, exec).expect("rollout"))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deskbot_bench::demos;
use deskbot_core::config::{PolicyConfig, TrainConfig};
use deskbot_core::graph::Graph;
use deskbot_core::model::Policy;
use deskbot_core::sim::TaskKind;
use deskbot_core::train::{encoder_for, episode_loss, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn predict(c: &mut Criterion) {
    for size in [32, 64] {
        let eps = demos(TaskKind::PushButtons, 3, 1, size);
        let cfg = PolicyConfig { image_size: size, ..PolicyConfig::default() };
        let policy = Policy::<f32>::new(cfg.clone(), encoder_for(&cfg, &eps).unwrap()).unwrap();
        let text = policy.encode_text(&eps[0].instruction).unwrap();
        let obs: Vec<_> = eps[0].steps.iter().map(|s| s.observation.clone()).collect();
        c.bench_function(&format!("predict/{size}px/{}steps", obs.len()), |b| {
            b.iter(|| policy.predict(black_box(&text), &obs).unwrap())
        });
    }
}

fn forward_backward(c: &mut Criterion) {
    let eps = demos(TaskKind::PushButtons, 3, 1, 32);
    let cfg = PolicyConfig::default();
    let policy = Policy::<f32>::new(cfg.clone(), encoder_for(&cfg, &eps).unwrap()).unwrap();
    let text = policy.encode_text(&eps[0].instruction).unwrap();
    let train = TrainConfig::default();
    c.bench_function("episode_loss/forward+backward", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new(&policy.params);
            let l = episode_loss(&mut g, &policy, &eps[0], &text, &train, &mut rng).unwrap();
            g.backward(l.total)
        })
    });
}

fn train_step(c: &mut Criterion) {
    let eps = demos(TaskKind::ReachTarget, 0, 8, 32);
    let mut trainer = Trainer::new(PolicyConfig::default(), TrainConfig::default(), eps).unwrap();
    c.bench_function("train_step/batch8", |b| b.iter(|| trainer.step().unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = predict, forward_backward, train_step
}
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deskbot_bench::demos;
use deskbot_core::episode::{decode_episode, encode_episode};
use deskbot_core::sim::{make_scene, render, CameraRig, TaskKind, TaskSpec};

fn render_views(c: &mut Criterion) {
    let task = TaskSpec::from_variation(TaskKind::PushButtons, 95).unwrap();
    for size in [32, 64, 128] {
        let rig = CameraRig::standard(size, size);
        let scene = make_scene(&task, 3, (size, size)).unwrap();
        c.bench_function(&format!("render/3x{size}"), |b| b.iter(|| render(black_box(&scene), &rig)));
    }
}

fn container(c: &mut Criterion) {
    let ep = demos(TaskKind::Tower, 11, 1, 32).remove(0);
    let bytes = encode_episode(&ep).unwrap();
    c.bench_function("episode/encode", |b| b.iter(|| encode_episode(black_box(&ep)).unwrap()));
    c.bench_function("episode/decode", |b| b.iter(|| decode_episode(black_box(&bytes)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = render_views, container
}
criterion_main!(benches);

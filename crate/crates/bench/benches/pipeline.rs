//! Stage and end-to-end latency benchmarks on a synthetic 64x2048 world.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use pcrd_core::networks::boxes::BoxCodec;
use pcrd_core::pipeline::DetectorWeights;
use pcrd_core::{
    cluster_depth, detect_scan, extract_proposals, project_cloud, segment_ground, synth, Box3,
    BoxNet, ClassifierNet, PipelineConfig, Point3,
};

fn world() -> (PipelineConfig, Vec<Point3>) {
    let mut cfg = PipelineConfig::default();
    cfg.energy.gamma_c = f64::INFINITY;
    cfg.energy.gamma_b = f64::INFINITY;
    let mut scene = synth::Scene::flat(1.73);
    let mut x = 5.0;
    for i in 0..10 {
        scene.obstacles.push(synth::Shape::Box(Box3::new(
            Point3::new(x, (i as f64 - 5.0) * 3.0, -1.0),
            [2.0, 1.4, 1.5],
            0.3 * i as f64,
        )));
        x += 3.5;
    }
    let scan = synth::render_scan(&cfg.projection, &scene, 1);
    (cfg, scan.points)
}

fn weights() -> DetectorWeights {
    let codec = BoxCodec::default();
    let cls = ClassifierNet::new(codec.ns());
    let cls_params = cls.init_params(1);
    let boxnet = BoxNet::new(codec.nh, codec.ns());
    let box_params = boxnet.init_params(2);
    DetectorWeights::from_parts(cls, cls_params, boxnet, box_params, codec)
}

fn bench_stages(c: &mut Criterion) {
    let (cfg, points) = world();
    let cloud = project_cloud(&points, &cfg.projection).unwrap();
    let (ground, _) = segment_ground(&cloud, &cfg.ground, 1);
    let labels = cluster_depth(&cloud, &ground, &cfg.cluster);

    c.bench_function("projection_64x2048", |b| {
        b.iter(|| project_cloud(black_box(&points), &cfg.projection).unwrap())
    });
    c.bench_function("ground_64x2048", |b| {
        b.iter(|| segment_ground(black_box(&cloud), &cfg.ground, 1))
    });
    c.bench_function("cluster_64x2048", |b| {
        b.iter(|| cluster_depth(black_box(&cloud), &ground, &cfg.cluster))
    });
    c.bench_function("proposals_64x2048", |b| {
        b.iter(|| extract_proposals(black_box(&cloud), &labels, &cfg.proposal, 1))
    });
}

fn bench_networks(c: &mut Criterion) {
    let w = weights();
    let pts: Vec<Point3> = (0..64)
        .map(|i| {
            let t = i as f64 / 63.0 - 0.5;
            Point3::new(t * 2.0, (t * 7.0).sin() * 0.4, t)
        })
        .collect();
    let vox = [0.25, -0.1, 0.3];
    c.bench_function("classifier_forward_64pts", |b| {
        b.iter(|| w.cls.forward(&w.cls_params, black_box(&pts), vox).unwrap())
    });
    c.bench_function("boxnet_forward_64pts", |b| {
        b.iter(|| w.boxnet.forward(&w.box_params, black_box(&pts), vox).unwrap())
    });
}

fn bench_end_to_end(c: &mut Criterion) {
    let (cfg, points) = world();
    let w = weights();
    c.bench_function("detect_scan_64x2048", |b| {
        b.iter(|| detect_scan(black_box(&points), &cfg, &w, 1).unwrap())
    });
}

criterion_group!(benches, bench_stages, bench_networks, bench_end_to_end);
criterion_main!(benches);

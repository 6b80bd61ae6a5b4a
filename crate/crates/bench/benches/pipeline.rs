use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;
use semfield_core::camera::pixel_ray;
use semfield_core::field::{Field, IndicatorField, ModelField, SemanticFieldModel};
use semfield_core::grid::{raw_occupancy, refine_invalids, GridSpec, VoxelGrid, VoxelizeConfig};
use semfield_core::losses::LossWeights;
use semfield_core::render::{composite, render_patch, sample_depths, PatchRect};
use semfield_core::rng;
use semfield_core::scene::{dda_raycast, CameraId};
use semfield_core::train::{accumulate_gradients, draw_samples};
use semfield_bench::reference;

fn rendering(c: &mut Criterion) {
    let (cfg, seq) = reference();
    let mut r = rng::stream(0, "bench", 0);
    let (d, delta) = sample_depths(&cfg.render, Some(&mut r));
    let sigma: Vec<f64> = (0..d.len()).map(|_| r.gen_range(0.0..4.0)).collect();
    c.bench_function("composite_32", |b| b.iter(|| composite(black_box(&sigma), &delta, &d)));

    let frame = seq.frame(0, CameraId::FrontLeft);
    let ray = pixel_ray(&frame.camera.intrinsics, &frame.camera.pose, [48.5, 30.5]).unwrap();
    c.bench_function("dda_raycast", |b| b.iter(|| dda_raycast(&seq.world, black_box(&ray))));

    let indicator = IndicatorField::new(&seq.world);
    let rect = PatchRect {
        x: 40,
        y: 20,
        width: 8,
        height: 8,
    };
    c.bench_function("render_patch_8x8_indicator", |b| {
        b.iter(|| render_patch::<rand_chacha::ChaCha8Rng>(&indicator, &frame.camera, &rect, &cfg.render, &[], None).unwrap())
    });

    let model = SemanticFieldModel::<f32>::new(cfg.field_config(), 0).unwrap();
    let field = ModelField::new(&model, &frame.image, frame.camera).unwrap();
    let points: Vec<_> = (0..1024).map(|i| [1.0 + (i % 32) as f64 * 0.3, (i / 32) as f64 * 0.1 - 1.6, 0.5]).collect();
    c.bench_function("model_query_1024", |b| b.iter(|| field.query_points(black_box(&points)).unwrap()));
}

fn training(c: &mut Criterion) {
    let (cfg, seq) = reference();
    let data = [seq];
    let mut model = SemanticFieldModel::<f32>::new(cfg.field_config(), 0).unwrap();
    let weights = LossWeights::default();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_reference", |b| {
        let mut r = rng::stream(0, "bench-train", 0);
        b.iter(|| {
            let samples = draw_samples(&data, &cfg.train, &mut r).unwrap();
            accumulate_gradients(&mut model, &data, &samples, &cfg.train, &cfg.render, &weights, 1, &mut r).unwrap()
        })
    });
    group.finish();
}

fn grids(c: &mut Criterion) {
    let (_, seq) = reference();
    let indicator = IndicatorField::new(&seq.world);
    let spec = GridSpec {
        dims: [64, 65, 16],
        voxel_size: 0.2,
        origin: [0.0, -6.5, 0.0],
    };
    let vcfg = VoxelizeConfig::default();
    let mut group = c.benchmark_group("grid");
    group.sample_size(10);
    group.bench_function("raw_occupancy_indicator", |b| b.iter(|| raw_occupancy(&indicator, &spec, &vcfg).unwrap()));
    let mut g = VoxelGrid::empty(spec, 6);
    let mut r = rng::stream(0, "bench-grid", 0);
    for i in 0..g.labels.len() {
        if r.gen_bool(0.3) {
            g.labels[i] = r.gen_range(1..6);
        }
        g.invalid[i] = r.gen_bool(0.2);
    }
    group.bench_function("refine_invalids_64x65x16", |b| b.iter(|| refine_invalids(black_box(&g), 7)));
    group.finish();
}

criterion_group!(benches, rendering, training, grids);
criterion_main!(benches);

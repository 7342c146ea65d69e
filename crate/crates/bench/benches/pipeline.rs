use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use markerless::augment::{augment_baseline, LandmarkSequence};
use markerless::filt::filter_set;
use markerless::kin::{solve_sequence, IkWeights};
use markerless::pipeline::{self, BodyModel, PipelineConfig, PipelineInput};
use markerless::synth::{self, generate, standard_rig, Dataset, MotionScript, NoiseSpec, Task};
use markerless::triang::{triangulate_sequence, GateConfig, KeypointFrame};
use markerless::{anthro, FilterSpec};

fn walking() -> Dataset {
    generate(
        &MotionScript::standard(Task::Walking),
        &standard_rig(),
        &NoiseSpec::new(1.0, 0.1, 1).unwrap(),
    )
    .unwrap()
}

fn by_frame(data: &Dataset) -> Vec<Vec<KeypointFrame>> {
    (0..data.frame_count())
        .map(|i| data.keypoints.iter().map(|s| s[i].clone()).collect())
        .collect()
}

fn stages(c: &mut Criterion) {
    let data = walking();
    let frames = by_frame(&data);
    let gates = GateConfig::standard();
    let body = BodyModel::default();

    c.bench_function("triangulate 300 frames", |b| {
        b.iter(|| triangulate_sequence(&frames, &data.rig, &gates).unwrap())
    });

    let results = triangulate_sequence(&frames, &data.rig, &gates).unwrap();
    let seq = LandmarkSequence::from_results(&results, data.rate_hz);
    c.bench_function("augment 300 frames", |b| b.iter(|| augment_baseline(&seq, &body.template)));

    let markers = augment_baseline(&seq, &body.template);
    let spec = FilterSpec::default();
    c.bench_function("filter 57 markers", |b| b.iter(|| filter_set(&markers, &spec).unwrap()));

    let filtered = filter_set(&markers, &spec).unwrap();
    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("ik 300 frames", |b| {
        b.iter(|| solve_sequence(&body.skeleton, &IkWeights::default(), &filtered).unwrap())
    });
    group.bench_function("pipeline 300 frames", |b| {
        let input = PipelineInput {
            keypoints: &frames,
            rig: &data.rig,
            rate_hz: data.rate_hz,
            mesh: None,
        };
        b.iter(|| pipeline::run(&input, &PipelineConfig::default(), &body).unwrap())
    });
    group.finish();
}

fn anthropometry(c: &mut Criterion) {
    let (mesh, _) = synth::default_body();
    let density = anthro::DensityModel::default();
    c.bench_function("measure_all", |b| {
        b.iter_batched(|| mesh.clone(), |m| anthro::measure_all(&m, &density), BatchSize::SmallInput)
    });
}

criterion_group!(benches, stages, anthropometry);
criterion_main!(benches);

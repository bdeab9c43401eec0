use criterion::{black_box, criterion_group, criterion_main, Criterion};
use tammatte_bench::{random, random_mask, rng};
use tammatte_core::metrics::evaluate;
use tammatte_core::model::{build_model, ModelConfig};
use tammatte_core::params::ParamStore;
use tammatte_core::synth::{gen_clip, ClipSpec};
use tammatte_core::tam::{tam_forward, TamConfig, TamParams};
use tammatte_core::train::{TrainConfig, Trainer};
use tammatte_core::trimap::dilate_trimap;
use tammatte_core::Graph;

fn conv(c: &mut Criterion) {
    let mut r = rng(0);
    let (x, k, b) = (
        random(&[16, 32, 32], &mut r),
        random(&[16, 16, 3, 3], &mut r),
        random(&[16], &mut r),
    );
    c.bench_function("conv2d_16x32x32_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, k, b) = (g.param(x.clone()), g.param(k.clone()), g.param(b.clone()));
            let y = g.conv2d(x, k, b, 1, 1).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap();
            black_box(g.grad(k).is_some())
        })
    });
}

fn tam(c: &mut Criterion) {
    let mut r = rng(1);
    let config = TamConfig::default();
    let ch = config.channels;
    let mut store = ParamStore::new();
    let params = TamParams::register(&mut store, "tam", &config, &mut r).unwrap();
    let frames: Vec<_> = (0..3).map(|_| random(&[ch, 16, 16], &mut r)).collect();
    let mask = random_mask(16, 16, 0.3, &mut r);
    c.bench_function("tam_forward_bwd_16x16_30pct", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let f: Vec<_> = frames.iter().map(|t| g.constant(t.clone())).collect();
            let out = tam_forward(
                &mut g,
                &bound,
                &params,
                &config,
                f[1],
                &[(-1, f[0]), (1, f[2])],
                &mask,
            )
            .unwrap();
            let l = g.sum(out.fused).unwrap();
            g.backward(l).unwrap();
        })
    });
}

fn metrics(c: &mut Criterion) {
    let clip = gen_clip(&ClipSpec::random(64, 64, 8, 0.0, 1.0, 2)).unwrap();
    let masks: Vec<_> = clip
        .trimaps
        .iter()
        .map(|t| dilate_trimap(t, 11).unwrap().unknown_mask())
        .collect();
    let pred: Vec<_> = clip
        .alphas
        .iter()
        .map(|a| a.map(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0)))
        .collect();
    c.bench_function("evaluate_64x64x8", |bench| {
        bench.iter(|| black_box(evaluate(&pred, &clip.alphas, &masks, Some(&clip.flows)).unwrap()))
    });
}

fn synth(c: &mut Criterion) {
    c.bench_function("gen_clip_64x64x8", |bench| {
        bench.iter(|| black_box(gen_clip(&ClipSpec::random(64, 64, 8, 0.02, 1.5, 3)).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let clips = vec![gen_clip(&ClipSpec::random(48, 48, 6, 0.0, 1.0, 4)).unwrap()];
    let mut t = Trainer::new(
        build_model(&ModelConfig::default()).unwrap(),
        TrainConfig::default(),
    )
    .unwrap();
    let batch = t.sample_batch(&clips).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_default_model_batch", |bench| {
        bench.iter(|| black_box(t.step_on(&batch).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, tam, metrics, synth, train_step);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use langneck_core::data::{
    apply_corruption, generate_dataset, render_scene, Corruption, CorruptionKind, SceneSpec, Size, Split, Vocabulary,
};
use langneck_core::model::{encode_image, forward_soft_from_embeddings, sample_no_repetition, ModelConfig, ModelParams};
use langneck_core::objectives::{batch_loss, LossWeights};
use langneck_core::model::{Graph, ParamGroup};
use langneck_core::rng::rng;
use langneck_core::tensor::matmul_into;
use langneck_core::train::{embed_dataset, evaluate_embedded, DecodePath};
use langneck_core::Tensor;

fn matmul(c: &mut Criterion) {
    let mut r = rng(1);
    let a = Tensor::randn(&[512, 64], 1.0, &mut r);
    let b = Tensor::randn(&[64, 59], 1.0, &mut r);
    let mut out = vec![0.0; 512 * 59];
    c.bench_function("matmul 512x64x59", |bench| {
        bench.iter(|| matmul_into(512, 64, 59, black_box(a.data()), black_box(b.data()), &mut out))
    });
}

fn data(c: &mut Criterion) {
    let spec = SceneSpec::from_label(7, Size::Large, 2);
    c.bench_function("render scene", |b| b.iter(|| render_scene(black_box(&spec), 3)));
    let img = render_scene(&spec, 3);
    for kind in CorruptionKind::ALL {
        let corr = Corruption::new(kind, 5).unwrap();
        c.bench_function(&format!("corrupt {} s5", kind.name()), |b| {
            b.iter(|| apply_corruption(black_box(&img), corr, 4).unwrap())
        });
    }
}

fn model(c: &mut Criterion) {
    let vocab = Vocabulary::build();
    let params = {
        let mut p = ModelParams::init(&ModelConfig::default(), vocab.hash(), 0).unwrap();
        p.freeze_backbone();
        p
    };
    let ds = generate_dataset(0, 64, Split::Val, &vocab).unwrap();
    let images: Vec<_> = ds.samples.iter().take(32).collect();
    c.bench_function("encode 32 images", |b| b.iter(|| encode_image(&params, black_box(&images)).unwrap()));

    let set = embed_dataset(&params, &ds, None).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let emb = set.gather(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
    c.bench_function("soft forward batch 32", |b| b.iter(|| forward_soft_from_embeddings(&params, black_box(&emb)).unwrap()));
    for (name, w) in [("plain", LossWeights::PLAIN), ("both terms", LossWeights::new(0.1, 0.1).unwrap())] {
        c.bench_function(&format!("train step batch 32 {name}"), |b| {
            b.iter(|| {
                let mut g = Graph::new(&params, &[ParamGroup::Prompt, ParamGroup::Head]);
                let l = batch_loss(&mut g, &emb, &labels, w, None).unwrap();
                g.tape.backward(l.total).unwrap();
            })
        });
    }
    c.bench_function("no-repetition sampling batch 32", |b| {
        b.iter(|| sample_no_repetition(&params, black_box(&emb), 8).unwrap())
    });
    c.bench_function("evaluate hard path 64", |b| b.iter(|| evaluate_embedded(&params, &set, DecodePath::Hard).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, data, model
}
criterion_main!(benches);

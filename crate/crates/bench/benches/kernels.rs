use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pslnet::image::{batch_to_tensor, Image};
use pslnet::metrics::ssim;
use pslnet::model::{Ablation, ModelConfig, Pslnet};
use pslnet::nn::Conv2d;
use pslnet::perception::PerceptionNet;
use pslnet::tensor::Tensor;

fn pattern(h: usize, w: usize, k: usize) -> Image {
    Image::from_fn(h, w, |c, y, x| ((c * 31 + y * 7 + x * 3 + k) % 97) as f32 / 97.0)
}

fn conv(c: &mut Criterion) {
    let mut conv = Conv2d::<f32>::zeros(64, 64, 3);
    conv.init_he(1);
    let x = Tensor::<f32>::filled(&[64, 8, 64, 64], 0.5);
    c.bench_function("conv3x3 64->64 8x64x64", |b| b.iter(|| conv.forward(black_box(&x))));
}

fn network(c: &mut Criterion) {
    let model = Pslnet::<f32>::seeded(ModelConfig::toy(), 1).unwrap();
    let imgs: Vec<Image> = (0..4).map(|k| pattern(64, 64, k)).collect();
    let x = batch_to_tensor::<f32>(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    g.bench_function("toy forward 4x64x64", |b| b.iter(|| model.forward(black_box(&x), Ablation::default()).unwrap()));
    let pn = PerceptionNet::<f32>::seeded(1);
    g.bench_function("perception forward 4x64x64", |b| b.iter(|| pn.forward(black_box(&x)).unwrap()));
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (pattern(256, 256, 0), pattern(256, 256, 5));
    c.bench_function("ssim 256x256", |bch| bch.iter(|| ssim(black_box(&a), black_box(&b)).unwrap()));
}

criterion_group!(benches, conv, network, metrics);
criterion_main!(benches);

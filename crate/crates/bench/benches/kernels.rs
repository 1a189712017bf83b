use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fedfusion_core::codec::{compress, svd_decompose, Matrix, PacketMeta};
use fedfusion_core::data::{synth_generate, SynthConfig};
use fedfusion_core::federation::{Federation, FederationConfig};
use fedfusion_core::model::ModelConfig;
use fedfusion_core::tensor::{conv2d, LayerParams, Padding};
use fedfusion_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn svd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("svd");
    for (p, q) in [(16, 4), (64, 4), (64, 16)] {
        let m = Matrix::new(p, q, (0..p * q).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        g.bench_with_input(BenchmarkId::new("decompose", format!("{p}x{q}")), &m, |b, m| {
            b.iter(|| svd_decompose(black_box(m)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("compress_k2", format!("{p}x{q}")), &m, |b, m| {
            b.iter(|| compress(black_box(m), 2, PacketMeta { sender: 0, round: 0, sample_start: 0 }).unwrap())
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[64, 8, 7, 7], &mut rng);
    let p = LayerParams::conv_from_tensors(random(&[32, 8, 3, 3], &mut rng), random(&[32], &mut rng)).unwrap();
    c.bench_function("conv2d_64x8x7x7_to_32", |b| b.iter(|| conv2d(black_box(&x), &p, Padding::Same).unwrap()));
}

fn round(c: &mut Criterion) {
    let d = synth_generate(&SynthConfig {
        height: 32,
        width: 32,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = ModelConfig {
        branch_channels: 8,
        upsample_channels: 16,
        ..ModelConfig::new([d.modality1.shape()[2], d.modality2.shape()[2]], d.class_count)
    };
    let cfg = FederationConfig {
        clients: 4,
        selected: 4,
        batch_size: 32,
        rounds: 1,
        ..FederationConfig::default()
    };
    let mut g = c.benchmark_group("federation");
    g.sample_size(10);
    g.bench_function("round_4_clients_32x32", |b| {
        b.iter(|| {
            let mut fed = Federation::new(&d, model.clone(), cfg.clone()).unwrap();
            fed.run_round().unwrap();
        })
    });
    g.finish();
}

criterion_group!(benches, svd, conv, round);
criterion_main!(benches);

use std::hint::black_box;

use ashplus_core::autograd::Tape;
use ashplus_core::dft::{hallucinate, hallucinate_traced, orthogonal_unit_noise_seeded, DftWeights, HallucinateOptions, HallucinationNets};
use ashplus_core::featstats::adain_tensor;
use ashplus_core::metrics::ConfusionMatrix;
use ashplus_core::nets::{ArchConfig, Decoder, Encoder, SegNet};
use ashplus_core::objectives::{ash_plus_loss, seg_loss};
use ashplus_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 8;

struct Fixture {
    enc: Encoder<f32>,
    dec: Decoder<f32>,
    seg: SegNet<f32>,
    dft: DftWeights<f32>,
    x: Tensor<f32>,
    style: Tensor<f32>,
    labels: Vec<u8>,
}

fn fixture() -> Fixture {
    let arch = ArchConfig {
        image_size: 32,
        ..ArchConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = arch.image_size;
    Fixture {
        enc: Encoder::new(&arch, 0),
        dec: Decoder::new(&arch, 1),
        seg: SegNet::new(&arch, 2),
        dft: DftWeights::new(arch.num_classes, 64, arch.latent_channels(), 0.5, 3).unwrap(),
        x: Tensor::rand_uniform(vec![BATCH, 3, s, s], 0.0, 1.0, &mut rng),
        style: Tensor::rand_uniform(vec![1, 3, s, s], 0.0, 1.0, &mut rng),
        labels: (0..BATCH * s * s).map(|_| rng.random_range(0..arch.num_classes as u8)).collect(),
    }
}

fn feature_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = Tensor::<f32>::randn(vec![BATCH, 64, 8, 8], &mut rng);
    let g = Tensor::<f32>::randn(vec![BATCH, 64, 8, 8], &mut rng);
    c.bench_function("adain 8x64x8x8", |b| b.iter(|| adain_tensor(black_box(&f), black_box(&g)).unwrap()));
    c.bench_function("orthogonal noise 8x64x8x8", |b| b.iter(|| orthogonal_unit_noise_seeded(black_box(&f), 7).unwrap()));
}

fn hallucination(c: &mut Criterion) {
    let fx = fixture();
    let nets = HallucinationNets {
        encoder: &fx.enc,
        decoder: &fx.dec,
        segmenter: &fx.seg,
    };
    let opts = HallucinateOptions::default();
    c.bench_function("hallucinate 8x32x32", |b| {
        b.iter(|| hallucinate(nets, Some(&fx.dft), black_box(&fx.x), &fx.style, &opts, 5).unwrap())
    });
    c.bench_function("transformer loss + backward 8x32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = fx.dft.params().bind(&tape, true);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let trace = hallucinate_traced(&tape, nets, Some((&fx.dft, &bound)), &fx.x, &fx.style, &opts, &mut rng).unwrap();
            let loss = ash_plus_loss(&tape, &trace, &fx.enc, &fx.seg).unwrap().total;
            let grads = tape.backward(loss);
            bound.grads(&grads)
        })
    });
}

fn segmenter(c: &mut Criterion) {
    let fx = fixture();
    c.bench_function("segmenter loss + backward 8x32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = fx.seg.params().bind(&tape, true);
            let logits = fx.seg.forward(&p, tape.constant(fx.x.clone()));
            let loss = seg_loss(logits, &fx.labels).unwrap();
            let grads = tape.backward(loss);
            p.grads(&grads)
        })
    });
    let pred = fx.seg.predict(&fx.x).unwrap();
    c.bench_function("confusion accumulate 8x32x32", |b| {
        b.iter(|| {
            let mut cm = ConfusionMatrix::new(8);
            cm.accumulate(black_box(&pred), black_box(&fx.labels)).unwrap();
            cm
        })
    });
}

criterion_group!(benches, feature_ops, hallucination, segmenter);
criterion_main!(benches);

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use drmx_core::lstm::{network_step, LstmState};
use drmx_core::nmf::nmf_separate;
use drmx_core::separator::{ChannelEnhancer, LstmMasker, MODEL_BINS};
use drmx_core::spectral::{StftConfig, StftPlan};
use drmx_core::vad::VadLabels;
use drmx_core::{LstmShape, LstmWeights, NmfConfig, RemixParams};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn stft(c: &mut Criterion) {
    let plan = StftPlan::new(StftConfig::for_rate(48000).unwrap());
    let x = noise(48000, 1);
    c.bench_function("stft 1 s at 48 kHz", |b| {
        b.iter(|| plan.stft(black_box(&x)))
    });
    let spec = plan.stft(&x);
    c.bench_function("istft 1 s at 48 kHz", |b| {
        b.iter(|| plan.istft(black_box(&spec)).unwrap())
    });
}

// One frame must finish well inside the 16 ms hop.
fn lstm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weights = LstmWeights::random(LstmShape::REFERENCE, &mut rng);
    let mut state = LstmState::zeros(LstmShape::REFERENCE);
    let frame: Array1<f64> = (0..MODEL_BINS)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    c.bench_function("reference network step", |b| {
        b.iter(|| network_step(black_box(frame.view()), &mut state, &weights).unwrap())
    });
}

fn enhancer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let weights = Arc::new(LstmWeights::random(LstmShape::REFERENCE, &mut rng));
    let masker = LstmMasker::new(weights).unwrap();
    let mut enhancer =
        ChannelEnhancer::new(48000, Box::new(masker), RemixParams::default()).unwrap();
    let block = noise(enhancer.config().hop(), 4);
    c.bench_function("enhancer block at 48 kHz", |b| {
        b.iter(|| enhancer.process_block(black_box(&block)).unwrap())
    });
}

fn nmf(c: &mut Criterion) {
    let plan = StftPlan::new(StftConfig::for_rate(16000).unwrap());
    let spec = plan.stft(&noise(4 * 16000, 5));
    let vad = VadLabels::from_bools((0..spec.frames()).map(|t| t % 5 < 3));
    let mut group = c.benchmark_group("nmf");
    group.sample_size(10);
    group.bench_function("separate 4 s at 16 kHz", |b| {
        b.iter(|| nmf_separate(black_box(&spec), &vad, &NmfConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, stft, lstm, enhancer, nmf);
criterion_main!(benches);

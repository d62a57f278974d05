use std::sync::Arc;

use drmx_core::audio::{decode_wav, encode_wav};
use drmx_core::lstm::{decode_weights, encode_weights};
use drmx_core::separator::{enhance_channel, ConstantMasker, LstmMasker, MODEL_BINS};
use drmx_core::{AudioBuffer, ChannelEnhancer, LstmShape, LstmWeights, RemixParams, WavEncoding};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signal(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.9..0.9)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unit_gains_delay_the_input(seed in 0u64..1000, len in 4000usize..20000, split in 0.0f64..1.0, wide in any::<bool>()) {
        let rate = if wide { 48000 } else { 16000 };
        let x = signal(seed, len);
        let masker = ConstantMasker::new(MODEL_BINS, split, 1.0 - split);
        let enhancer = ChannelEnhancer::new(rate, Box::new(masker), RemixParams { alpha: 1.0, lambda: 1.0 }).unwrap();
        let latency = enhancer.latency_samples();
        let hop = latency / 3;
        let y = enhance_channel(&x, enhancer).unwrap();
        prop_assert_eq!(y.len(), len + latency);
        for i in hop..len - hop {
            prop_assert!((y[i + latency] - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn float_wav_round_trip_is_exact_for_f32_samples(seed in 0u64..1000, len in 1usize..2000) {
        let samples: Vec<f64> = signal(seed, len).into_iter().map(|v| v as f32 as f64).collect();
        let buffer = AudioBuffer::mono(48000, samples).unwrap();
        prop_assert_eq!(decode_wav(&encode_wav(&buffer, WavEncoding::Float32)).unwrap(), buffer);
    }
}

#[test]
fn enhancement_is_reproducible_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = LstmShape {
        input: MODEL_BINS,
        hidden: 8,
        layers: 2,
        output: 2 * MODEL_BINS,
    };
    let weights = LstmWeights::random(shape, &mut rng);
    // The stored weights are f32, so go through the file format first.
    let weights = Arc::new(decode_weights(&encode_weights(&weights)).unwrap());
    let x = signal(4, 24000);
    let run = || {
        let masker = LstmMasker::new(weights.clone()).unwrap();
        enhance_channel(
            &x,
            ChannelEnhancer::new(48000, Box::new(masker), RemixParams::default()).unwrap(),
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

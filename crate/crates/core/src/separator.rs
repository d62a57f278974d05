//! Mask application, remixing and the per-channel streaming enhancer.
//!
//! Each channel runs its own pipeline:
//!
//! ```text
//! block -> StftStreamer -> |Y[0..n)| * scale -> MaskEstimator -> (M_sp, M_ns)
//!       -> M_sp Y + alpha M_ns Y  on bins [0, n)
//!       -> lambda Y               on bins [n, N/2 + 1)   (48 kHz only)
//!       -> IstftStreamer -> block
//! ```
//!
//! `n` is the bin count of a 16 kHz frame of the same duration (257). At
//! 48 kHz the first 257 bins cover the same 0..8 kHz band with the same
//! 31.25 Hz spacing; their magnitudes are scaled by `512 / 1536` before
//! they reach the estimator so they match 16 kHz feature levels.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, Zip};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::lstm::{mask_forward_step, LstmError, LstmState, LstmWeights};
use crate::spectral::{
    IstftStreamer, SpectralError, Spectrogram, StftConfig, StftPlan, StftStreamer,
};

#[derive(Debug, Error)]
pub enum SeparatorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported sample rate: {0} Hz")]
    UnsupportedRate(u32),
    #[error("bin-count mismatch: {0}")]
    BinMismatch(String),
    #[error("mask estimator: {0}")]
    Estimator(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, SeparatorError>;

/// Frame length, in samples, of the rate the mask models are trained at.
pub const MODEL_FRAME_LEN: usize = 512;
/// Bins handed to the mask estimator.
pub const MODEL_BINS: usize = MODEL_FRAME_LEN / 2 + 1;

pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn gain_to_db(gain: f64) -> f64 {
    20.0 * gain.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTarget {
    Speech,
    Noise,
}

/// Real-valued mask aligned with a spectrogram, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: Array2<f64>,
    pub target: MaskTarget,
}

impl Mask {
    pub fn new(data: Array2<f64>, target: MaskTarget) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SeparatorError::Estimator(
                "mask entries must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { data, target })
    }

    pub fn complement(&self) -> Mask {
        let target = match self.target {
            MaskTarget::Speech => MaskTarget::Noise,
            MaskTarget::Noise => MaskTarget::Speech,
        };
        Mask {
            data: self.data.mapv(|m| 1.0 - m),
            target,
        }
    }
}

/// Gains applied when remixing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemixParams {
    /// Linear gain on the noise stem.
    pub alpha: f64,
    /// Linear gain on the copied high band.
    pub lambda: f64,
}

impl RemixParams {
    pub const DEFAULT_ALPHA_DB: f64 = -10.0;
    pub const DEFAULT_LAMBDA_DB: f64 = -7.0;

    pub fn from_db(alpha_db: f64, lambda_db: f64) -> Self {
        Self {
            alpha: db_to_gain(alpha_db),
            lambda: db_to_gain(lambda_db),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return Err(SeparatorError::Estimator(
                "alpha and lambda must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for RemixParams {
    fn default() -> Self {
        Self::from_db(Self::DEFAULT_ALPHA_DB, Self::DEFAULT_LAMBDA_DB)
    }
}

/// `M * Y`: scales the magnitude and keeps the mixture phase.
pub fn apply_mask(spec: &Spectrogram, mask: &Mask) -> Result<Spectrogram> {
    if spec.data.dim() != mask.data.dim() {
        return Err(SeparatorError::ShapeMismatch(format!(
            "spectrogram {:?} vs mask {:?}",
            spec.data.dim(),
            mask.data.dim()
        )));
    }
    let mut data = spec.data.clone();
    Zip::from(&mut data)
        .and(&mask.data)
        .for_each(|y, &m| *y *= m);
    Ok(Spectrogram {
        data,
        config: spec.config,
    })
}

/// `speech + alpha * noise`.
pub fn remix(speech: &Spectrogram, noise: &Spectrogram, alpha: f64) -> Result<Spectrogram> {
    if speech.data.dim() != noise.data.dim() {
        return Err(SeparatorError::ShapeMismatch(format!(
            "speech {:?} vs noise {:?}",
            speech.data.dim(),
            noise.data.dim()
        )));
    }
    let mut data = speech.data.clone();
    Zip::from(&mut data)
        .and(&noise.data)
        .for_each(|s, &n| *s += n * alpha);
    Ok(Spectrogram {
        data,
        config: speech.config,
    })
}

/// Concatenates the remixed low band with `lambda` times the original bins
/// above it.
pub fn hf_extend(
    remix_low: &Spectrogram,
    original: &Spectrogram,
    lambda: f64,
) -> Result<Spectrogram> {
    let split = remix_low.bins();
    if original.bins() != original.config.n_bins() || split > original.bins() {
        return Err(SeparatorError::BinMismatch(format!(
            "low band {} bins, original {} bins (expected {})",
            split,
            original.bins(),
            original.config.n_bins()
        )));
    }
    if remix_low.frames() != original.frames() {
        return Err(SeparatorError::ShapeMismatch(format!(
            "{} vs {} frames",
            remix_low.frames(),
            original.frames()
        )));
    }
    let mut data = original.data.clone();
    data.slice_mut(s![.., ..split]).assign(&remix_low.data);
    data.slice_mut(s![.., split..]).mapv_inplace(|y| y * lambda);
    Ok(Spectrogram {
        data,
        config: original.config,
    })
}

/// Ideal ratio masks `|S| / (|S| + |N|)` and their complement. Bins where
/// both stems are silent get a speech mask of 1.
pub fn ideal_ratio_masks(speech: &Spectrogram, noise: &Spectrogram) -> Result<(Mask, Mask)> {
    if speech.data.dim() != noise.data.dim() {
        return Err(SeparatorError::ShapeMismatch(
            "stem spectrograms differ in shape".into(),
        ));
    }
    let mut sp = Array2::zeros(speech.data.dim());
    Zip::from(&mut sp)
        .and(&speech.data)
        .and(&noise.data)
        .for_each(|m, s, n| {
            let (a, b) = (s.norm(), n.norm());
            *m = if a + b > 0.0 { a / (a + b) } else { 1.0 };
        });
    let speech_mask = Mask {
        data: sp,
        target: MaskTarget::Speech,
    };
    let noise_mask = speech_mask.complement();
    Ok((speech_mask, noise_mask))
}

/// Stateful per-frame mask source: one magnitude frame in, a speech and a
/// noise mask frame out.
pub trait MaskEstimator: Send {
    /// Number of bins per frame.
    fn bins(&self) -> usize;
    fn next_masks(&mut self, magnitudes: ArrayView1<'_, f64>)
        -> Result<(Array1<f64>, Array1<f64>)>;
    fn reset(&mut self);
}

/// LSTM mask estimator over shared weights.
pub struct LstmMasker {
    weights: Arc<LstmWeights>,
    state: LstmState,
}

impl LstmMasker {
    pub fn new(weights: Arc<LstmWeights>) -> Result<Self> {
        weights.validate()?;
        let shape = weights.shape();
        if shape.output != 2 * shape.input {
            return Err(SeparatorError::Lstm(LstmError::DimensionMismatch(format!(
                "output width {} is not twice the input width {}",
                shape.output, shape.input
            ))));
        }
        Ok(Self {
            state: LstmState::zeros(shape),
            weights,
        })
    }
}

impl MaskEstimator for LstmMasker {
    fn bins(&self) -> usize {
        self.weights.shape().input
    }

    fn next_masks(
        &mut self,
        magnitudes: ArrayView1<'_, f64>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        Ok(mask_forward_step(
            magnitudes,
            &mut self.state,
            &self.weights,
        )?)
    }

    fn reset(&mut self) {
        self.state.reset();
    }
}

/// The same masks on every frame.
#[derive(Debug, Clone)]
pub struct ConstantMasker {
    speech: Array1<f64>,
    noise: Array1<f64>,
}

impl ConstantMasker {
    pub fn new(bins: usize, speech: f64, noise: f64) -> Self {
        Self {
            speech: Array1::from_elem(bins, speech),
            noise: Array1::from_elem(bins, noise),
        }
    }
}

impl MaskEstimator for ConstantMasker {
    fn bins(&self) -> usize {
        self.speech.len()
    }

    fn next_masks(&mut self, _: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        Ok((self.speech.clone(), self.noise.clone()))
    }

    fn reset(&mut self) {}
}

/// Replays masks computed ahead of time (oracle or NMF), one row per frame.
/// Frames past the end get zero masks.
#[derive(Debug, Clone)]
pub struct PrecomputedMasker {
    speech: Array2<f64>,
    noise: Array2<f64>,
    frame: usize,
}

impl PrecomputedMasker {
    pub fn new(speech: Mask, noise: Mask) -> Result<Self> {
        if speech.data.dim() != noise.data.dim() {
            return Err(SeparatorError::ShapeMismatch(
                "speech and noise masks differ in shape".into(),
            ));
        }
        Ok(Self {
            speech: speech.data,
            noise: noise.data,
            frame: 0,
        })
    }
}

impl MaskEstimator for PrecomputedMasker {
    fn bins(&self) -> usize {
        self.speech.ncols()
    }

    fn next_masks(&mut self, _: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let t = self.frame;
        self.frame += 1;
        if t < self.speech.nrows() {
            Ok((self.speech.row(t).to_owned(), self.noise.row(t).to_owned()))
        } else {
            let z = Array1::zeros(self.speech.ncols());
            Ok((z.clone(), z))
        }
    }

    fn reset(&mut self) {
        self.frame = 0;
    }
}

/// Framing used for a given input rate, and the low-band split.
pub fn pipeline_config(sample_rate: u32) -> Result<(StftConfig, usize)> {
    match sample_rate {
        16000 | 48000 => {
            let config = StftConfig::for_rate(sample_rate)?;
            Ok((config, MODEL_BINS))
        }
        other => Err(SeparatorError::UnsupportedRate(other)),
    }
}

/// Streaming enhancer for one channel. Push blocks of `hop` samples; each
/// push returns `hop` output samples, `N + L` samples behind the input.
pub struct ChannelEnhancer {
    analysis: StftStreamer,
    synthesis: IstftStreamer,
    estimator: Box<dyn MaskEstimator>,
    params: RemixParams,
    split: usize,
    feature_scale: f64,
}

impl ChannelEnhancer {
    pub fn new(
        sample_rate: u32,
        estimator: Box<dyn MaskEstimator>,
        params: RemixParams,
    ) -> Result<Self> {
        let (config, split) = pipeline_config(sample_rate)?;
        Self::with_config(config, split, estimator, params)
    }

    /// Explicit framing, for configurations other than the two broadcast rates.
    pub fn with_config(
        config: StftConfig,
        split: usize,
        estimator: Box<dyn MaskEstimator>,
        params: RemixParams,
    ) -> Result<Self> {
        params.validate()?;
        if split > config.n_bins() || estimator.bins() != split {
            return Err(SeparatorError::BinMismatch(format!(
                "estimator takes {} bins, split is {split}, frame has {}",
                estimator.bins(),
                config.n_bins()
            )));
        }
        let plan = StftPlan::new(config);
        Ok(Self {
            analysis: StftStreamer::with_plan(plan.clone()),
            synthesis: IstftStreamer::with_plan(plan),
            estimator,
            params,
            split,
            feature_scale: MODEL_FRAME_LEN as f64 / config.frame_len() as f64,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.analysis.config()
    }

    pub fn latency_samples(&self) -> usize {
        self.config().latency_samples()
    }

    pub fn params(&self) -> RemixParams {
        self.params
    }

    /// Takes effect from the next frame.
    pub fn set_params(&mut self, params: RemixParams) -> Result<()> {
        params.validate()?;
        self.params = params;
        Ok(())
    }

    pub fn process_block(&mut self, block: &[f64]) -> Result<Vec<f64>> {
        let Some(frame) = self.analysis.push_block(block)? else {
            return Ok(self.synthesis.idle());
        };
        let out = self.process_frame(&frame)?;
        Ok(self.synthesis.push_frame(&out)?)
    }

    fn process_frame(&mut self, frame: &[Complex64]) -> Result<Vec<Complex64>> {
        let split = self.split;
        let features: Array1<f64> = frame[..split]
            .iter()
            .map(|y| y.norm() * self.feature_scale)
            .collect();
        let (sp, ns) = self.estimator.next_masks(features.view())?;
        if sp.len() != split || ns.len() != split {
            return Err(SeparatorError::BinMismatch(format!(
                "estimator returned {}/{} mask bins, expected {split}",
                sp.len(),
                ns.len()
            )));
        }
        let RemixParams { alpha, lambda } = self.params;
        let mut out = Vec::with_capacity(frame.len());
        for f in 0..split {
            let speech = frame[f] * sp[f];
            let noise = frame[f] * ns[f];
            out.push(speech + noise * alpha);
        }
        out.extend(frame[split..].iter().map(|y| y * lambda));
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.analysis.reset();
        self.synthesis.reset();
        self.estimator.reset();
    }
}

/// Runs a whole signal through a fresh [`ChannelEnhancer`]. The output is
/// `len + N + L` samples: the input delayed by the system latency.
pub fn enhance_channel(samples: &[f64], mut enhancer: ChannelEnhancer) -> Result<Vec<f64>> {
    let hop = enhancer.config().hop();
    let total = samples.len() + enhancer.latency_samples();
    let mut padded = samples.to_vec();
    padded.resize(total.div_ceil(hop) * hop, 0.0);
    let mut out = Vec::with_capacity(padded.len());
    for block in padded.chunks_exact(hop) {
        out.extend(enhancer.process_block(block)?);
    }
    out.truncate(total);
    Ok(out)
}

/// Enhances every channel independently, in parallel. `make_estimator` is
/// called once per channel index.
pub fn enhance_stream<F>(
    input: &AudioBuffer,
    make_estimator: F,
    params: RemixParams,
) -> Result<AudioBuffer>
where
    F: Fn(usize) -> Result<Box<dyn MaskEstimator>> + Sync,
{
    let rate = input.sample_rate();
    pipeline_config(rate)?;
    let channels = input
        .channels()
        .par_iter()
        .enumerate()
        .map(|(i, ch)| {
            let enhancer = ChannelEnhancer::new(rate, make_estimator(i)?, params)?;
            enhance_channel(ch, enhancer)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AudioBuffer::new(rate, channels)?)
}

/// Oracle masks for one channel of known stems, restricted to the model band.
pub fn oracle_masker(
    speech: &[f64],
    background: &[f64],
    sample_rate: u32,
) -> Result<PrecomputedMasker> {
    let (config, split) = pipeline_config(sample_rate)?;
    let plan = StftPlan::new(config);
    let sp = plan.stft(speech).band(0, split);
    let ns = plan.stft(background).band(0, split);
    let (ms, mn) = ideal_ratio_masks(&sp, &ns)?;
    PrecomputedMasker::new(ms, mn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64, amp: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-amp..amp)).collect()
    }

    fn spec(frames: usize, bins: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = StftConfig::with_frame_len(16000, 2 * (bins - 1)).unwrap();
        let data = Array2::from_shape_fn((frames, bins), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        Spectrogram { data, config }
    }

    #[test]
    fn identity_and_zero_masks() {
        let y = spec(4, 9, 1);
        let one = Mask::new(Array2::ones((4, 9)), MaskTarget::Speech).unwrap();
        let zero = one.complement();
        assert_eq!(apply_mask(&y, &one).unwrap(), y);
        assert!(apply_mask(&y, &zero)
            .unwrap()
            .data
            .iter()
            .all(|v| v.norm() == 0.0));
    }

    #[test]
    fn mask_preserves_phase() {
        let y = spec(6, 9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mask::new(
            Array2::from_shape_fn((6, 9), |_| rng.random_range(0.01..1.0)),
            MaskTarget::Speech,
        )
        .unwrap();
        let out = apply_mask(&y, &m).unwrap();
        Zip::from(&out.data).and(&y.data).for_each(|a, b| {
            if b.norm() > 1e-12 {
                assert!((a.arg() - b.arg()).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn mask_shape_mismatch() {
        let y = spec(4, 9, 1);
        let m = Mask::new(Array2::ones((3, 9)), MaskTarget::Speech).unwrap();
        assert!(matches!(
            apply_mask(&y, &m),
            Err(SeparatorError::ShapeMismatch(_))
        ));
        assert!(Mask::new(Array2::from_elem((1, 1), 1.5), MaskTarget::Noise).is_err());
    }

    #[test]
    fn complementary_masks_with_unit_alpha_restore_mixture() {
        let y = spec(5, 9, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ms = Mask::new(
            Array2::from_shape_fn((5, 9), |_| rng.random_range(0.0..1.0)),
            MaskTarget::Speech,
        )
        .unwrap();
        let mn = ms.complement();
        let r = remix(
            &apply_mask(&y, &ms).unwrap(),
            &apply_mask(&y, &mn).unwrap(),
            1.0,
        )
        .unwrap();
        Zip::from(&r.data)
            .and(&y.data)
            .for_each(|a, b| assert!((a - b).norm() < 1e-12));
        let r0 = remix(
            &apply_mask(&y, &ms).unwrap(),
            &apply_mask(&y, &mn).unwrap(),
            0.0,
        )
        .unwrap();
        assert_eq!(r0, apply_mask(&y, &ms).unwrap());
    }

    #[test]
    fn remix_is_linear() {
        let (a, b, c, d) = (spec(3, 5, 1), spec(3, 5, 2), spec(3, 5, 3), spec(3, 5, 4));
        let alpha = 0.3;
        let sum_s = Spectrogram {
            data: &a.data + &c.data,
            config: a.config,
        };
        let sum_n = Spectrogram {
            data: &b.data + &d.data,
            config: a.config,
        };
        let lhs = remix(&sum_s, &sum_n, alpha).unwrap();
        let rhs = &remix(&a, &b, alpha).unwrap().data + &remix(&c, &d, alpha).unwrap().data;
        Zip::from(&lhs.data)
            .and(&rhs)
            .for_each(|x, y| assert!((x - y).norm() < 1e-12));
    }

    #[test]
    fn hf_extend_copies_scaled_high_band() {
        let config = StftConfig::for_rate(48000).unwrap();
        let mut original = Spectrogram::zeros(config, 2, 769);
        original.data[[0, 300]] = Complex64::new(1.0, 0.0);
        let low = original.band(0, 257);
        let lambda = RemixParams::default().lambda;
        let out = hf_extend(&low, &original, lambda).unwrap();
        assert!((out.data[[0, 300]].re - 0.446684).abs() < 5e-7);
        assert_eq!(out.data[[0, 300]].im, 0.0);
        assert_eq!(hf_extend(&low, &original, 1.0).unwrap(), original);
        let silent = Spectrogram::zeros(config, 2, 769);
        assert!(hf_extend(&silent.band(0, 257), &silent, 3.0)
            .unwrap()
            .data
            .iter()
            .all(|v| v.norm() == 0.0));
        assert!(matches!(
            hf_extend(&low, &original.band(0, 700), 1.0),
            Err(SeparatorError::BinMismatch(_))
        ));
    }

    #[test]
    fn default_gains() {
        let p = RemixParams::default();
        assert!((p.alpha - 0.316228).abs() < 1e-6);
        assert!((p.lambda - 0.446684).abs() < 1e-6);
    }

    #[test]
    fn pass_through_is_a_delay() {
        for rate in [16000u32, 48000] {
            let x = noise(rate as usize, 8, 0.5);
            let input = AudioBuffer::mono(rate, x.clone()).unwrap();
            let params = RemixParams {
                alpha: 0.7,
                lambda: 1.0,
            };
            let out = enhance_stream(
                &input,
                |_| Ok(Box::new(ConstantMasker::new(MODEL_BINS, 1.0, 0.0))),
                params,
            )
            .unwrap();
            let (config, _) = pipeline_config(rate).unwrap();
            let lat = config.latency_samples();
            assert_eq!(out.len(), x.len() + lat);
            let edge = config.hop();
            let err = (edge..x.len() - edge)
                .map(|i| (out.channel(0)[i + lat] - x[i]).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "{rate}: {err}");
        }
    }

    #[test]
    fn sixteen_khz_uses_all_bins() {
        let (config, split) = pipeline_config(16000).unwrap();
        assert_eq!(split, config.n_bins());
        let (config, split) = pipeline_config(48000).unwrap();
        assert_eq!((split, config.n_bins()), (257, 769));
        assert!(matches!(
            pipeline_config(44100),
            Err(SeparatorError::UnsupportedRate(44100))
        ));
    }

    #[test]
    fn enhancement_is_deterministic_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = crate::lstm::LstmShape {
            input: 257,
            hidden: 8,
            layers: 2,
            output: 514,
        };
        let w = Arc::new(LstmWeights::random(shape, &mut rng));
        let x = noise(8000, 1, 0.3);
        let input = AudioBuffer::new(16000, vec![x.clone(), x]).unwrap();
        let run = || {
            enhance_stream(
                &input,
                |_| Ok(Box::new(LstmMasker::new(w.clone())?) as Box<dyn MaskEstimator>),
                RemixParams::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.channel(0), a.channel(1));
    }
}

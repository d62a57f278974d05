//! Listening-test stimulus construction: hidden reference, low-pass anchor
//! and enhanced conditions for one item.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::lstm::LstmWeights;
use crate::nmf::{nmf_separate, NmfConfig, NmfError};
use crate::separator::{
    db_to_gain, enhance_stream, oracle_masker, pipeline_config, LstmMasker, MaskEstimator,
    PrecomputedMasker, RemixParams, SeparatorError,
};
use crate::spectral::StftPlan;
use crate::vad::{energy_label, LstmVad, VadError, VadLabels};

#[derive(Debug, Error)]
pub enum StimulusError {
    #[error("stems misaligned: {0}")]
    StemsMisaligned(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Nmf(#[from] NmfError),
    #[error(transparent)]
    Vad(#[from] VadError),
}

pub type Result<T> = std::result::Result<T, StimulusError>;

/// Background attenuation of the hidden reference.
pub const REFERENCE_ATTENUATION_DB: f64 = -10.0;
pub const ANCHOR_CUTOFF_HZ: f64 = 3500.0;
/// Width of the anchor filter's transition band, starting at the cutoff.
pub const ANCHOR_TRANSITION_HZ: f64 = 500.0;
/// Design stopband attenuation of the anchor filter.
pub const ANCHOR_STOPBAND_DB: f64 = 70.0;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Original,
    Reference,
    Anchor,
    Lstm,
    Nmf,
    Oracle,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Original => "original",
            Condition::Reference => "reference",
            Condition::Anchor => "anchor",
            Condition::Lstm => "lstm",
            Condition::Nmf => "nmf",
            Condition::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::Original,
            Self::Reference,
            Self::Anchor,
            Self::Lstm,
            Self::Nmf,
            Self::Oracle,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundClass {
    Sports,
    Speech,
    Music,
    Environment,
}

/// A processed condition to include, besides reference and anchor.
#[derive(Debug, Clone)]
pub enum ConditionSpec {
    Original,
    Lstm(Arc<LstmWeights>),
    /// NMF with VAD labels from an LSTM detector, or from the clean speech
    /// stem when no detector is given.
    Nmf {
        config: NmfConfig,
        vad: Option<Arc<LstmWeights>>,
    },
    Oracle,
}

impl ConditionSpec {
    pub fn condition(&self) -> Condition {
        match self {
            ConditionSpec::Original => Condition::Original,
            ConditionSpec::Lstm(_) => Condition::Lstm,
            ConditionSpec::Nmf { .. } => Condition::Nmf,
            ConditionSpec::Oracle => Condition::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    pub condition: Condition,
    pub audio: AudioBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSet {
    pub item_id: String,
    pub class: BackgroundClass,
    pub stimuli: Vec<Stimulus>,
}

impl StimulusSet {
    pub fn get(&self, condition: Condition) -> Option<&AudioBuffer> {
        self.stimuli
            .iter()
            .find(|s| s.condition == condition)
            .map(|s| &s.audio)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..50 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Linear-phase Kaiser-windowed-sinc low-pass: passband up to `cutoff_hz`,
/// stopband from `cutoff_hz + transition_hz`. Odd length.
pub fn design_lowpass(
    sample_rate: u32,
    cutoff_hz: f64,
    transition_hz: f64,
    stopband_db: f64,
) -> Vec<f64> {
    let rate = sample_rate as f64;
    let beta = if stopband_db > 50.0 {
        0.1102 * (stopband_db - 8.7)
    } else if stopband_db >= 21.0 {
        0.5842 * (stopband_db - 21.0).powf(0.4) + 0.07886 * (stopband_db - 21.0)
    } else {
        0.0
    };
    let width = 2.0 * PI * transition_hz / rate;
    let mut taps = ((stopband_db - 8.0) / (2.285 * width)).ceil() as usize + 1;
    if taps % 2 == 0 {
        taps += 1;
    }
    let centre = (cutoff_hz + transition_hz / 2.0) / rate;
    let mid = (taps - 1) as f64 / 2.0;
    let norm = bessel_i0(beta);
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - mid;
            let sinc = if m == 0.0 {
                2.0 * centre
            } else {
                (2.0 * PI * centre * m).sin() / (PI * m)
            };
            let r = m / mid;
            sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Magnitude response of `taps` at `freq_hz`.
pub fn response_db(taps: &[f64], sample_rate: u32, freq_hz: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / sample_rate as f64;
    let (re, im) = taps
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(re, im), (n, &h)| {
            (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin())
        });
    20.0 * (re * re + im * im).sqrt().log10()
}

/// Filters with the symmetric FIR and removes its group delay, so the
/// output is aligned with the input and has the same length.
pub fn filter_zero_phase(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let delay = (taps.len() - 1) / 2;
    (0..x.len())
        .map(|n| {
            let centre = n + delay;
            let lo = centre.saturating_sub(x.len() - 1);
            let hi = centre.min(taps.len() - 1);
            (lo..=hi).map(|k| taps[k] * x[centre - k]).sum()
        })
        .collect()
}

/// 3.5 kHz low-pass anchor.
pub fn lowpass_anchor(buffer: &AudioBuffer) -> Result<AudioBuffer> {
    let taps = design_lowpass(
        buffer.sample_rate(),
        ANCHOR_CUTOFF_HZ,
        ANCHOR_TRANSITION_HZ,
        ANCHOR_STOPBAND_DB,
    );
    let channels = buffer
        .channels()
        .iter()
        .map(|c| filter_zero_phase(c, &taps))
        .collect();
    Ok(AudioBuffer::new(buffer.sample_rate(), channels)?)
}

fn check_aligned(speech: &AudioBuffer, background: &AudioBuffer) -> Result<()> {
    if speech.sample_rate() != background.sample_rate()
        || speech.num_channels() != background.num_channels()
        || speech.len() != background.len()
    {
        return Err(StimulusError::StemsMisaligned(format!(
            "speech {} Hz x{} x{} samples, background {} Hz x{} x{} samples",
            speech.sample_rate(),
            speech.num_channels(),
            speech.len(),
            background.sample_rate(),
            background.num_channels(),
            background.len()
        )));
    }
    Ok(())
}

/// Background scaled so the stems mix at `snr_db` (power over all channels).
pub fn scale_background(
    speech: &AudioBuffer,
    background: &AudioBuffer,
    snr_db: f64,
) -> Result<AudioBuffer> {
    check_aligned(speech, background)?;
    let (ps, pb) = (speech.power(), background.power());
    if ps <= 0.0 || pb <= 0.0 {
        return Err(StimulusError::Missing("silent stem".into()));
    }
    Ok(background.scaled((ps / (pb * 10f64.powf(snr_db / 10.0))).sqrt()))
}

/// Enhanced version of `mixture`, trimmed of the pipeline latency so it is
/// sample-aligned with the input.
pub fn enhance_aligned<F>(
    mixture: &AudioBuffer,
    make: F,
    params: RemixParams,
) -> Result<AudioBuffer>
where
    F: Fn(usize) -> std::result::Result<Box<dyn MaskEstimator>, SeparatorError> + Sync,
{
    let (config, _) = pipeline_config(mixture.sample_rate())?;
    let out = enhance_stream(mixture, make, params)?;
    let lat = config.latency_samples();
    let len = mixture.len();
    let channels = out
        .channels()
        .iter()
        .map(|c| c[lat..lat + len].to_vec())
        .collect();
    Ok(AudioBuffer::new(mixture.sample_rate(), channels)?)
}

/// VAD labels for one channel on the pipeline's frame grid.
pub fn channel_vad(
    mixture: &[f64],
    clean_speech: Option<&[f64]>,
    sample_rate: u32,
    detector: Option<&LstmWeights>,
) -> Result<VadLabels> {
    let (config, split) = pipeline_config(sample_rate)?;
    match (detector, clean_speech) {
        (Some(w), _) => {
            let spec = StftPlan::new(config).stft(mixture);
            let scale = 512.0 / config.frame_len() as f64;
            let mags = spec.band(0, split).magnitudes().mapv(|m| m * scale);
            let mut vad = LstmVad::new(w.clone())?;
            Ok(vad.label_sequence(mags.view())?.1)
        }
        (None, Some(clean)) => Ok(energy_label(
            &AudioBuffer::mono(sample_rate, clean.to_vec())?,
            &config,
        )?),
        (None, None) => Ok(energy_label(
            &AudioBuffer::mono(sample_rate, mixture.to_vec())?,
            &config,
        )?),
    }
}

/// NMF masks for one channel of a mixture, restricted to the model band.
pub fn nmf_masker(
    mixture: &[f64],
    sample_rate: u32,
    vad: &VadLabels,
    config: &NmfConfig,
) -> Result<PrecomputedMasker> {
    let (stft, split) = pipeline_config(sample_rate)?;
    let spec = StftPlan::new(stft).stft(mixture).band(0, split);
    let (speech, noise) = nmf_separate(&spec, vad, config)?;
    Ok(PrecomputedMasker::new(speech, noise)?)
}

/// Builds the stimuli for one item. With `mix_snr_db` the background is
/// first rescaled so the original mixes at that SNR; otherwise the stems
/// are mixed as given.
pub fn build_stimulus_set(
    item_id: &str,
    class: BackgroundClass,
    speech: &AudioBuffer,
    background: &AudioBuffer,
    mix_snr_db: Option<f64>,
    conditions: &[ConditionSpec],
    params: RemixParams,
) -> Result<StimulusSet> {
    check_aligned(speech, background)?;
    let background = match mix_snr_db {
        Some(snr) => scale_background(speech, background, snr)?,
        None => background.clone(),
    };
    let original = crate::audio::mix(&[speech.clone(), background.clone()])?;
    let reference = crate::audio::mix(&[
        speech.clone(),
        background.scaled(db_to_gain(REFERENCE_ATTENUATION_DB)),
    ])?;
    let anchor = lowpass_anchor(&original)?;
    let rate = original.sample_rate();

    let mut stimuli = vec![
        Stimulus {
            condition: Condition::Reference,
            audio: reference,
        },
        Stimulus {
            condition: Condition::Anchor,
            audio: anchor,
        },
    ];
    for spec in conditions {
        let audio = match spec {
            ConditionSpec::Original => original.clone(),
            ConditionSpec::Lstm(w) => enhance_aligned(
                &original,
                |_| Ok(Box::new(LstmMasker::new(w.clone())?) as Box<dyn MaskEstimator>),
                params,
            )?,
            ConditionSpec::Oracle => enhance_aligned(
                &original,
                |ch| {
                    Ok(Box::new(oracle_masker(
                        speech.channel(ch),
                        background.channel(ch),
                        rate,
                    )?) as Box<dyn MaskEstimator>)
                },
                params,
            )?,
            ConditionSpec::Nmf { config, vad } => {
                let maskers = (0..original.num_channels())
                    .map(|ch| {
                        let labels = channel_vad(
                            original.channel(ch),
                            Some(speech.channel(ch)),
                            rate,
                            vad.as_deref(),
                        )?;
                        nmf_masker(original.channel(ch), rate, &labels, config)
                    })
                    .collect::<Result<Vec<_>>>()?;
                enhance_aligned(
                    &original,
                    |ch| Ok(Box::new(maskers[ch].clone()) as Box<dyn MaskEstimator>),
                    params,
                )?
            }
        };
        if stimuli.iter().any(|s| s.condition == spec.condition()) {
            return Err(StimulusError::Missing(format!(
                "condition {} listed twice",
                spec.condition().name()
            )));
        }
        stimuli.push(Stimulus {
            condition: spec.condition(),
            audio,
        });
    }
    Ok(StimulusSet {
        item_id: item_id.to_string(),
        class,
        stimuli,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstats::snr_db;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(rate: u32, freq: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn anchor_response() {
        for rate in [16000, 48000] {
            let h = design_lowpass(
                rate,
                ANCHOR_CUTOFF_HZ,
                ANCHOR_TRANSITION_HZ,
                ANCHOR_STOPBAND_DB,
            );
            assert!(h.len() % 2 == 1);
            assert!(
                h.iter()
                    .zip(h.iter().rev())
                    .all(|(a, b)| (a - b).abs() < 1e-15),
                "linear phase"
            );
            assert!(response_db(&h, rate, 1000.0).abs() < 0.01);
            assert!(response_db(&h, rate, 3000.0).abs() < 0.01);
            for f in [4000.0, 5000.0, 7000.0] {
                assert!(
                    response_db(&h, rate, f) < -60.0,
                    "{rate} Hz at {f}: {}",
                    response_db(&h, rate, f)
                );
            }
            // Measured on tones through the actual filtering path.
            let len = rate as usize;
            let pass = filter_zero_phase(&sine(rate, 1000.0, len), &h);
            let stop = filter_zero_phase(&sine(rate, 5000.0, len), &h);
            let mid = len / 4..3 * len / 4;
            let drop = 20.0 * (rms(&pass[mid.clone()]) / rms(&stop[mid])).log10();
            assert!(drop >= 40.0, "{drop}");
        }
    }

    #[test]
    fn zero_phase_keeps_alignment() {
        let h = design_lowpass(
            16000,
            ANCHOR_CUTOFF_HZ,
            ANCHOR_TRANSITION_HZ,
            ANCHOR_STOPBAND_DB,
        );
        let x = sine(16000, 500.0, 4000);
        let y = filter_zero_phase(&x, &h);
        assert_eq!(y.len(), x.len());
        let err = (1000..3000)
            .map(|i| (y[i] - x[i]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    fn stems(seed: u64) -> (AudioBuffer, AudioBuffer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Speech-like bursts: 300 ms on, 200 ms off.
        let s: Vec<f64> = sine(16000, 300.0, 16000)
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 8000 < 4800 { 0.5 * v } else { 0.0 })
            .collect();
        let n: Vec<f64> = (0..16000).map(|_| rng.random_range(-0.3..0.3)).collect();
        (
            AudioBuffer::mono(16000, s).unwrap(),
            AudioBuffer::mono(16000, n).unwrap(),
        )
    }

    #[test]
    fn reference_is_ten_db_above_original() {
        let (s, n) = stems(1);
        let set = build_stimulus_set(
            "a",
            BackgroundClass::Sports,
            &s,
            &n,
            Some(0.0),
            &[ConditionSpec::Original],
            RemixParams::default(),
        )
        .unwrap();
        let original = set.get(Condition::Original).unwrap();
        let reference = set.get(Condition::Reference).unwrap();
        let bg_orig: Vec<f64> = original
            .channel(0)
            .iter()
            .zip(s.channel(0))
            .map(|(m, s)| m - s)
            .collect();
        let bg_ref: Vec<f64> = reference
            .channel(0)
            .iter()
            .zip(s.channel(0))
            .map(|(m, s)| m - s)
            .collect();
        let gain = snr_db(s.channel(0), &bg_ref).unwrap() - snr_db(s.channel(0), &bg_orig).unwrap();
        assert!((gain - 10.0).abs() < 1e-9, "{gain}");
        assert!((snr_db(s.channel(0), &bg_orig).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn set_sizes_and_alignment() {
        let (s, n) = stems(2);
        let set = build_stimulus_set(
            "b",
            BackgroundClass::Music,
            &s,
            &n,
            None,
            &[
                ConditionSpec::Original,
                ConditionSpec::Oracle,
                ConditionSpec::Nmf {
                    config: NmfConfig::default(),
                    vad: None,
                },
            ],
            RemixParams::default(),
        )
        .unwrap();
        assert_eq!(set.stimuli.len(), 5);
        assert!(set
            .stimuli
            .iter()
            .all(|st| st.audio.len() == s.len() && st.audio.sample_rate() == 16000));
        let short = AudioBuffer::mono(16000, vec![0.0; 10]).unwrap();
        assert!(matches!(
            build_stimulus_set(
                "c",
                BackgroundClass::Speech,
                &s,
                &short,
                None,
                &[],
                RemixParams::default()
            ),
            Err(StimulusError::StemsMisaligned(_))
        ));
    }
}

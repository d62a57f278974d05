//! Voice activity detection: an energy labeler for clean speech and a
//! small streaming LSTM detector for mixtures.

use ndarray::{Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::lstm::{network_step, LstmError, LstmShape, LstmState, LstmWeights};
use crate::spectral::StftConfig;

#[derive(Debug, Error)]
pub enum VadError {
    #[error("empty input")]
    EmptyInput,
    #[error("labels must be 0 or 1")]
    InvalidLabel,
    #[error(transparent)]
    Lstm(#[from] LstmError),
}

pub type Result<T> = std::result::Result<T, VadError>;

/// Frames must exceed the noise floor by this margin to count as speech.
pub const MARGIN_DB: f64 = 9.0;
/// Runs of at most this many non-speech frames between speech frames are
/// relabeled as speech.
pub const HANGOVER_FRAMES: usize = 2;
/// Used instead of the percentile rule when the signal has no dynamic range.
pub const ABSOLUTE_FLOOR_DBFS: f64 = -60.0;
/// Floor percentile of the frame RMS distribution.
pub const FLOOR_PERCENTILE: f64 = 10.0;

/// Per-frame speech (1) / non-speech (0) labels on the STFT frame grid.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VadLabels(Vec<u8>);

impl VadLabels {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if labels.iter().any(|&v| v > 1) {
            return Err(VadError::InvalidLabel);
        }
        Ok(Self(labels))
    }

    pub fn from_bools(flags: impl IntoIterator<Item = bool>) -> Self {
        Self(flags.into_iter().map(u8::from).collect())
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_speech(&self, frame: usize) -> bool {
        self.0[frame] == 1
    }

    /// Indices of non-speech frames.
    pub fn pause_frames(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn speech_fraction(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|&v| v as f64).sum::<f64>() / self.0.len() as f64
    }
}

/// Unwindowed RMS of every analysis frame, channels averaged in power.
/// Frame `t` covers `[tL, tL + N)`, zero-padded past the end.
pub fn frame_rms(buffer: &AudioBuffer, config: &StftConfig) -> Vec<f64> {
    let (n, hop) = (config.frame_len(), config.hop());
    let frames = config.frames_for(buffer.len());
    (0..frames)
        .map(|t| {
            let start = t * hop;
            let end = (start + n).min(buffer.len());
            let energy: f64 = buffer
                .channels()
                .iter()
                .map(|ch| ch[start..end].iter().map(|v| v * v).sum::<f64>())
                .sum();
            (energy / (n * buffer.num_channels()) as f64).sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile (`p` in 0..=100) of unsorted data.
pub(crate) fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Relabels short non-speech runs enclosed by speech on both sides.
pub fn bridge_gaps(labels: &mut [u8], max_gap: usize) {
    let mut last_speech: Option<usize> = None;
    for t in 0..labels.len() {
        if labels[t] == 1 {
            if let Some(prev) = last_speech {
                let gap = t - prev - 1;
                if gap > 0 && gap <= max_gap {
                    labels[prev + 1..t].fill(1);
                }
            }
            last_speech = Some(t);
        }
    }
}

/// Threshold labeler for clean speech: a frame is speech when its RMS
/// exceeds the 10th-percentile floor by [`MARGIN_DB`].
pub fn energy_label(clean_speech: &AudioBuffer, config: &StftConfig) -> Result<VadLabels> {
    if clean_speech.is_empty() {
        return Err(VadError::EmptyInput);
    }
    let rms = frame_rms(clean_speech, config);
    let floor = percentile(&rms, FLOOR_PERCENTILE);
    let threshold = floor * 10f64.powf(MARGIN_DB / 20.0);
    let peak = rms.iter().copied().fold(0.0, f64::max);
    let mut labels: Vec<u8> = if peak > threshold {
        rms.iter().map(|&r| u8::from(r > threshold)).collect()
    } else {
        let absolute = 10f64.powf(ABSOLUTE_FLOOR_DBFS / 20.0);
        rms.iter().map(|&r| u8::from(r > absolute)).collect()
    };
    bridge_gaps(&mut labels, HANGOVER_FRAMES);
    Ok(VadLabels(labels))
}

/// One streaming step of the LSTM detector; returns the speech probability.
pub fn lstm_vad_step(
    magnitude_frame: ArrayView1<'_, f64>,
    state: &mut LstmState,
    weights: &LstmWeights,
) -> Result<f64> {
    let out = network_step(magnitude_frame, state, weights)?;
    if out.len() != 1 {
        return Err(LstmError::DimensionMismatch(format!(
            "VAD network has {} outputs, expected 1",
            out.len()
        ))
        .into());
    }
    Ok(out[0])
}

pub fn probability_to_label(p: f64) -> u8 {
    u8::from(p > 0.5)
}

/// Stateful LSTM detector over magnitude frames.
#[derive(Debug, Clone)]
pub struct LstmVad {
    weights: LstmWeights,
    state: LstmState,
}

impl LstmVad {
    pub fn new(weights: LstmWeights) -> Result<Self> {
        weights.validate()?;
        if weights.shape().output != 1 {
            return Err(
                LstmError::DimensionMismatch("VAD network must have one output".into()).into(),
            );
        }
        Ok(Self {
            state: LstmState::zeros(weights.shape()),
            weights,
        })
    }

    pub fn untrained() -> Self {
        Self::new(LstmWeights::zeros(LstmShape::VAD)).expect("reference VAD shape is valid")
    }

    pub fn step(&mut self, magnitude_frame: ArrayView1<'_, f64>) -> Result<f64> {
        lstm_vad_step(magnitude_frame, &mut self.state, &self.weights)
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    /// Probabilities and labels for a `frames x bins` magnitude matrix,
    /// starting from a fresh state.
    pub fn label_sequence(
        &mut self,
        magnitudes: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, VadLabels)> {
        self.reset();
        let probs = magnitudes
            .rows()
            .into_iter()
            .map(|row| self.step(row))
            .collect::<Result<Vec<_>>>()?;
        let labels = VadLabels(probs.iter().map(|&p| probability_to_label(p)).collect());
        Ok((probs, labels))
    }
}

/// Frame-level agreement between two label sequences.
pub fn frame_accuracy(a: &VadLabels, b: &VadLabels) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count() as f64 / n as f64
}

/// Magnitudes as a `frames x bins` matrix, convenient for the detector.
pub fn magnitudes_of(spec: &crate::spectral::Spectrogram, bins: usize) -> Array2<f64> {
    spec.band(0, bins).magnitudes()
}

//! Online mixture generation: synthetic stem generators and a loader for
//! user-supplied `speech/` + `background/` WAV folders.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Result, TrainError};
use crate::audio::{read_wav, AudioBuffer};

/// Stems below this mean power are treated as silent and redrawn.
const MIN_STEM_POWER: f64 = 1e-10;
const MAX_REDRAWS: usize = 16;

/// Synthetic stem families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureKind {
    /// Gated harmonic complexes (100-250 Hz fundamental) against white noise.
    TonesVsNoise,
    /// Syllable-rate modulated band noise against sustained chords.
    AmNoiseVsMusicLike,
}

/// Stems and their mixture. `mixture = speech + background` exactly; the
/// background is already scaled to the requested SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub speech: AudioBuffer,
    pub background: AudioBuffer,
    pub mixture: AudioBuffer,
    pub snr_db: f64,
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Scales `background` so that `10 log10(P_speech / P_background) = snr_db`
/// and returns the scaled background and the mixture.
pub fn mix_at_snr(speech: &[f64], background: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if speech.len() != background.len() {
        return Err(TrainError::LengthMismatch(speech.len(), background.len()));
    }
    let (ps, pb) = (mean_power(speech), mean_power(background));
    if ps <= 0.0 || pb <= 0.0 {
        return Err(TrainError::DegenerateTarget);
    }
    let gain = (ps / (pb * 10f64.powf(snr_db / 10.0))).sqrt();
    let bg: Vec<f64> = background.iter().map(|v| v * gain).collect();
    let mix = speech.iter().zip(&bg).map(|(s, b)| s + b).collect();
    Ok((bg, mix))
}

/// Raised-cosine on/off gate made of alternating segments.
fn syllable_gate<R: Rng + ?Sized>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let ramp = (0.01 * rate) as usize;
    let mut gate = vec![0.0; len];
    let mut pos = (rng.random_range(0.0..0.1) * rate) as usize;
    while pos < len {
        let on = (rng.random_range(0.15..0.4) * rate) as usize;
        let end = (pos + on).min(len);
        for (i, g) in gate[pos..end].iter_mut().enumerate() {
            let rise = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let left = end - pos - i;
            let fall = if left < ramp {
                0.5 - 0.5 * (PI * left as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            *g = rise.min(fall);
        }
        pos = end + (rng.random_range(0.05..0.25) * rate) as usize;
    }
    gate
}

fn harmonic_speech<R: Rng + ?Sized>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let f0 = rng.random_range(100.0..250.0);
    let drift = rng.random_range(0.5..2.0);
    let depth = rng.random_range(0.0..0.05);
    let harmonics = (2000.0 / f0) as usize;
    let phases: Vec<f64> = (0..harmonics)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let gate = syllable_gate(rng, len, rate);
    let mut phase = 0.0;
    (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            let f = f0 * (1.0 + depth * (2.0 * PI * drift * t).sin());
            phase += 2.0 * PI * f / rate;
            let v: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, p)| ((k + 1) as f64 * phase + p).sin() / (k + 1) as f64)
                .sum();
            0.3 * v * gate[i]
        })
        .collect()
}

fn white_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Band noise (two one-pole sections) under a squared 3-6 Hz envelope.
fn modulated_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let rate_hz = rng.random_range(3.0..6.0);
    let offset = rng.random_range(0.0..2.0 * PI);
    let lp = (-2.0 * PI * 3000.0 / rate).exp();
    let hp = (-2.0 * PI * 300.0 / rate).exp();
    let (mut low, mut slow) = (0.0, 0.0);
    (0..len)
        .map(|i| {
            let n: f64 = StandardNormal.sample(rng);
            low = (1.0 - lp) * n + lp * low;
            slow = (1.0 - hp) * low + hp * slow;
            let env = 0.5 + 0.5 * (2.0 * PI * rate_hz * i as f64 / rate + offset).sin();
            (low - slow) * env * env
        })
        .collect()
}

/// Three-note harmonic chords changing every half second.
fn chords<R: Rng + ?Sized>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let segment = (0.5 * rate) as usize;
    let mut out = vec![0.0; len];
    for start in (0..len).step_by(segment.max(1)) {
        let end = (start + segment).min(len);
        let root = 200.0 * 2f64.powf(rng.random_range(0.0..2.0));
        for ratio in [1.0, 1.25, 1.5] {
            let f = root * ratio;
            let ph = rng.random_range(0.0..2.0 * PI);
            for (i, o) in out[start..end].iter_mut().enumerate() {
                let t = (start + i) as f64 / rate;
                let decay = (-2.0 * i as f64 / segment as f64).exp();
                *o += decay * ((2.0 * PI * f * t + ph).sin() + 0.5 * (4.0 * PI * f * t + ph).sin());
            }
        }
    }
    out
}

fn draw_stem<R: Rng + ?Sized>(
    rng: &mut R,
    mut make: impl FnMut(&mut R) -> Vec<f64>,
) -> Result<Vec<f64>> {
    for _ in 0..MAX_REDRAWS {
        let x = make(rng);
        if mean_power(&x) > MIN_STEM_POWER {
            return Ok(x);
        }
    }
    Err(TrainError::Corpus(
        "could not draw a non-silent stem".into(),
    ))
}

pub fn synth_speech<R: Rng + ?Sized>(
    rng: &mut R,
    kind: MixtureKind,
    len: usize,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    let rate = sample_rate as f64;
    draw_stem(rng, |r| match kind {
        MixtureKind::TonesVsNoise => harmonic_speech(r, len, rate),
        MixtureKind::AmNoiseVsMusicLike => modulated_noise(r, len, rate),
    })
}

pub fn synth_background<R: Rng + ?Sized>(
    rng: &mut R,
    kind: MixtureKind,
    len: usize,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    let rate = sample_rate as f64;
    draw_stem(rng, |r| match kind {
        MixtureKind::TonesVsNoise => white_noise(r, len),
        MixtureKind::AmNoiseVsMusicLike => chords(r, len, rate),
    })
}

/// One synthetic mixture at exactly `snr_db`.
pub fn synth_mixture<R: Rng + ?Sized>(
    rng: &mut R,
    duration_s: f64,
    snr_db: f64,
    kind: MixtureKind,
    sample_rate: u32,
) -> Result<MixtureSample> {
    let len = (duration_s * sample_rate as f64).round() as usize;
    let speech = synth_speech(rng, kind, len, sample_rate)?;
    let background = synth_background(rng, kind, len, sample_rate)?;
    assemble(speech, background, snr_db, sample_rate)
}

fn assemble(
    speech: Vec<f64>,
    background: Vec<f64>,
    snr_db: f64,
    rate: u32,
) -> Result<MixtureSample> {
    let (bg, mix) = mix_at_snr(&speech, &background, snr_db)?;
    Ok(MixtureSample {
        speech: AudioBuffer::mono(rate, speech)?,
        background: AudioBuffer::mono(rate, bg)?,
        mixture: AudioBuffer::mono(rate, mix)?,
        snr_db,
    })
}

/// WAV files under `<root>/speech` and `<root>/background`. Multichannel
/// files are downmixed; files at other rates are rejected when read.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speech: Vec<PathBuf>,
    pub background: Vec<PathBuf>,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let list = |sub: &str| -> Result<Vec<PathBuf>> {
            let dir = root.as_ref().join(sub);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| TrainError::Corpus(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(TrainError::Corpus(format!(
                    "no WAV files in {}",
                    dir.display()
                )));
            }
            Ok(files)
        };
        Ok(Self {
            speech: list("speech")?,
            background: list("background")?,
        })
    }

    fn excerpt<R: Rng + ?Sized>(
        rng: &mut R,
        path: &Path,
        len: usize,
        rate: u32,
    ) -> Result<Vec<f64>> {
        let buf = read_wav(path)?;
        if buf.sample_rate() != rate {
            return Err(TrainError::Corpus(format!(
                "{} is {} Hz, expected {rate}",
                path.display(),
                buf.sample_rate()
            )));
        }
        let chans = buf.num_channels() as f64;
        let mono: Vec<f64> = (0..buf.len())
            .map(|i| buf.channels().iter().map(|c| c[i]).sum::<f64>() / chans)
            .collect();
        let mut out = vec![0.0; len];
        if mono.len() <= len {
            out[..mono.len()].copy_from_slice(&mono);
        } else {
            let start = rng.random_range(0..=mono.len() - len);
            out.copy_from_slice(&mono[start..start + len]);
        }
        Ok(out)
    }
}

/// Where stems come from. Clips are addressed by id; ids whose remainder
/// mod 5 is 4 form the validation pool (a 80/20 split).
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        kind: MixtureKind,
        seed: u64,
        clips: usize,
    },
    Corpus(Corpus),
}

/// Split that a clip id belongs to.
pub fn is_validation_clip(id: usize) -> bool {
    id % 5 == 4
}

impl DataSource {
    pub fn clip_count(&self) -> (usize, usize) {
        match self {
            DataSource::Synthetic { clips, .. } => (*clips, *clips),
            DataSource::Corpus(c) => (c.speech.len(), c.background.len()),
        }
    }

    fn pool(count: usize, validation: bool) -> Vec<usize> {
        let ids: Vec<usize> = (0..count)
            .filter(|&i| is_validation_clip(i) == validation)
            .collect();
        if ids.is_empty() {
            (0..count).collect()
        } else {
            ids
        }
    }

    fn clip_rng(seed: u64, stream: u64, id: usize) -> ChaCha8Rng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(stream);
        rng
    }

    fn speech_clip<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        id: usize,
        len: usize,
        rate: u32,
    ) -> Result<Vec<f64>> {
        match self {
            DataSource::Synthetic { kind, seed, .. } => {
                synth_speech(&mut Self::clip_rng(*seed, 1, id), *kind, len, rate)
            }
            DataSource::Corpus(c) => Corpus::excerpt(rng, &c.speech[id], len, rate),
        }
    }

    fn background_clip<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        id: usize,
        len: usize,
        rate: u32,
    ) -> Result<Vec<f64>> {
        match self {
            DataSource::Synthetic { kind, seed, .. } => {
                synth_background(&mut Self::clip_rng(*seed, 2, id), *kind, len, rate)
            }
            DataSource::Corpus(c) => Corpus::excerpt(rng, &c.background[id], len, rate),
        }
    }

    /// Draws a fresh pairing of a speech and a background clip from one
    /// split at a random SNR in `snr_range`.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        validation: bool,
        duration_s: f64,
        snr_range: (f64, f64),
        rate: u32,
    ) -> Result<MixtureSample> {
        let len = (duration_s * rate as f64).round() as usize;
        let (ns, nb) = self.clip_count();
        let (sp_pool, bg_pool) = (Self::pool(ns, validation), Self::pool(nb, validation));
        for _ in 0..MAX_REDRAWS {
            let s = sp_pool[rng.random_range(0..sp_pool.len())];
            let b = bg_pool[rng.random_range(0..bg_pool.len())];
            let snr = if snr_range.0 < snr_range.1 {
                rng.random_range(snr_range.0..=snr_range.1)
            } else {
                snr_range.0
            };
            let speech = self.speech_clip(rng, s, len, rate)?;
            let background = self.background_clip(rng, b, len, rate)?;
            if mean_power(&speech) > MIN_STEM_POWER && mean_power(&background) > MIN_STEM_POWER {
                return assemble(speech, background, snr, rate);
            }
        }
        Err(TrainError::Corpus(
            "could not draw a non-silent pair".into(),
        ))
    }
}

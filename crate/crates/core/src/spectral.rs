//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frames are `N` samples long with a hop of `L = N / 2`. Analysis uses a
//! periodic hann window `w`. Synthesis uses `v[n] = w[n] / sum_t w^2[n - tL]`,
//! which makes `sum_t w[n - tL] v[n - tL] = 1` wherever two frames overlap,
//! so `istft(stft(x))` reproduces `x` away from the first and last hop.
//!
//! Offline frame `t` covers samples `[tL, tL + N)`; the tail is zero padded
//! to `ceil(len / L)` frames. The streaming pair ([`StftStreamer`],
//! [`IstftStreamer`]) produces exactly the offline frames and reproduces the
//! offline output delayed by `N + L` samples.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
pub use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("block size mismatch: expected {expected}, got {got}")]
    BlockSizeMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported sample rate: {0} Hz")]
    UnsupportedRate(u32),
    #[error("invalid frame length {0}: must be even and at least 2")]
    InvalidFrameLength(usize),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Frame duration used by the engine.
pub const FRAME_MS: u32 = 32;

/// Framing parameters. `hop == frame_len / 2` always.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    sample_rate: u32,
    frame_len: usize,
}

impl StftConfig {
    /// 32 ms frames with a 16 ms hop. Only rates where that frame is an
    /// even number of samples are accepted (16 kHz -> 512, 48 kHz -> 1536).
    pub fn for_rate(sample_rate: u32) -> Result<Self> {
        let samples = sample_rate as u64 * FRAME_MS as u64;
        if sample_rate == 0 || samples % 1000 != 0 || (samples / 1000) % 2 != 0 {
            return Err(SpectralError::UnsupportedRate(sample_rate));
        }
        Self::with_frame_len(sample_rate, (samples / 1000) as usize)
    }

    /// Arbitrary even frame length, mainly for small test models.
    pub fn with_frame_len(sample_rate: u32, frame_len: usize) -> Result<Self> {
        if frame_len < 2 || frame_len % 2 != 0 {
            return Err(SpectralError::InvalidFrameLength(frame_len));
        }
        Ok(Self {
            sample_rate,
            frame_len,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.frame_len / 2
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn bin_spacing_hz(&self) -> f64 {
        self.sample_rate as f64 / self.frame_len as f64
    }

    /// End-to-end delay of the streaming analysis/synthesis chain.
    pub fn latency_samples(&self) -> usize {
        self.frame_len + self.hop()
    }

    /// Number of frames `stft` produces for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop())
    }

    /// Length of the `istft` output for `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        frames * self.hop() + self.frame_len - self.hop()
    }

    pub fn analysis_window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }

    pub fn synthesis_window(&self) -> Vec<f64> {
        let w = self.analysis_window();
        let hop = self.hop();
        (0..self.frame_len)
            .map(|i| {
                let norm: f64 = (0..self.frame_len / hop)
                    .map(|k| w[(i + k * hop) % self.frame_len].powi(2))
                    .sum();
                w[i] / norm
            })
            .collect()
    }
}

/// Complex time-frequency matrix, shape `(frames, bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn zeros(config: StftConfig, frames: usize, bins: usize) -> Self {
        Self {
            data: Array2::zeros((frames, bins)),
            config,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, Complex64> {
        self.data.row(t)
    }

    /// Bins `[start, end)` of every frame.
    pub fn band(&self, start: usize, end: usize) -> Spectrogram {
        Spectrogram {
            data: self.data.slice(ndarray::s![.., start..end]).to_owned(),
            config: self.config,
        }
    }
}

/// Reusable FFT plans and windows for one [`StftConfig`]. Cheap to clone.
#[derive(Clone)]
pub struct StftPlan {
    config: StftConfig,
    window: Arc<[f64]>,
    synth_window: Arc<[f64]>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("config", &self.config)
            .finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            config,
            window: config.analysis_window().into(),
            synth_window: config.synthesis_window().into(),
            forward: planner.plan_fft_forward(config.frame_len),
            inverse: planner.plan_fft_inverse(config.frame_len),
        }
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn synthesis_window(&self) -> &[f64] {
        &self.synth_window
    }

    /// Windowed DFT of one frame, non-negative frequencies only.
    pub fn analyze(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(self.window.iter())
            .map(|(x, w)| Complex64::new(x * w, 0.0))
            .collect();
        self.forward.process(&mut buf);
        buf.truncate(self.config.n_bins());
        buf
    }

    /// Inverse DFT (with `1/N`) of a half spectrum, multiplied by the
    /// synthesis window. Imaginary parts of DC and Nyquist are ignored.
    pub fn synthesize(&self, spectrum: &[Complex64], out: &mut [f64]) {
        let n = self.config.frame_len;
        let half = n / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..=half].copy_from_slice(&spectrum[..=half]);
        for f in 1..half {
            buf[n - f] = spectrum[f].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for ((o, b), v) in out.iter_mut().zip(&buf).zip(self.synth_window.iter()) {
            *o = b.re * scale * v;
        }
    }

    /// Plain forward DFT of a real buffer of length `N`, all `N` bins.
    pub fn dft(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    pub fn stft(&self, signal: &[f64]) -> Spectrogram {
        let n = self.config.frame_len;
        let hop = self.config.hop();
        let frames = self.config.frames_for(signal.len());
        let bins = self.config.n_bins();
        let mut data = Array2::zeros((frames, bins));
        let mut block = vec![0.0; n];
        for t in 0..frames {
            let start = t * hop;
            let end = (start + n).min(signal.len());
            block.fill(0.0);
            block[..end - start].copy_from_slice(&signal[start..end]);
            let spec = self.analyze(&block);
            data.row_mut(t)
                .iter_mut()
                .zip(spec)
                .for_each(|(d, s)| *d = s);
        }
        Spectrogram {
            data,
            config: self.config,
        }
    }

    pub fn istft(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        if spec.config != self.config {
            return Err(SpectralError::ConfigMismatch(format!(
                "spectrogram {:?} vs plan {:?}",
                spec.config, self.config
            )));
        }
        if spec.bins() != self.config.n_bins() {
            return Err(SpectralError::ShapeMismatch(format!(
                "{} bins, expected {}",
                spec.bins(),
                self.config.n_bins()
            )));
        }
        let n = self.config.frame_len;
        let hop = self.config.hop();
        let mut out = vec![0.0; self.config.output_len(spec.frames())];
        let mut frame = vec![0.0; n];
        let mut row = vec![Complex64::new(0.0, 0.0); spec.bins()];
        for t in 0..spec.frames() {
            row.iter_mut()
                .zip(spec.data.row(t))
                .for_each(|(r, s)| *r = *s);
            self.synthesize(&row, &mut frame);
            for (o, x) in out[t * hop..t * hop + n].iter_mut().zip(&frame) {
                *o += x;
            }
        }
        Ok(out)
    }
}

pub fn stft(signal: &[f64], sample_rate: u32, config: StftConfig) -> Result<Spectrogram> {
    if sample_rate != config.sample_rate {
        return Err(SpectralError::ConfigMismatch(format!(
            "signal at {sample_rate} Hz, config at {} Hz",
            config.sample_rate
        )));
    }
    Ok(StftPlan::new(config).stft(signal))
}

pub fn istft(spec: &Spectrogram, config: StftConfig) -> Result<Vec<f64>> {
    StftPlan::new(config).istft(spec)
}

/// Frame-at-a-time analysis. Accepts blocks of exactly `L` samples and
/// returns a frame once `N` samples have been seen, then one frame per block.
#[derive(Debug, Clone)]
pub struct StftStreamer {
    plan: StftPlan,
    buffer: Vec<f64>,
    seen: usize,
}

impl StftStreamer {
    pub fn new(config: StftConfig) -> Self {
        Self::with_plan(StftPlan::new(config))
    }

    pub fn with_plan(plan: StftPlan) -> Self {
        let n = plan.config.frame_len;
        Self {
            plan,
            buffer: vec![0.0; n],
            seen: 0,
        }
    }

    pub fn config(&self) -> StftConfig {
        self.plan.config
    }

    pub fn push_block(&mut self, block: &[f64]) -> Result<Option<Vec<Complex64>>> {
        let hop = self.plan.config.hop();
        if block.len() != hop {
            return Err(SpectralError::BlockSizeMismatch {
                expected: hop,
                got: block.len(),
            });
        }
        self.buffer.copy_within(hop.., 0);
        let n = self.buffer.len();
        self.buffer[n - hop..].copy_from_slice(block);
        self.seen += hop;
        if self.seen < n {
            return Ok(None);
        }
        Ok(Some(self.plan.analyze(&self.buffer)))
    }

    pub fn reset(&mut self) {
        self.buffer.fill(0.0);
        self.seen = 0;
    }
}

/// Frame-at-a-time synthesis. Each pushed frame yields `L` samples. Call
/// [`IstftStreamer::idle`] for hops where the analysis side produced no
/// frame so the output clock keeps running.
#[derive(Debug, Clone)]
pub struct IstftStreamer {
    plan: StftPlan,
    overlap: Vec<f64>,
    delay: VecDeque<f64>,
    scratch: Vec<f64>,
}

impl IstftStreamer {
    pub fn new(config: StftConfig) -> Self {
        Self::with_plan(StftPlan::new(config))
    }

    pub fn with_plan(plan: StftPlan) -> Self {
        let n = plan.config.frame_len;
        // one hop of latency comes from the overlap-add itself, the frame
        // length is held in the delay line: N + L end to end
        Self {
            plan,
            overlap: vec![0.0; n],
            delay: std::iter::repeat_n(0.0, n).collect(),
            scratch: vec![0.0; n],
        }
    }

    pub fn push_frame(&mut self, spectrum: &[Complex64]) -> Result<Vec<f64>> {
        let bins = self.plan.config.n_bins();
        if spectrum.len() != bins {
            return Err(SpectralError::ShapeMismatch(format!(
                "frame has {} bins, expected {bins}",
                spectrum.len()
            )));
        }
        self.plan.synthesize(spectrum, &mut self.scratch);
        for (o, x) in self.overlap.iter_mut().zip(&self.scratch) {
            *o += x;
        }
        Ok(self.emit())
    }

    /// Advances the output clock by one hop without a new frame.
    pub fn idle(&mut self) -> Vec<f64> {
        self.emit()
    }

    fn emit(&mut self) -> Vec<f64> {
        let hop = self.plan.config.hop();
        self.delay.extend(self.overlap[..hop].iter().copied());
        self.overlap.copy_within(hop.., 0);
        let n = self.overlap.len();
        self.overlap[n - hop..].fill(0.0);
        self.delay.drain(..hop).collect()
    }

    pub fn reset(&mut self) {
        let n = self.plan.config.frame_len;
        self.overlap.fill(0.0);
        self.delay.clear();
        self.delay.extend(std::iter::repeat_n(0.0, n));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|f| {
                x.iter()
                    .enumerate()
                    .fold(Complex64::new(0.0, 0.0), |acc, (i, &v)| {
                        let ph = -2.0 * PI * (i * f) as f64 / n as f64;
                        acc + Complex64::new(v * ph.cos(), v * ph.sin())
                    })
            })
            .collect()
    }

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn reference_framing() {
        let c16 = StftConfig::for_rate(16000).unwrap();
        let c48 = StftConfig::for_rate(48000).unwrap();
        assert_eq!((c16.frame_len(), c16.hop(), c16.n_bins()), (512, 256, 257));
        assert_eq!((c48.frame_len(), c48.hop(), c48.n_bins()), (1536, 768, 769));
        assert_eq!(c16.bin_spacing_hz(), 31.25);
        assert_eq!(c48.bin_spacing_hz(), 31.25);
        assert_eq!(c16.latency_samples(), 768);
        assert_eq!(c48.latency_samples() as f64 / 48000.0, 0.048);
        assert_eq!(
            StftConfig::for_rate(44100),
            Err(SpectralError::UnsupportedRate(44100))
        );
        assert!(StftConfig::with_frame_len(16000, 11).is_err());
    }

    #[test]
    fn zero_signal_zero_spectrogram() {
        let c = StftConfig::for_rate(16000).unwrap();
        let s = stft(&vec![0.0; 3000], 16000, c).unwrap();
        assert!(s.data.iter().all(|v| v.norm() == 0.0));
        let y = istft(&s, c).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rate_mismatch() {
        let c = StftConfig::for_rate(16000).unwrap();
        assert!(matches!(
            stft(&[0.0; 10], 48000, c),
            Err(SpectralError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn frame_count_and_output_len() {
        let c = StftConfig::for_rate(16000).unwrap();
        let s = stft(&vec![0.1; 1000], 16000, c).unwrap();
        assert_eq!(s.frames(), 4);
        assert_eq!(istft(&s, c).unwrap().len(), 4 * 256 + 256);
    }

    #[test]
    fn constant_signal_puts_window_sum_in_dc() {
        let c = StftConfig::for_rate(16000).unwrap();
        let x = vec![1.0; 16000];
        let s = stft(&x, 16000, c).unwrap();
        let w = c.analysis_window();
        let oracle = naive_dft(&w);
        assert!((oracle[0].re - 256.0).abs() < 1e-9);
        // every frame fully inside the signal
        for t in 0..(16000 - 512) / 256 + 1 {
            let row = s.frame(t);
            assert!((row[0] - Complex64::new(256.0, 0.0)).norm() < 1e-9);
            for f in 0..257 {
                assert!((row[f] - oracle[f]).norm() < 1e-9);
                if f > 1 {
                    assert!(row[f].norm() < 1e-9, "bin {f}: {}", row[f]);
                }
            }
        }
    }

    #[test]
    fn cosine_energy_confined_to_neighbour_bins() {
        let c = StftConfig::for_rate(16000).unwrap();
        let k = 40;
        let x: Vec<f64> = (0..8192)
            .map(|i| (2.0 * PI * k as f64 * 31.25 * i as f64 / 16000.0).cos())
            .collect();
        let s = stft(&x, 16000, c).unwrap();
        for t in 0..(8192 - 512) / 256 + 1 {
            let row = s.frame(t);
            let total: f64 = row.iter().map(|v| v.norm_sqr()).sum();
            let near: f64 = (k - 1..=k + 1).map(|f| row[f].norm_sqr()).sum();
            assert!(near / total > 1.0 - 1e-12, "frame {t}: {}", near / total);
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        for rate in [16000, 48000] {
            let c = StftConfig::for_rate(rate).unwrap();
            let plan = StftPlan::new(c);
            let x = random_signal(c.frame_len(), rate as u64);
            let w = c.analysis_window();
            let windowed: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
            let oracle = naive_dft(&windowed);
            let fast = plan.analyze(&x);
            for f in 0..c.n_bins() {
                assert!((fast[f] - oracle[f]).norm() < 1e-9);
            }
            assert!(fast[0].im.abs() < 1e-6 && fast[c.n_bins() - 1].im.abs() < 1e-6);
        }
    }

    #[test]
    fn parseval() {
        let c = StftConfig::for_rate(16000).unwrap();
        let plan = StftPlan::new(c);
        let x = random_signal(512, 3);
        let w = c.analysis_window();
        let windowed: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
        let time_energy: f64 = windowed.iter().map(|v| v * v).sum();
        let freq_energy: f64 = plan.dft(&windowed).iter().map(|v| v.norm_sqr()).sum();
        assert!((freq_energy - 512.0 * time_energy).abs() / freq_energy < 1e-6);
    }

    #[test]
    fn weighted_overlap_add_is_constant() {
        for rate in [16000, 48000] {
            let c = StftConfig::for_rate(rate).unwrap();
            let w = c.analysis_window();
            let v = c.synthesis_window();
            let hop = c.hop();
            for i in 0..hop {
                let s = w[i] * v[i] + w[i + hop] * v[i + hop];
                assert!((s - 1.0).abs() < 1e-9, "{s}");
            }
        }
    }

    #[test]
    fn perfect_reconstruction_interior() {
        for rate in [16000u32, 48000] {
            let c = StftConfig::for_rate(rate).unwrap();
            let plan = StftPlan::new(c);
            let x = random_signal(rate as usize, 11);
            let y = plan.istft(&plan.stft(&x)).unwrap();
            let edge = c.frame_len() - c.hop();
            let err = (edge..x.len() - edge)
                .map(|i| (x[i] - y[i]).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "{rate}: {err}");
        }
    }

    #[test]
    fn istft_is_linear() {
        let c = StftConfig::for_rate(16000).unwrap();
        let plan = StftPlan::new(c);
        let a = plan.stft(&random_signal(4000, 1));
        let b = plan.stft(&random_signal(4000, 2));
        let sum = Spectrogram {
            data: &a.data + &b.data,
            config: c,
        };
        let ya = plan.istft(&a).unwrap();
        let yb = plan.istft(&b).unwrap();
        let ys = plan.istft(&sum).unwrap();
        for i in 0..ys.len() {
            assert!((ys[i] - ya[i] - yb[i]).abs() < 1e-7);
        }
    }

    fn stream(c: StftConfig, x: &[f64]) -> Vec<f64> {
        let mut ana = StftStreamer::new(c);
        let mut syn = IstftStreamer::new(c);
        let hop = c.hop();
        let mut padded = x.to_vec();
        padded.resize(x.len().div_ceil(hop) * hop + c.latency_samples(), 0.0);
        let mut out = Vec::new();
        for block in padded.chunks(hop) {
            match ana.push_block(block).unwrap() {
                Some(frame) => out.extend(syn.push_frame(&frame).unwrap()),
                None => out.extend(syn.idle()),
            }
        }
        out
    }

    #[test]
    fn streaming_matches_offline_with_fixed_latency() {
        for rate in [16000u32, 48000] {
            let c = StftConfig::for_rate(rate).unwrap();
            let x = random_signal(2 * rate as usize + 123, 5);
            let offline = StftPlan::new(c).istft(&StftPlan::new(c).stft(&x)).unwrap();
            let streamed = stream(c, &x);
            let lat = c.latency_samples();
            assert!(streamed[..lat].iter().all(|&v| v == 0.0));
            let mut worst: f64 = 0.0;
            for (i, &o) in offline.iter().enumerate() {
                if i + lat < streamed.len() {
                    worst = worst.max((streamed[i + lat] - o).abs());
                }
            }
            assert!(worst < 1e-6, "{rate}: {worst}");
        }
    }

    #[test]
    fn streaming_zeros_stay_zero() {
        let c = StftConfig::for_rate(16000).unwrap();
        assert!(stream(c, &vec![0.0; 20000]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reset_restores_fresh_state() {
        let c = StftConfig::for_rate(16000).unwrap();
        let x = random_signal(256 * 8, 9);
        let mut ana = StftStreamer::new(c);
        let mut syn = IstftStreamer::new(c);
        let run = |ana: &mut StftStreamer, syn: &mut IstftStreamer| {
            let mut out = Vec::new();
            for b in x.chunks(256) {
                match ana.push_block(b).unwrap() {
                    Some(f) => out.extend(syn.push_frame(&f).unwrap()),
                    None => out.extend(syn.idle()),
                }
            }
            out
        };
        let first = run(&mut ana, &mut syn);
        ana.reset();
        syn.reset();
        assert_eq!(first, run(&mut ana, &mut syn));
    }

    #[test]
    fn wrong_block_size() {
        let mut ana = StftStreamer::new(StftConfig::for_rate(16000).unwrap());
        assert_eq!(
            ana.push_block(&[0.0; 100]),
            Err(SpectralError::BlockSizeMismatch {
                expected: 256,
                got: 100
            })
        );
    }
}

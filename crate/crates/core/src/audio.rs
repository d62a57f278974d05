//! In-memory PCM signals and RIFF/WAVE file I/O.
//!
//! Samples are held as `f64` in the nominal range `[-1, 1]`. Reading
//! supports 16-bit and 24-bit integer PCM and 32-bit IEEE float; writing
//! supports 16-bit PCM and 32-bit float.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("write error: {0}")]
    Write(#[source] io::Error),
    #[error("read error: {0}")]
    Read(#[source] io::Error),
    #[error("incompatible buffers: {0}")]
    IncompatibleBuffers(String),
    #[error("invalid buffer: {0}")]
    InvalidBuffer(String),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Sample encoding used when writing a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// A multichannel PCM signal. All channels have equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidBuffer(
                "sample rate must be positive".into(),
            ));
        }
        if channels.is_empty() {
            return Err(AudioError::InvalidBuffer(
                "at least one channel required".into(),
            ));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(AudioError::InvalidBuffer(
                "channels differ in length".into(),
            ));
        }
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        Self::new(sample_rate, vec![samples])
    }

    pub fn silence(sample_rate: u32, channels: usize, len: usize) -> Result<Self> {
        Self::new(sample_rate, vec![vec![0.0; len]; channels.max(1)])
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Returns a copy with every sample multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|c| c.iter().map(|x| x * gain).collect())
            .collect();
        Self {
            sample_rate: self.sample_rate,
            channels,
        }
    }

    /// Mean power over all channels and samples.
    pub fn power(&self) -> f64 {
        let n = (self.len() * self.num_channels()).max(1) as f64;
        self.channels.iter().flatten().map(|x| x * x).sum::<f64>() / n
    }
}

/// Sample-wise sum of equally shaped buffers. No normalization is applied.
pub fn mix(sources: &[AudioBuffer]) -> Result<AudioBuffer> {
    let first = sources
        .first()
        .ok_or_else(|| AudioError::IncompatibleBuffers("no sources".into()))?;
    for s in &sources[1..] {
        if s.sample_rate != first.sample_rate
            || s.num_channels() != first.num_channels()
            || s.len() != first.len()
        {
            return Err(AudioError::IncompatibleBuffers(format!(
                "{} Hz x{} x{} vs {} Hz x{} x{}",
                first.sample_rate,
                first.num_channels(),
                first.len(),
                s.sample_rate,
                s.num_channels(),
                s.len()
            )));
        }
    }
    let mut channels = first.channels.clone();
    for s in &sources[1..] {
        for (acc, ch) in channels.iter_mut().zip(&s.channels) {
            for (a, x) in acc.iter_mut().zip(ch) {
                *a += x;
            }
        }
    }
    Ok(AudioBuffer {
        sample_rate: first.sample_rate,
        channels,
    })
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let bytes = fs::read(path).map_err(AudioError::Read)?;
    decode_wav(&bytes)
}

/// Decodes a complete RIFF/WAVE byte image.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 {
        return Err(AudioError::CorruptFile("missing RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::UnsupportedFormat("not a RIFF/WAVE file".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).unwrap_or(usize::MAX);
        match id {
            b"fmt " => {
                if size < 16 || body_end > bytes.len() {
                    return Err(AudioError::CorruptFile("short fmt chunk".into()));
                }
                let b = &bytes[body_start..body_end];
                let mut format = le_u16(b, 0);
                if format == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(AudioError::CorruptFile("short extensible fmt chunk".into()));
                    }
                    format = le_u16(b, 24);
                }
                fmt = Some(FmtChunk {
                    format,
                    channels: le_u16(b, 2),
                    sample_rate: le_u32(b, 4),
                    bits: le_u16(b, 14),
                });
            }
            b"data" => {
                if body_end > bytes.len() {
                    return Err(AudioError::CorruptFile(format!(
                        "data chunk declares {size} bytes, {} present",
                        bytes.len() - body_start
                    )));
                }
                data = Some(&bytes[body_start..body_end]);
                break;
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_end.saturating_add(size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::CorruptFile("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::CorruptFile("no data chunk".into()))?;

    let width = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_PCM, 24) => 3,
        (FORMAT_FLOAT, 32) => 4,
        (f, b) => {
            return Err(AudioError::UnsupportedFormat(format!(
                "format tag {f}, {b} bits"
            )));
        }
    };
    if fmt.channels == 0 || fmt.sample_rate == 0 {
        return Err(AudioError::CorruptFile(
            "zero channels or sample rate".into(),
        ));
    }
    let n_ch = fmt.channels as usize;
    let frame_bytes = width * n_ch;
    if data.len() % frame_bytes != 0 {
        return Err(AudioError::CorruptFile(
            "partial sample frame in data chunk".into(),
        ));
    }
    let frames = data.len() / frame_bytes;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in data.chunks_exact(frame_bytes) {
        for (ch, s) in channels.iter_mut().zip(frame.chunks_exact(width)) {
            let v = match width {
                2 => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
                3 => {
                    let raw = i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8;
                    raw as f64 / 8_388_608.0
                }
                _ => f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64,
            };
            ch.push(v);
        }
    }
    AudioBuffer::new(fmt.sample_rate, channels)
}

/// Encodes `buffer` as a RIFF/WAVE byte image.
pub fn encode_wav(buffer: &AudioBuffer, encoding: WavEncoding) -> Vec<u8> {
    let (format, bits) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16u16),
        WavEncoding::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let n_ch = buffer.num_channels() as u16;
    let block_align = n_ch * bits / 8;
    let data_len = buffer.len() * block_align as usize;

    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&n_ch.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    const PCM16_MAX: f64 = 1.0 - 1.0 / 32768.0;
    for i in 0..buffer.len() {
        for ch in &buffer.channels {
            match encoding {
                WavEncoding::Pcm16 => {
                    let x = ch[i].clamp(-1.0, PCM16_MAX);
                    let q = (x * 32768.0).round() as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavEncoding::Float32 => out.extend_from_slice(&(ch[i] as f32).to_le_bytes()),
            }
        }
    }
    out
}

pub fn write_wav(
    buffer: &AudioBuffer,
    path: impl AsRef<Path>,
    encoding: WavEncoding,
) -> Result<()> {
    if buffer.is_empty() {
        return Err(AudioError::InvalidBuffer(
            "cannot write an empty buffer".into(),
        ));
    }
    let bytes = encode_wav(buffer, encoding);
    let mut f = fs::File::create(path).map_err(AudioError::Write)?;
    f.write_all(&bytes).map_err(AudioError::Write)?;
    f.flush().map_err(AudioError::Write)
}

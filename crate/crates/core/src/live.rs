//! Block-by-block remixing with parameter changes applied at block
//! boundaries, plus the binary block framing used on the wire.

use thiserror::Error;

use crate::separator::{ChannelEnhancer, MaskEstimator, RemixParams, SeparatorError};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame too short: {0} bytes")]
    TooShort(usize),
    #[error("frame declares {declared} samples but carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
}

/// `u32` little-endian sample count followed by that many `f32` LE samples.
pub fn encode_block(samples: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * samples.len());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

pub fn decode_block(bytes: &[u8]) -> Result<Vec<f32>, FrameError> {
    let Some((head, body)) = bytes.split_first_chunk::<4>() else {
        return Err(FrameError::TooShort(bytes.len()));
    };
    let declared = u32::from_le_bytes(*head) as usize;
    if body.len() != declared * 4 {
        return Err(FrameError::LengthMismatch {
            declared,
            actual: body.len() / 4,
        });
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Single-channel remixer fed one hop at a time.
pub struct LiveRemixer {
    enhancer: ChannelEnhancer,
    consumed: u64,
}

impl LiveRemixer {
    pub fn new(
        sample_rate: u32,
        estimator: Box<dyn MaskEstimator>,
        params: RemixParams,
    ) -> Result<Self, SeparatorError> {
        Ok(Self {
            enhancer: ChannelEnhancer::new(sample_rate, estimator, params)?,
            consumed: 0,
        })
    }

    pub fn block_len(&self) -> usize {
        self.enhancer.config().hop()
    }

    pub fn latency_samples(&self) -> usize {
        self.enhancer.latency_samples()
    }

    pub fn sample_rate(&self) -> u32 {
        self.enhancer.config().sample_rate()
    }

    pub fn params(&self) -> RemixParams {
        self.enhancer.params()
    }

    /// Input samples processed so far.
    pub fn position(&self) -> u64 {
        self.consumed
    }

    /// Applies `params` from the next block on. Returns the input sample
    /// index at which they take effect; the output reflects them
    /// `latency_samples()` later.
    pub fn update(&mut self, params: RemixParams) -> Result<u64, SeparatorError> {
        self.enhancer.set_params(params)?;
        Ok(self.consumed)
    }

    pub fn process(&mut self, block: &[f64]) -> Result<Vec<f64>, SeparatorError> {
        let out = self.enhancer.process_block(block)?;
        self.consumed += block.len() as u64;
        Ok(out)
    }
}

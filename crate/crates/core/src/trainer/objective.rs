//! Training objectives: uPIT SI-SNR through masking and resynthesis, and
//! frame-level binary cross-entropy for the VAD.

use ndarray::{s, Array2, Zip};
use rustfft::num_complex::Complex64;

use super::bptt::{backward_sequence, forward_sequence, DropoutMasks};
use super::loss::{upit_loss_with_grad, Permutation};
use super::{Result, TrainError};
use crate::lstm::LstmWeights;
use crate::spectral::{Spectrogram, StftPlan};

/// One mixture with its two reference stems (speech first).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub mixture: Vec<f64>,
    pub targets: [Vec<f64>; 2],
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub loss: f64,
    pub permutation: Permutation,
    pub grads: Option<LstmWeights>,
}

/// Network input for a mixture spectrogram: magnitudes of the first
/// `bins` bins.
pub fn features(spec: &Spectrogram, bins: usize) -> Array2<f64> {
    spec.data.slice(s![.., ..bins]).mapv(|y| y.norm())
}

/// Masks both stems out of `spec` with the first and second halves of the
/// network output and resynthesizes them, truncated to `len` samples.
pub fn reconstruct(
    plan: &StftPlan,
    spec: &Spectrogram,
    masks: &Array2<f64>,
    len: usize,
) -> Result<[Vec<f64>; 2]> {
    let bins = masks.ncols() / 2;
    let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut masked = spec.clone();
        let m = masks.slice(s![.., k * bins..(k + 1) * bins]);
        Zip::from(masked.data.slice_mut(s![.., ..bins]))
            .and(m)
            .for_each(|y, &g| *y *= g);
        masked
            .data
            .slice_mut(s![.., bins..])
            .fill(Complex64::new(0.0, 0.0));
        let mut x = plan
            .istft(&masked)
            .map_err(|e| TrainError::Shape(e.to_string()))?;
        x.truncate(len);
        *slot = x;
    }
    Ok(out)
}

/// Adjoint of masking followed by `istft`: maps a gradient on the output
/// waveform to a gradient on each real mask entry.
fn mask_gradient(plan: &StftPlan, spec: &Spectrogram, grad: &[f64], bins: usize) -> Array2<f64> {
    let config = plan.config();
    let (n, hop) = (config.frame_len(), config.hop());
    let window = plan.synthesis_window();
    let nyquist = n / 2;
    let mut out = Array2::zeros((spec.frames(), bins));
    let mut frame = vec![0.0; n];
    for t in 0..spec.frames() {
        let start = t * hop;
        for (i, v) in frame.iter_mut().enumerate() {
            *v = grad.get(start + i).map_or(0.0, |g| g * window[i]);
        }
        let g = plan.dft(&frame);
        for f in 0..bins {
            // Bins other than DC and Nyquist appear twice in the Hermitian inverse.
            let c = if f == 0 || (n % 2 == 0 && f == nyquist) {
                1.0
            } else {
                2.0
            };
            out[[t, f]] = c / n as f64 * (spec.data[[t, f]].conj() * g[f]).re;
        }
    }
    out
}

/// uPIT SI-SNR loss of one example, optionally with parameter gradients.
pub fn separation_loss(
    weights: &LstmWeights,
    plan: &StftPlan,
    example: &TrainingExample,
    dropout: Option<&DropoutMasks>,
    want_grad: bool,
) -> Result<Outcome> {
    let spec = plan.stft(&example.mixture);
    separation_loss_from_spec(
        weights,
        plan,
        &spec,
        &example.targets,
        example.mixture.len(),
        dropout,
        want_grad,
    )
}

/// As [`separation_loss`], on a precomputed mixture spectrogram.
pub fn separation_loss_from_spec(
    weights: &LstmWeights,
    plan: &StftPlan,
    spec: &Spectrogram,
    targets: &[Vec<f64>; 2],
    len: usize,
    dropout: Option<&DropoutMasks>,
    want_grad: bool,
) -> Result<Outcome> {
    let shape = weights.shape();
    let bins = shape.input;
    if shape.output != 2 * bins || bins > spec.bins() {
        return Err(TrainError::Shape(format!(
            "network {}->{} does not fit {} spectrogram bins",
            shape.input,
            shape.output,
            spec.bins()
        )));
    }
    let x = features(spec, bins);
    let trace = forward_sequence(weights, x.view(), dropout)?;
    let estimates = reconstruct(plan, spec, &trace.output, len)?;
    let upit = upit_loss_with_grad(
        [&estimates[0], &estimates[1]],
        [&targets[0], &targets[1]],
        want_grad,
    )?;
    if !upit.loss.is_finite() {
        return Err(TrainError::NumericFailure("non-finite loss".into()));
    }
    let grads = if want_grad {
        let mut dz = Array2::zeros(trace.output.dim());
        for k in 0..2 {
            let dm = mask_gradient(plan, spec, &upit.grads[k], bins);
            let mut block = dz.slice_mut(s![.., k * bins..(k + 1) * bins]);
            Zip::from(&mut block)
                .and(&dm)
                .and(trace.output.slice(s![.., k * bins..(k + 1) * bins]))
                .for_each(|d, &g, &m| *d = g * m * (1.0 - m));
        }
        let mut grads = LstmWeights::zeros(shape);
        backward_sequence(weights, &trace, dz.view(), dropout, &mut grads)?;
        Some(grads)
    } else {
        None
    };
    Ok(Outcome {
        loss: upit.loss,
        permutation: upit.permutation,
        grads,
    })
}

/// Mean binary cross-entropy of per-frame probabilities against 0/1 labels.
pub fn bce_loss(
    weights: &LstmWeights,
    features: &Array2<f64>,
    labels: &[u8],
    dropout: Option<&DropoutMasks>,
    want_grad: bool,
) -> Result<(f64, Option<LstmWeights>)> {
    if weights.shape().output != 1 || labels.len() != features.nrows() {
        return Err(TrainError::Shape(
            "VAD needs one output and one label per frame".into(),
        ));
    }
    let trace = forward_sequence(weights, features.view(), dropout)?;
    let frames = labels.len() as f64;
    let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
    let loss = labels
        .iter()
        .zip(trace.output.column(0))
        .map(|(&y, &p)| {
            if y == 1 {
                -clamp(p).ln()
            } else {
                -(1.0 - clamp(p)).ln()
            }
        })
        .sum::<f64>()
        / frames;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut dz = Array2::zeros((labels.len(), 1));
    for (t, &y) in labels.iter().enumerate() {
        dz[[t, 0]] = (trace.output[[t, 0]] - y as f64) / frames;
    }
    let mut grads = LstmWeights::zeros(weights.shape());
    backward_sequence(weights, &trace, dz.view(), dropout, &mut grads)?;
    Ok((loss, Some(grads)))
}

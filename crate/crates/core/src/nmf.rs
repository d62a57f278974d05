//! VAD-guided NMF separation baseline.
//!
//! A single-channel magnitude KL-NMF stands in for a multichannel
//! excitation-filter model. Noise bases are learned on speech pauses first,
//! then speech bases are learned on the whole mixture with the noise bases
//! frozen. Masks are Wiener-style ratios of the two reconstructions.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::separator::{Mask, MaskTarget};
use crate::spectral::Spectrogram;
use crate::vad::VadLabels;

#[derive(Debug, Error)]
pub enum NmfError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("insufficient noise context: {found} pause frames, need at least {needed}")]
    InsufficientNoiseContext { found: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, NmfError>;

pub const EPS: f64 = 1e-12;
pub const MIN_PAUSE_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NmfConfig {
    pub speech_components: usize,
    /// Three background sources of six components each, as one flat block.
    pub noise_components: usize,
    pub iterations: usize,
    /// Exponent applied to `|Y|` before factorization.
    pub power: f64,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            speech_components: 6,
            noise_components: 18,
            iterations: 30,
            power: 1.0,
            seed: 0,
        }
    }
}

/// `V ~ W H` with the first `fixed` columns of `W` frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    /// `bins x components`
    pub w: Array2<f64>,
    /// `components x frames`
    pub h: Array2<f64>,
    pub fixed: usize,
}

impl NmfModel {
    pub fn reconstruction(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }

    /// Contribution of components `start..end`.
    pub fn partial_reconstruction(&self, start: usize, end: usize) -> Array2<f64> {
        self.w
            .slice(s![.., start..end])
            .dot(&self.h.slice(s![start..end, ..]))
    }
}

#[derive(Debug, Clone)]
pub struct NmfFit {
    pub model: NmfModel,
    /// KL divergence at initialization and after every iteration.
    pub objective: Vec<f64>,
}

/// Generalized KL divergence `sum v ln(v / x) - v + x`.
pub fn kl_divergence(v: ArrayView2<'_, f64>, approx: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    Zip::from(v).and(approx).for_each(|&a, &b| {
        total += if a > 0.0 {
            a * (a / (b + EPS)).ln() - a + b
        } else {
            b
        };
    });
    total
}

/// Multiplicative-update KL-NMF with `k` free components. Columns of
/// `fixed_basis`, when given, come first and are never modified; free
/// columns are renormalized to unit sum after every update.
pub fn nmf_fit(
    v: ArrayView2<'_, f64>,
    k: usize,
    iterations: usize,
    fixed_basis: Option<ArrayView2<'_, f64>>,
    seed: u64,
) -> Result<NmfFit> {
    fit(v, k, iterations, fixed_basis, None, seed)
}

/// `fixed_activations` overrides the initial activations of the fixed
/// components in the given frames.
fn fit(
    v: ArrayView2<'_, f64>,
    k: usize,
    iterations: usize,
    fixed_basis: Option<ArrayView2<'_, f64>>,
    fixed_activations: Option<(&[usize], ArrayView2<'_, f64>)>,
    seed: u64,
) -> Result<NmfFit> {
    if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(NmfError::DegenerateInput(
            "negative or non-finite entries".into(),
        ));
    }
    if !v.iter().any(|&x| x > 0.0) {
        return Err(NmfError::DegenerateInput("all-zero input".into()));
    }
    let (bins, frames) = v.dim();
    let fixed = fixed_basis.map_or(0, |b| b.ncols());
    if let Some(b) = fixed_basis {
        if b.nrows() != bins {
            return Err(NmfError::ShapeMismatch(format!(
                "fixed basis has {} rows, input {}",
                b.nrows(),
                bins
            )));
        }
    }
    let total = fixed + k;
    if total == 0 {
        return Err(NmfError::DegenerateInput("no components".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((bins, total));
    if let Some(b) = fixed_basis {
        w.slice_mut(s![.., ..fixed]).assign(&b);
    }
    w.slice_mut(s![.., fixed..])
        .mapv_inplace(|_| rng.random_range(0.1..1.0));
    // Unit-sum free columns with untouched activations, so free and fixed
    // components start on an equal footing.
    for c in fixed..total {
        let norm: f64 = w.column(c).sum();
        w.column_mut(c).mapv_inplace(|x| x / norm);
    }
    let mut h = Array2::from_shape_fn((total, frames), |_| rng.random_range(0.1..1.0));
    if let Some((cols, init)) = fixed_activations {
        for (j, &t) in cols.iter().enumerate() {
            h.slice_mut(s![..fixed, t]).assign(&init.column(j));
        }
    }

    let mut objective = Vec::with_capacity(iterations + 1);
    objective.push(kl_divergence(v, w.dot(&h).view()));
    for _ in 0..iterations {
        // H <- H * (W^T (V / WH)) / (W^T 1)
        let q = ratio(v, &w.dot(&h));
        let num = w.t().dot(&q);
        let col_sums = w.sum_axis(Axis(0));
        Zip::indexed(&mut h)
            .and(&num)
            .for_each(|(c, _), hv, &n| *hv *= n / (col_sums[c] + EPS));

        if k > 0 {
            // W <- W * ((V / WH) H^T) / (1 H^T), free columns only
            let q = ratio(v, &w.dot(&h));
            let num = q.dot(&h.t());
            let row_sums = h.sum_axis(Axis(1));
            let mut free = w.slice_mut(s![.., fixed..]);
            Zip::indexed(&mut free).for_each(|(r, c), wv| {
                *wv *= num[[r, fixed + c]] / (row_sums[fixed + c] + EPS);
            });
            normalize_free_columns(&mut w, &mut h, fixed);
        }
        objective.push(kl_divergence(v, w.dot(&h).view()));
    }
    Ok(NmfFit {
        model: NmfModel { w, h, fixed },
        objective,
    })
}

fn ratio(v: ArrayView2<'_, f64>, approx: &Array2<f64>) -> Array2<f64> {
    let mut out = approx.clone();
    Zip::from(&mut out)
        .and(v)
        .for_each(|x, &a| *x = a / (*x + EPS));
    out
}

/// Scales free columns of `w` to unit sum and the matching rows of `h` by
/// the inverse, leaving `w h` unchanged.
fn normalize_free_columns(w: &mut Array2<f64>, h: &mut Array2<f64>, fixed: usize) {
    for c in fixed..w.ncols() {
        let norm: f64 = w.column(c).sum();
        if norm > 0.0 {
            w.column_mut(c).mapv_inplace(|x| x / norm);
            h.row_mut(c).mapv_inplace(|x| x * norm);
        }
    }
}

/// Two-stage separation of a mixture spectrogram guided by VAD labels.
pub fn nmf_separate(
    mixture: &Spectrogram,
    vad: &VadLabels,
    config: &NmfConfig,
) -> Result<(Mask, Mask)> {
    if vad.len() != mixture.frames() {
        return Err(NmfError::ShapeMismatch(format!(
            "{} labels for {} frames",
            vad.len(),
            mixture.frames()
        )));
    }
    let pauses = vad.pause_frames();
    if pauses.len() < MIN_PAUSE_FRAMES {
        return Err(NmfError::InsufficientNoiseContext {
            found: pauses.len(),
            needed: MIN_PAUSE_FRAMES,
        });
    }
    let v: Array2<f64> = mixture.data.t().mapv(|y| y.norm().powf(config.power));
    let v_pause = v.select(Axis(1), &pauses);

    let noise = nmf_fit(
        v_pause.view(),
        config.noise_components,
        config.iterations,
        None,
        config.seed,
    )?;
    // Noise activations in the pauses are already known from stage one.
    let speech = fit(
        v.view(),
        config.speech_components,
        config.iterations,
        Some(noise.model.w.view()),
        Some((&pauses, noise.model.h.view())),
        config.seed.wrapping_add(1),
    )?;
    let model = &speech.model;
    let full = model.reconstruction();
    let speech_part = model.partial_reconstruction(model.fixed, model.w.ncols());
    let mut mask = Array2::zeros(full.dim());
    Zip::from(&mut mask)
        .and(&speech_part)
        .and(&full)
        .for_each(|m, &s, &f| *m = (s / (f + EPS)).clamp(0.0, 1.0));
    let speech_mask = Mask {
        data: mask.reversed_axes().as_standard_layout().to_owned(),
        target: MaskTarget::Speech,
    };
    let noise_mask = speech_mask.complement();
    Ok((speech_mask, noise_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0))
    }

    fn non_increasing(obj: &[f64]) -> bool {
        obj.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12) + 1e-12)
    }

    #[test]
    fn rank_one_is_recovered() {
        let v = array![[1.0, 2.0]].t().dot(&array![[1.0, 1.0, 1.0]]);
        let fit = nmf_fit(v.view(), 1, 30, None, 0).unwrap();
        assert!(*fit.objective.last().unwrap() < 1e-8, "{:?}", fit.objective);
        assert_eq!(fit.objective.len(), 31);
    }

    #[test]
    fn objective_is_monotone() {
        let v = random_matrix(20, 50, 1);
        let fit = nmf_fit(v.view(), 4, 30, None, 7).unwrap();
        assert!(non_increasing(&fit.objective), "{:?}", fit.objective);
        assert!(fit
            .model
            .w
            .iter()
            .chain(fit.model.h.iter())
            .all(|&x| x >= 0.0));
        for c in 0..4 {
            assert!((fit.model.w.column(c).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_basis_is_untouched() {
        let v = random_matrix(10, 30, 2);
        let basis = random_matrix(10, 3, 3);
        let fit = nmf_fit(v.view(), 2, 30, Some(basis.view()), 4).unwrap();
        assert_eq!(fit.model.w.slice(s![.., ..3]), basis);
        assert!(non_increasing(&fit.objective));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let z = Array2::<f64>::zeros((4, 4));
        assert!(matches!(
            nmf_fit(z.view(), 2, 5, None, 0),
            Err(NmfError::DegenerateInput(_))
        ));
        let neg = array![[1.0, -1.0]];
        assert!(nmf_fit(neg.view(), 1, 5, None, 0).is_err());
    }

    #[test]
    fn separation_needs_pauses() {
        let config = crate::spectral::StftConfig::for_rate(16000).unwrap();
        let spec = Spectrogram::zeros(config, 10, 257);
        let vad = VadLabels::new(vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        assert!(matches!(
            nmf_separate(&spec, &vad, &NmfConfig::default()),
            Err(NmfError::InsufficientNoiseContext { found: 4, .. })
        ));
    }

    /// 440 Hz bursts (300 ms on, 200 ms off) over white noise at 16 kHz.
    fn pulsed_tone_case(seed: u64, tone_amp: f64) -> (Spectrogram, VadLabels) {
        let plan =
            crate::spectral::StftPlan::new(crate::spectral::StftConfig::for_rate(16000).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 48000;
        let tone: Vec<f64> = (0..n)
            .map(|i| {
                if i % 8000 < 4800 {
                    tone_amp * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()
                } else {
                    0.0
                }
            })
            .collect();
        let mix: Vec<f64> = tone
            .iter()
            .map(|t| t + rng.random_range(-0.3..0.3))
            .collect();
        let spec = plan.stft(&mix);
        let labels = (0..spec.frames()).map(|t| (t * 256 + 256) % 8000 < 4800);
        (spec, VadLabels::from_bools(labels))
    }

    #[test]
    fn speech_mask_follows_the_bursts() {
        let (spec, vad) = pulsed_tone_case(5, 0.5);
        let (speech, noise) = nmf_separate(&spec, &vad, &NmfConfig::default()).unwrap();
        let tone_bin = 14;
        let mean = |flag: bool| {
            let rows: Vec<f64> = (0..spec.frames())
                .filter(|&t| vad.is_speech(t) == flag)
                .map(|t| speech.data[[t, tone_bin]])
                .collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        assert!(
            mean(true) > 0.8 && mean(false) < 0.4,
            "{} {}",
            mean(true),
            mean(false)
        );
        assert!(speech
            .data
            .iter()
            .zip(noise.data.iter())
            .all(|(a, b)| (a + b - 1.0).abs() < 1e-6));
    }

    #[test]
    fn noise_only_gives_small_speech_mask() {
        let (spec, _) = pulsed_tone_case(6, 0.0);
        let vad = VadLabels::from_bools(vec![false; spec.frames()]);
        let (speech, _) = nmf_separate(&spec, &vad, &NmfConfig::default()).unwrap();
        let mean = speech.data.mean().unwrap();
        assert!(mean < 0.2, "{mean}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn updates_keep_nonnegativity_and_monotonicity(seed in 0u64..10_000, k in 1usize..6) {
            let v = random_matrix(12, 20, seed);
            let fit = nmf_fit(v.view(), k, 30, None, seed + 1).unwrap();
            prop_assert!(fit.model.w.iter().chain(fit.model.h.iter()).all(|&x| x >= 0.0));
            prop_assert!(non_increasing(&fit.objective));
        }
    }
}

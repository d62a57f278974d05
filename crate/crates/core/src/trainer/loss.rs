//! SI-SNR and the two-source permutation-invariant loss.

use super::{Result, TrainError};

/// Relative guard: `SI_SNR_EPS * |estimate|^2` is added to both energies,
/// which keeps the ratio exactly scale invariant.
pub const SI_SNR_EPS: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(estimate: &[f64], target: &[f64]) -> Result<f64> {
    if estimate.len() != target.len() {
        return Err(TrainError::LengthMismatch(estimate.len(), target.len()));
    }
    let energy = dot(target, target);
    if energy == 0.0 {
        return Err(TrainError::DegenerateTarget);
    }
    Ok(energy)
}

/// Scale-invariant SNR of `estimate` against `target`, in dB.
pub fn si_snr(estimate: &[f64], target: &[f64]) -> Result<f64> {
    si_snr_with_grad(estimate, target, false).map(|(v, _)| v)
}

/// SI-SNR and, when `want_grad`, its gradient with respect to `estimate`.
pub fn si_snr_with_grad(
    estimate: &[f64],
    target: &[f64],
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let energy = check(estimate, target)?;
    let b = energy + SI_SNR_EPS;
    let a = dot(estimate, target);
    let scale = a / b;
    let noise: Vec<f64> = estimate
        .iter()
        .zip(target)
        .map(|(e, s)| e - scale * s)
        .collect();
    let guard = SI_SNR_EPS * dot(estimate, estimate) + f64::MIN_POSITIVE;
    let p = scale * scale * energy + guard;
    let q = dot(&noise, &noise) + guard;
    let value = 10.0 * (p / q).log10();
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    // d/de ln p = (2 a |s|^2 / b^2 * s + 2 eps e) / p
    // d/de ln q = (2 (n - <s, n> / b * s) + 2 eps e) / q
    let k = 10.0 / std::f64::consts::LN_10;
    let sn = dot(target, &noise) / b;
    let cp = 2.0 * a * energy / (b * b) / p;
    let ce = 2.0 * SI_SNR_EPS * (1.0 / p - 1.0 / q);
    let grad = noise
        .iter()
        .zip(target)
        .zip(estimate)
        .map(|((n, s), e)| k * (cp * s + ce * e - 2.0 * (n - sn * s) / q))
        .collect();
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permutation {
    /// Estimate 0 goes with target 0.
    Identity,
    /// Estimate 0 goes with target 1.
    Swap,
}

/// Picks the assignment from a matrix `scores[e][t]` of SI-SNR values
/// (estimate `e` against target `t`). Returns the loss, which is the negated
/// mean score under the better assignment. Ties keep the identity.
pub fn select_permutation(scores: [[f64; 2]; 2]) -> (f64, Permutation) {
    let identity = -(scores[0][0] + scores[1][1]) / 2.0;
    let swap = -(scores[0][1] + scores[1][0]) / 2.0;
    if swap < identity {
        (swap, Permutation::Swap)
    } else {
        (identity, Permutation::Identity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpitOutcome {
    pub loss: f64,
    pub permutation: Permutation,
    /// Gradients with respect to each estimate, empty unless requested.
    pub grads: [Vec<f64>; 2],
}

/// Utterance-level permutation-invariant SI-SNR loss over two estimates.
pub fn upit_loss(estimates: [&[f64]; 2], targets: [&[f64]; 2]) -> Result<f64> {
    Ok(upit_loss_with_grad(estimates, targets, false)?.loss)
}

pub fn upit_permutation(
    estimates: [&[f64]; 2],
    targets: [&[f64]; 2],
) -> Result<(f64, Permutation)> {
    let o = upit_loss_with_grad(estimates, targets, false)?;
    Ok((o.loss, o.permutation))
}

pub fn upit_loss_with_grad(
    estimates: [&[f64]; 2],
    targets: [&[f64]; 2],
    want_grad: bool,
) -> Result<UpitOutcome> {
    let mut scores = [[0.0; 2]; 2];
    for (e, row) in scores.iter_mut().enumerate() {
        for (t, cell) in row.iter_mut().enumerate() {
            *cell = si_snr(estimates[e], targets[t])?;
        }
    }
    let (loss, permutation) = select_permutation(scores);
    let grads = if want_grad {
        let pair = |e: usize| match permutation {
            Permutation::Identity => e,
            Permutation::Swap => 1 - e,
        };
        let g = |e: usize| -> Result<Vec<f64>> {
            let (_, g) = si_snr_with_grad(estimates[e], targets[pair(e)], true)?;
            Ok(g.into_iter().map(|v| -0.5 * v).collect())
        };
        [g(0)?, g(1)?]
    } else {
        [Vec::new(), Vec::new()]
    };
    Ok(UpitOutcome {
        loss,
        permutation,
        grads,
    })
}

//! Objective metrics and rating statistics: median/IQR, the Wilcoxon
//! rank-sum test and Bonferroni-corrected significance tables.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::trainer::{si_snr, TrainError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("empty rating set")]
    Empty,
    #[error("rating {value} outside scale {scale:?}")]
    OutOfRange { value: f64, scale: Scale },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Metric(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Combined sample sizes up to this use exact enumeration.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 0-100 quality scale.
    Quality,
    /// 13-step listening-effort scale, 1-13.
    Effort,
}

impl Scale {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Scale::Quality => (0.0, 100.0),
            Scale::Effort => (1.0, 13.0),
        }
    }

    pub fn contains(self, value: f64) -> bool {
        let (lo, hi) = self.bounds();
        value.is_finite() && (lo..=hi).contains(&value)
    }
}

/// Ratings of one condition on one scale.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RatingSet {
    pub label: String,
    pub scale: Scale,
    pub ratings: Vec<f64>,
}

impl RatingSet {
    pub fn new(label: impl Into<String>, scale: Scale, ratings: Vec<f64>) -> Result<Self> {
        if let Some(&value) = ratings.iter().find(|&&v| !scale.contains(v)) {
            return Err(StatsError::OutOfRange { value, scale });
        }
        Ok(Self {
            label: label.into(),
            scale,
            ratings,
        })
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 log10(|signal|^2 / |noise|^2)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> Result<f64> {
    if signal.len() != noise.len() {
        return Err(StatsError::LengthMismatch(signal.len(), noise.len()));
    }
    let (ps, pn) = (power(signal), power(noise));
    if ps == 0.0 || pn == 0.0 {
        return Err(StatsError::Degenerate("zero-power reference".into()));
    }
    Ok(10.0 * (ps / pn).log10())
}

pub fn si_snr_improvement(enhanced: &[f64], mixture: &[f64], clean: &[f64]) -> Result<f64> {
    if power(clean) == 0.0 {
        return Err(StatsError::Degenerate("zero-power reference".into()));
    }
    Ok(si_snr(enhanced, clean)? - si_snr(mixture, clean)?)
}

/// Linear-interpolation quantile over sorted data (inclusive: `q = 0` is
/// the minimum, `q = 1` the maximum).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MedianIqr {
    pub median: f64,
    pub iqr: f64,
}

pub fn median_iqr(ratings: &[f64]) -> Result<MedianIqr> {
    if ratings.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut sorted = ratings.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(MedianIqr {
        median: quantile(&sorted, 0.5),
        iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
    })
}

/// Ranks `1..=n` with ties replaced by their average.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankSumMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankSumResult {
    /// Rank sum of the first sample.
    pub w: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub method: RankSumMethod,
}

/// Two-sided Wilcoxon rank-sum test; exact for combined sizes up to
/// [`EXACT_MAX_N`], normal approximation (tie and continuity corrected)
/// above.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    if a.len() + b.len() <= EXACT_MAX_N {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

fn pooled_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let w: f64 = ranks[..a.len()].iter().sum();
    let expected = a.len() as f64 * (pooled.len() + 1) as f64 / 2.0;
    Ok((ranks, w, expected))
}

/// Enumerates every way of assigning `|a|` of the pooled midranks to the
/// first sample.
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    let (ranks, w, expected) = pooled_ranks(a, b)?;
    let observed = (w - expected).abs();
    let n = ranks.len();
    let k = a.len();
    let (mut extreme, mut total) = (0u64, 0u64);
    let mut pick: Vec<usize> = (0..k).collect();
    loop {
        let sum: f64 = pick.iter().map(|&i| ranks[i]).sum();
        total += 1;
        if (sum - expected).abs() >= observed - 1e-9 {
            extreme += 1;
        }
        // Next k-combination in lexicographic order.
        let Some(i) = (0..k).rev().find(|&i| pick[i] < n - k + i) else {
            break;
        };
        pick[i] += 1;
        for j in i + 1..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
    Ok(RankSumResult {
        w,
        p: extreme as f64 / total as f64,
        method: RankSumMethod::Exact,
    })
}

pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    let (_, w, expected) = pooled_ranks(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(RankSumResult {
            w,
            p: 1.0,
            method: RankSumMethod::Normal,
        });
    }
    let z = ((w - expected).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(RankSumResult {
        w,
        p,
        method: RankSumMethod::Normal,
    })
}

/// `p_i < alpha / m`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let threshold = alpha / p_values.len().max(1) as f64;
    p_values.iter().map(|&p| p < threshold).collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// Item the comparison is restricted to, or `None` when pooled.
    pub item: Option<String>,
    pub p: f64,
    pub significant: bool,
}

/// Ratings of one condition on one item.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ItemRatings {
    pub item: String,
    pub set: RatingSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    /// Ratings pooled across items before testing.
    Pooled,
    /// One family of tests per item.
    PerItem,
}

/// Pairwise rank-sum tests of `pairs` of condition labels, Bonferroni
/// corrected over the pairs within each family.
pub fn significance_table(
    ratings: &[ItemRatings],
    pairs: &[(String, String)],
    mode: AnalysisMode,
    alpha: f64,
) -> Result<Vec<Comparison>> {
    let collect = |label: &str, item: Option<&str>| -> Vec<f64> {
        ratings
            .iter()
            .filter(|r| r.set.label == label && item.is_none_or(|i| r.item == i))
            .flat_map(|r| r.set.ratings.iter().copied())
            .collect()
    };
    let families: Vec<Option<String>> = match mode {
        AnalysisMode::Pooled => vec![None],
        AnalysisMode::PerItem => {
            let mut items: Vec<String> = ratings.iter().map(|r| r.item.clone()).collect();
            items.sort();
            items.dedup();
            items.into_iter().map(Some).collect()
        }
    };
    let mut out = Vec::new();
    for item in families {
        // Per item, pairs with a condition the item lacks drop out of the family.
        let mut tested = Vec::new();
        let mut ps = Vec::new();
        for (a, b) in pairs {
            let ra = collect(a, item.as_deref());
            let rb = collect(b, item.as_deref());
            if item.is_some() && (ra.is_empty() || rb.is_empty()) {
                continue;
            }
            ps.push(rank_sum_test(&ra, &rb)?.p);
            tested.push((a, b));
        }
        let flags = bonferroni(&ps, alpha);
        for (((a, b), p), significant) in tested.into_iter().zip(ps).zip(flags) {
            out.push(Comparison {
                a: a.clone(),
                b: b.clone(),
                item: item.clone(),
                p,
                significant,
            });
        }
    }
    Ok(out)
}

pub fn table_to_csv(rows: &[Comparison]) -> String {
    let mut s = String::from("item,a,b,p,significant\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.item.as_deref().unwrap_or("pooled"),
            r.a,
            r.b,
            r.p,
            r.significant
        ));
    }
    s
}

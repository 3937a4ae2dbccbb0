//! Texture entropy of class maps and the spectral consistency feature of
//! entropy sequences.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{ClassMap, Grid};
use crate::scalar::Scalar;

/// Window geometry for pattern encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureConfig {
    /// Side length `K_s` of the structural perception window.
    pub window: usize,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self { window: 3 }
    }
}

/// Pattern ids of every fully contained `K_s x K_s` window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u64>,
}

/// Normalized histogram over the `k^{K_s^2}` pattern ids, stored sparsely.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternHistogram {
    bins: u64,
    freq: BTreeMap<u64, f64>,
}

impl PatternHistogram {
    /// Number of bins, `k^{K_s^2}`.
    pub fn bins(&self) -> u64 {
        self.bins
    }

    pub fn get(&self, id: u64) -> f64 {
        self.freq.get(&id).copied().unwrap_or(0.0)
    }

    /// Non-zero `(id, frequency)` pairs in id order.
    pub fn nonzero(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.freq.iter().map(|(&k, &v)| (k, v))
    }

    /// Histogram from explicit frequencies; they must be non-negative and
    /// sum to one.
    pub fn from_frequencies(bins: u64, freq: impl IntoIterator<Item = (u64, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, f) in freq {
            ensure!(id < bins, "pattern id {id} outside {bins} bins");
            ensure!(f >= 0.0 && f.is_finite(), "frequency must be finite and non-negative");
            if f > 0.0 {
                *map.entry(id).or_insert(0.0) += f;
            }
        }
        let total: f64 = map.values().sum();
        ensure!((total - 1.0).abs() <= 1e-6, "frequencies sum to {total}, expected 1");
        Ok(Self { bins, freq: map })
    }
}

fn window_exponent_ok(classes: u8, window: usize) -> Result<()> {
    ensure!(window >= 2, "window size must be at least 2, got {window}");
    let bits = (window * window) as f64 * f64::from(classes).log2();
    ensure!(
        bits <= 62.0,
        "{window}x{window} windows over {classes} classes need {bits:.1} bits, limit is 62"
    );
    Ok(())
}

/// Valid (unpadded) correlation of the class map with the base-`k` weight
/// matrix `B[r][c] = k^{r K_s + c}`, giving one injective id per window.
pub fn pattern_encode(m: &ClassMap, window: usize) -> Result<PatternMap> {
    let k = m.classes();
    window_exponent_ok(k, window)?;
    let (h, w) = m.shape();
    ensure!(
        h >= window && w >= window,
        "map {h}x{w} is smaller than the {window}x{window} window"
    );
    let weights: Vec<u64> = (0..window * window)
        .map(|e| u64::from(k).pow(e as u32))
        .collect();
    let (oh, ow) = (h - window + 1, w - window + 1);
    let mut ids = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut id = 0u64;
            for r in 0..window {
                for c in 0..window {
                    id += u64::from(m.get(i + r, j + c)) * weights[r * window + c];
                }
            }
            ids.push(id);
        }
    }
    Ok(PatternMap {
        height: oh,
        width: ow,
        ids,
    })
}

/// Normalized histogram of window pattern ids.
pub fn structural_encoding(m: &ClassMap, window: usize) -> Result<PatternHistogram> {
    let pm = pattern_encode(m, window)?;
    let bins = u64::from(m.classes()).pow((window * window) as u32);
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &id in &pm.ids {
        *counts.entry(id).or_insert(0) += 1;
    }
    let n = pm.ids.len() as f64;
    Ok(PatternHistogram {
        bins,
        freq: counts.into_iter().map(|(id, c)| (id, c as f64 / n)).collect(),
    })
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn texture_entropy(hist: &PatternHistogram) -> f64 {
    -hist
        .freq
        .values()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// Largest attainable entropy for a window and class count, `K_s^2 log2 k`.
pub fn max_entropy(classes: u8, window: usize) -> f64 {
    (window * window) as f64 * f64::from(classes).log2()
}

/// Texture entropy of a probability map binarized at `threshold`.
pub fn mask_entropy<S: Scalar>(prob: &Grid<S>, threshold: f64, window: usize) -> Result<f64> {
    let classes = ClassMap::threshold(prob, S::of(threshold));
    Ok(texture_entropy(&structural_encoding(&classes, window)?))
}

/// High-frequency share of one sequence's DFT magnitude:
/// `sum_{f > tau_f} |F(f)| / sum_f |F(f)|` over the two-sided bins
/// `0..len`. An all-zero spectrum gives 0.
pub fn high_frequency_ratio(seq: &[f64], tau_f: usize) -> Result<f64> {
    ensure!(seq.len() >= 2, "entropy sequence needs at least two entries");
    ensure!(
        tau_f < seq.len(),
        "frequency threshold {tau_f} must be below the sequence length {}",
        seq.len()
    );
    ensure!(seq.iter().all(|v| v.is_finite()), "entropy sequence must be finite");
    let mut buf: Vec<Complex<f64>> = seq.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let mut mags: Vec<f64> = buf.iter().map(|c| c.norm()).collect();
    // Flush transform round-off so that exactly periodic inputs (e.g.
    // constants) have exactly empty bins.
    let floor = mags.iter().copied().fold(0.0, f64::max) * seq.len() as f64 * f64::EPSILON;
    for m in &mut mags {
        if *m <= floor {
            *m = 0.0;
        }
    }
    let total: f64 = mags.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let high: f64 = mags[tau_f + 1..].iter().sum();
    Ok((high / total).clamp(0.0, 1.0))
}

/// Consistency feature: the mean high-frequency ratio over the supplied
/// entropy sequences.
pub fn consistency_feature<T: AsRef<[f64]>>(seqs: &[T], tau_f: usize) -> Result<f64> {
    ensure!(!seqs.is_empty(), "need at least one entropy sequence");
    let mut sum = 0.0;
    for s in seqs {
        sum += high_frequency_ratio(s.as_ref(), tau_f)?;
    }
    Ok(sum / seqs.len() as f64)
}

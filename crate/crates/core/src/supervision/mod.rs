//! Training signals for unlabeled images: resampled prediction sets,
//! pseudo-labels, loss masks, the consistency feature and the unsupervised
//! noise-consistency loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::denoiser::NoiseModel;
use crate::diffusion::{rollout, NoiseSchedule, PredictionSequenceSet, StepSubsequence, Trajectory};
use crate::error::{ensure, invalid, Error, Result};
use crate::grid::{ensure_same_shape, ClassMap, Grid, Image, SignalMask};
use crate::nn::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::texture::{consistency_feature, mask_entropy};

/// Direction of the dispersion test in the loss mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Keep pixels whose cross-trajectory dispersion is small.
    #[default]
    Consistency,
    /// Keep pixels whose dispersion is large, as the inequality is printed.
    Literal,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "consistency" => Ok(Self::Consistency),
            "literal" => Ok(Self::Literal),
            other => Err(invalid!("unknown loss-mask mode '{other}'")),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Consistency => "consistency",
            Self::Literal => "literal",
        })
    }
}

/// Thresholds used to turn a prediction set into a supervision signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub tau_m: f64,
    pub tau_c: f64,
    pub tau_v: f64,
    pub tau_f: usize,
    /// Window side of the texture encoding.
    pub window: usize,
    pub mask_mode: MaskMode,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            tau_m: 0.5,
            tau_c: 0.8,
            tau_v: 0.05,
            tau_f: 9,
            window: 3,
            mask_mode: MaskMode::Consistency,
        }
    }
}

/// Pseudo-label, loss mask and consistency feature for one unlabeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionSignal {
    pub pseudo_label: ClassMap,
    pub loss_mask: ClassMap,
    pub lambda: f64,
    /// Mean probability view of the final estimates.
    pub mean_final: Grid<f64>,
    /// Texture-entropy series per trajectory.
    pub entropy: Vec<Vec<f64>>,
}

/// One uniform draw from each of `m` equal parts of `[1, t]`.
pub fn sample_step_subsequence<R: Rng + ?Sized>(t: usize, m: usize, rng: &mut R) -> Result<StepSubsequence> {
    StepSubsequence::sample(t, m, rng)
}

/// Draws one shared step subsequence and `n` independent trajectories.
pub fn build_sequences<S, M, R>(
    image: &Image<S>,
    model: &M,
    sched: &NoiseSchedule,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<PredictionSequenceSet<S>>
where
    S: Scalar,
    M: NoiseModel<S> + ?Sized,
    R: Rng + ?Sized,
{
    ensure!(n >= 1, "need at least one trajectory");
    let steps = sample_step_subsequence(sched.steps(), m, rng)?;
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    rollout(model, image, sched, &steps, &seeds)
}

fn probability<S: Scalar>(m: &SignalMask<S>) -> Vec<f64> {
    m.as_slice().iter().map(|v| (v.as_f64() + 1.0) * 0.5).collect()
}

/// Per-pixel mean over trajectories of the probability view at position `k`.
fn position_mean<S: Scalar>(set: &PredictionSequenceSet<S>, k: usize) -> Vec<f64> {
    let n = set.trajectories.len() as f64;
    let mut acc = vec![0.0; set.trajectories[0].x0_preds[k].len()];
    for tr in &set.trajectories {
        for (a, p) in acc.iter_mut().zip(probability(&tr.x0_preds[k])) {
            *a += p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn dims<S: Scalar>(set: &PredictionSequenceSet<S>) -> (usize, usize) {
    set.trajectories[0].x0_preds[0].shape()
}

/// Mean probability view of the most refined estimates.
pub fn mean_final<S: Scalar>(set: &PredictionSequenceSet<S>) -> Result<Grid<f64>> {
    set.validate()?;
    let (h, w) = dims(set);
    Grid::from_vec(h, w, position_mean(set, set.steps.len() - 1))
}

/// Mean over positions of the mean absolute deviation across trajectories,
/// in probability view.
pub fn dispersion<S: Scalar>(set: &PredictionSequenceSet<S>) -> Result<Grid<f64>> {
    set.validate()?;
    let (h, w) = dims(set);
    let (n, m) = set.shape();
    let mut d = vec![0.0; h * w];
    for k in 0..m {
        let mean = position_mean(set, k);
        for tr in &set.trajectories {
            for ((acc, p), mu) in d.iter_mut().zip(probability(&tr.x0_preds[k])).zip(&mean) {
                *acc += (p - mu).abs();
            }
        }
    }
    let norm = (n * m) as f64;
    d.iter_mut().for_each(|v| *v /= norm);
    Grid::from_vec(h, w, d)
}

/// `1` where the mean final probability reaches `tau_m`.
pub fn pseudo_label<S: Scalar>(set: &PredictionSequenceSet<S>, tau_m: f64) -> Result<ClassMap> {
    Ok(ClassMap::threshold(&mean_final(set)?, tau_m))
}

/// Confidence-and-consistency gate.
///
/// `term1 = [mean_final >= (1 - lambda) tau_c]`; the dispersion test is
/// `D <= (1 - lambda) tau_v` in consistency mode and `D >= (1 - lambda) tau_v`
/// in literal mode.
pub fn loss_mask<S: Scalar>(
    set: &PredictionSequenceSet<S>,
    lambda: f64,
    tau_c: f64,
    tau_v: f64,
    mode: MaskMode,
) -> Result<ClassMap> {
    ensure!((0.0..=1.0).contains(&lambda), "lambda {lambda} outside [0, 1]");
    let fin = mean_final(set)?;
    let disp = dispersion(set)?;
    let (conf, cons) = ((1.0 - lambda) * tau_c, (1.0 - lambda) * tau_v);
    let data = fin
        .as_slice()
        .iter()
        .zip(disp.as_slice())
        .map(|(&p, &d)| {
            let t1 = p >= conf;
            let t2 = match mode {
                MaskMode::Consistency => d <= cons,
                MaskMode::Literal => d >= cons,
            };
            u8::from(t1 && t2)
        })
        .collect();
    ClassMap::new(fin.height(), fin.width(), 2, data)
}

/// Texture-entropy series of one trajectory: every clean estimate in visit
/// order followed by the terminal mask (`M + 1` entries).
pub fn entropy_series<S: Scalar>(tr: &Trajectory<S>, tau_m: f64, window: usize) -> Result<Vec<f64>> {
    tr.x0_preds
        .iter()
        .chain(std::iter::once(&tr.output))
        .map(|m| mask_entropy(&m.probability(), tau_m, window))
        .collect()
}

/// Computes the consistency feature, pseudo-label and loss mask.
pub fn evaluate_sequences<S: Scalar>(
    set: &PredictionSequenceSet<S>,
    cfg: &SignalConfig,
) -> Result<SupervisionSignal> {
    set.validate()?;
    let entropy: Vec<Vec<f64>> = set
        .trajectories
        .iter()
        .map(|tr| entropy_series(tr, cfg.tau_m, cfg.window))
        .collect::<Result<_>>()?;
    let lambda = consistency_feature(&entropy, cfg.tau_f)?;
    Ok(SupervisionSignal {
        pseudo_label: pseudo_label(set, cfg.tau_m)?,
        loss_mask: loss_mask(set, lambda, cfg.tau_c, cfg.tau_v, cfg.mask_mode)?,
        lambda,
        mean_final: mean_final(set)?,
        entropy,
    })
}

/// Target of the aggregated residual of one trajectory:
/// `sum_j (noisy_j - sqrt(abar_{t_j}) y_s) / sqrt(1 - abar_{t_j})`.
fn residual_target<S: Scalar>(
    tr: &Trajectory<S>,
    steps: &StepSubsequence,
    label: &ClassMap,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; label.as_slice().len()];
    for (noisy, &t) in tr.noisy.iter().zip(steps.steps()) {
        ensure_same_shape(noisy.shape(), label.shape())?;
        let abar = sched.alpha_bar(t);
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        for ((o, x), &y) in acc.iter_mut().zip(noisy.as_slice()).zip(label.as_slice()) {
            let ys = if y > 0 { 1.0 } else { -1.0 };
            *o += (x.as_f64() - a * ys) / b;
        }
    }
    Ok(acc)
}

fn check_gate(label: &ClassMap, mask: &ClassMap) -> Result<()> {
    ensure_same_shape(label.shape(), mask.shape())?;
    ensure!(label.classes() == 2 && mask.classes() == 2, "pseudo-label and loss mask must be binary");
    Ok(())
}

/// Unsupervised loss from the recorded noise estimates:
/// `sum_i || delta * sum_j r_{i,j} / (M N) ||^2` with
/// `r_{i,j} = (noisy_{i,j} - sqrt(abar_{t_j}) y_s) / sqrt(1 - abar_{t_j}) - eps_hat_{i,j}`.
pub fn unsupervised_loss<S: Scalar>(
    set: &PredictionSequenceSet<S>,
    label: &ClassMap,
    mask: &ClassMap,
    sched: &NoiseSchedule,
) -> Result<f64> {
    set.validate()?;
    check_gate(label, mask)?;
    let (n, m) = set.shape();
    let norm = 1.0 / (n * m) as f64;
    let mut loss = 0.0;
    for tr in &set.trajectories {
        let mut agg = residual_target(tr, &set.steps, label, sched)?;
        for e in &tr.eps_hat {
            for (a, v) in agg.iter_mut().zip(e.as_slice()) {
                *a -= v.as_f64();
            }
        }
        loss += agg
            .iter()
            .zip(mask.as_slice())
            .filter(|(_, &d)| d > 0)
            .map(|(a, _)| (a * norm).powi(2))
            .sum::<f64>();
    }
    Ok(loss)
}

/// Differentiable contribution of trajectory `index` to [`unsupervised_loss`].
///
/// `eps_hat` holds the re-evaluated noise estimates of that trajectory as
/// `[M, 1, H, W]` in visit order.
pub fn trajectory_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    eps_hat: Var,
    set: &PredictionSequenceSet<S>,
    index: usize,
    label: &ClassMap,
    mask: &ClassMap,
    sched: &NoiseSchedule,
) -> Result<Var> {
    check_gate(label, mask)?;
    let (n, m) = set.shape();
    let (h, w) = label.shape();
    ensure!(g.shape(eps_hat) == [m, 1, h, w], "noise estimates have shape {:?}", g.shape(eps_hat));
    let tr = set
        .trajectories
        .get(index)
        .ok_or_else(|| invalid!("trajectory {index} out of range"))?;
    let target = residual_target(tr, &set.steps, label, sched)?;
    let summed = g.group_sum(eps_hat, vec![(0..m).collect()]);
    let target = g.constant(Tensor::from_vec(&[1, 1, h, w], target.into_iter().map(S::of).collect())?);
    let resid = g.sub(target, summed);
    let norm = 1.0 / (n * m) as f64;
    let gate = Tensor::from_vec(
        &[1, 1, h, w],
        mask.as_slice().iter().map(|&d| if d > 0 { S::of(norm) } else { S::zero() }).collect(),
    )?;
    let gated = g.mul_const(resid, gate);
    Ok(g.sum_squares(gated))
}

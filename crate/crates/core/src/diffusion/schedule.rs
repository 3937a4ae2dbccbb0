use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};

/// Registered noise-schedule families.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `beta_t = 1 - alpha_t` linear from `1e-4 * 1000/T` to `0.02 * 1000/T`.
    #[default]
    Linear,
    /// Squared-cosine cumulative schedule.
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(invalid!("unknown schedule family '{other}'")),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// How the stochastic term of a reverse step is realized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseTerm {
    /// Adds `sqrt(1 - alpha) * z` with `z` standard normal.
    #[default]
    Gaussian,
    /// Adds the constant `1 - alpha` to every entry.
    Literal,
}

impl FromStr for ReverseTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Self::Gaussian),
            "literal" => Ok(Self::Literal),
            other => Err(invalid!("unknown reverse term '{other}'")),
        }
    }
}

const MAX_BETA: f64 = 0.999;

/// Variance table `alpha_1..alpha_T` with cumulative products, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    reverse_term: ReverseTerm,
    clip_denoised: bool,
}

/// Builds a schedule of `steps` entries from a family name.
pub fn make_schedule(steps: usize, kind: &str) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind.parse()?)
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        ensure!(steps >= 1, "schedule needs at least one step");
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps as f64;
                let (start, end) = (1e-4 * scale, 0.02 * scale);
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 {
                            0.0
                        } else {
                            i as f64 / (steps - 1) as f64
                        };
                        (start + (end - start) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| ((t / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (0..steps)
                    .map(|i| (1.0 - f((i + 1) as f64) / f(i as f64)).clamp(1e-8, MAX_BETA))
                    .collect()
            }
        };
        let mut s = Self::from_alphas(betas.iter().map(|b| 1.0 - b).collect())?;
        s.kind = kind;
        Ok(s)
    }

    /// Schedule from an explicit `alpha_1..alpha_T` table, each in `(0, 1)`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        ensure!(!alphas.is_empty(), "schedule needs at least one step");
        ensure!(
            alphas.iter().all(|a| *a > 0.0 && *a < 1.0),
            "every alpha must lie in (0, 1)"
        );
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind: ScheduleKind::Linear,
            alphas,
            alpha_bars,
            reverse_term: ReverseTerm::Gaussian,
            clip_denoised: true,
        })
    }

    pub fn with_reverse_term(mut self, term: ReverseTerm) -> Self {
        self.reverse_term = term;
        self
    }

    /// With clipping on (the default), reverse steps use the noise implied
    /// by the clamped clean estimate, which keeps long chains bounded.
    pub fn with_clip_denoised(mut self, clip: bool) -> Self {
        self.clip_denoised = clip;
        self
    }

    pub fn clip_denoised(&self) -> bool {
        self.clip_denoised
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn reverse_term(&self) -> ReverseTerm {
        self.reverse_term
    }

    /// `T`, the number of diffusion steps.
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            "step {t} outside [1, {}]",
            self.steps()
        );
        Ok(())
    }

    /// `alpha_t` for `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_family_at_one_hundred_steps() {
        let s = make_schedule(100, "linear").unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        for t in 1..=100 {
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-12);
        }
        assert!(s.alpha_bar(100) < 0.01);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_schedule(0, "linear").is_err());
        assert!(make_schedule(10, "sigmoid").is_err());
    }

    #[test]
    fn short_and_cosine_schedules_stay_valid() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 2, 5, 20, 1000] {
                let s = NoiseSchedule::new(steps, kind).unwrap();
                for t in 1..=steps {
                    assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0, "{kind} T={steps} t={t}");
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
        }
    }
}

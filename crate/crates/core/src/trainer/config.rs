use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{make_schedule, NoiseSchedule, ReverseTerm};
use crate::error::{ensure, Result};
use crate::nn::AdamWConfig;
use crate::scalar::Scalar;
use crate::supervision::SignalConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Diffusion length `T`.
    pub steps: usize,
    pub schedule: String,
    /// Use the constant-offset reverse term instead of Gaussian noise.
    pub literal_reverse: bool,
    /// Reverse steps follow the clamped clean estimate.
    pub clip_denoised: bool,
    /// Step subsequence length for unlabeled signals.
    pub m: usize,
    /// Trajectories per unlabeled image.
    pub n: usize,
    pub signal: SignalConfig,
    pub optimizer: AdamWConfig,
    /// Per-pixel loss weight on scratch pixels in the supervised loss.
    pub scratch_weight: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Unlabeled batches whose gradients join each update.
    pub unsupervised_per_supervised: usize,
    /// Weight of the unsupervised loss in the combined update.
    pub unsupervised_weight: f64,
    /// Supervised steps before unsupervised steps start.
    pub warmup_steps: u64,
    pub supervised_only: bool,
    pub augment: bool,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    /// Stop after this many validations without a better IoU.
    pub patience: Option<usize>,
    pub validate_every_epochs: usize,
    /// Extra checkpoint cadence in steps (epoch ends always checkpoint).
    pub checkpoint_every_steps: Option<u64>,
    /// Reverse steps used for validation; `None` runs all `T`.
    pub eval_steps: Option<usize>,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            schedule: "linear".into(),
            literal_reverse: false,
            clip_denoised: true,
            m: 12,
            n: 2,
            signal: SignalConfig::default(),
            optimizer: AdamWConfig::default(),
            scratch_weight: 5.0,
            labeled_batch: 4,
            unlabeled_batch: 2,
            unsupervised_per_supervised: 1,
            unsupervised_weight: 1.0,
            warmup_steps: 0,
            supervised_only: false,
            augment: true,
            epochs: 50,
            max_steps: None,
            patience: None,
            validate_every_epochs: 1,
            checkpoint_every_steps: None,
            eval_steps: None,
            seed: 0,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.signal;
        ensure!(self.steps >= 1, "T must be at least 1");
        ensure!(self.m >= 1 && self.m <= self.steps, "M = {} must lie in 1..={}", self.m, self.steps);
        ensure!(self.n >= 1, "N must be at least 1");
        for (name, v) in [("tau_m", s.tau_m), ("tau_c", s.tau_c), ("tau_v", s.tau_v)] {
            ensure!((0.0..=1.0).contains(&v), "{name} = {v} outside [0, 1]");
        }
        ensure!(
            s.tau_f < self.m + 1,
            "tau_f = {} must be below the entropy series length M + 1 = {}",
            s.tau_f,
            self.m + 1
        );
        ensure!(s.window >= 1, "texture window must be positive");
        ensure!(self.optimizer.lr > 0.0, "learning rate must be positive");
        ensure!(self.scratch_weight > 0.0, "scratch weight must be positive");
        ensure!(self.labeled_batch >= 1, "labeled batch must be positive");
        ensure!(self.unlabeled_batch >= 1, "unlabeled batch must be positive");
        ensure!(self.validate_every_epochs >= 1, "validation cadence must be positive");
        if let Some(e) = self.eval_steps {
            ensure!(e >= 1 && e <= self.steps, "eval_steps = {e} must lie in 1..={}", self.steps);
        }
        self.denoiser.validate()?;
        self.schedule()?;
        Ok(())
    }

    /// A freshly initialized network bound to this config's schedule.
    pub fn build_model<S: Scalar>(&self, seed: u64) -> Result<Denoiser<S>> {
        Ok(Denoiser::new(self.denoiser.clone(), seed)?.with_schedule(&self.schedule()?))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = make_schedule(self.steps, &self.schedule)?.with_clip_denoised(self.clip_denoised);
        Ok(if self.literal_reverse {
            s.with_reverse_term(ReverseTerm::Literal)
        } else {
            s
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| crate::error::invalid!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.steps, cfg.m, cfg.n), (100, 12, 2));
        assert_eq!(cfg.scratch_weight, 5.0);
        assert_eq!(cfg.optimizer.lr, 1e-4);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_thresholds() {
        let mut cfg = TrainConfig::default();
        cfg.signal.tau_c = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.signal.tau_f = 13;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let cfg = TrainConfig::from_toml("m = 6\n[signal]\ntau_f = 4\n").unwrap();
        assert_eq!(cfg.m, 6);
    }
}

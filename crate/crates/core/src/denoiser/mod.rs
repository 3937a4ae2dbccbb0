//! The conditional noise predictor `eps_theta(x_t, t, I, x0_prior)`.

mod config;
mod net;

pub use config::{DenoiserConfig, Fusion};
pub use net::{build_denoiser, Denoiser};

use crate::error::{ensure, Result};
use crate::grid::{ensure_same_shape, Image, NoiseField, SignalMask};
use crate::scalar::Scalar;

/// One noise-prediction query.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseInput<'a, S> {
    pub x_t: &'a SignalMask<S>,
    pub t: usize,
    pub image: &'a Image<S>,
    pub prior: &'a SignalMask<S>,
}

impl<S: Scalar> DenoiseInput<'_, S> {
    pub fn check(&self) -> Result<()> {
        ensure_same_shape(self.x_t.shape(), self.image.shape())?;
        ensure_same_shape(self.prior.shape(), self.image.shape())
    }
}

/// Anything that can estimate the noise in a batch of noisy masks.
///
/// Implementations must be pure: identical inputs give identical outputs.
pub trait NoiseModel<S: Scalar> {
    fn predict_batch(&self, inputs: &[DenoiseInput<'_, S>]) -> Result<Vec<NoiseField<S>>>;

    fn predict_noise(
        &self,
        x_t: &SignalMask<S>,
        t: usize,
        image: &Image<S>,
        prior: &SignalMask<S>,
    ) -> Result<NoiseField<S>> {
        let mut out = self.predict_batch(&[DenoiseInput {
            x_t,
            t,
            image,
            prior,
        }])?;
        Ok(out.remove(0))
    }
}

impl<S: Scalar, M: NoiseModel<S> + ?Sized> NoiseModel<S> for &M {
    fn predict_batch(&self, inputs: &[DenoiseInput<'_, S>]) -> Result<Vec<NoiseField<S>>> {
        (**self).predict_batch(inputs)
    }
}

/// Raw sinusoidal basis for step `t`: interleaved `[sin(t w_0), cos(t w_0), ...]`
/// with `w_i = 10000^{-i / (dim / 2)}`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    ensure!(dim > 0 && dim.is_multiple_of(2), "time embedding dimension must be even and positive, got {dim}");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let phase = t as f64 * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

pub(crate) fn check_inputs<S: Scalar>(inputs: &[DenoiseInput<'_, S>]) -> Result<()> {
    ensure!(!inputs.is_empty(), "empty denoiser batch");
    for input in inputs {
        input.check()?;
        ensure_same_shape(input.image.shape(), inputs[0].image.shape())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_phase_basis() {
        let b = time_embed(0, 8).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(time_embed(3, 3).is_err());
        assert!(time_embed(3, 0).is_err());
    }

    #[test]
    fn basis_separates_every_step_pair() {
        let bases: Vec<Vec<f64>> = (0..=100).map(|t| time_embed(t, 128).unwrap()).collect();
        for a in 0..bases.len() {
            for b in a + 1..bases.len() {
                let d = bases[a]
                    .iter()
                    .zip(&bases[b])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(d > 1e-6, "t={a} and t={b} collide");
            }
        }
    }
}

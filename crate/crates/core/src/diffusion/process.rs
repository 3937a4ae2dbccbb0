//! Closed-form forward corruption, single reverse steps and clean-mask
//! estimates. Coefficients are evaluated in `f64` and the result is rounded
//! to the mask's scalar type once.

use crate::diffusion::schedule::{NoiseSchedule, ReverseTerm};
use crate::error::{ensure, Result};
use crate::grid::{ensure_same_shape, Grid, NoiseField, SignalMask};
use crate::scalar::Scalar;

/// `x_t = sqrt(abar_t) y + sqrt(1 - abar_t) eps`. Not clamped.
pub fn forward_sample<S: Scalar>(
    y: &SignalMask<S>,
    t: usize,
    eps: &NoiseField<S>,
    sched: &NoiseSchedule,
) -> Result<SignalMask<S>> {
    sched.check_step(t)?;
    let abar = sched.alpha_bar(t);
    forward_with_alpha_bar(y, abar, eps)
}

/// Forward corruption with an explicit cumulative product (`abar = 1` is
/// the noiseless identity).
pub fn forward_with_alpha_bar<S: Scalar>(
    y: &SignalMask<S>,
    abar: f64,
    eps: &NoiseField<S>,
) -> Result<SignalMask<S>> {
    ensure!((0.0..=1.0).contains(&abar), "alpha_bar {abar} outside [0, 1]");
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    let g = y.zip_map(eps, |yv, ev| S::of(a * yv.as_f64() + b * ev.as_f64()))?;
    Ok(SignalMask(g))
}

/// One ancestral reverse step from `t` to `t - 1`.
///
/// `x_{t-1} = alpha_t^{-1/2} (x_t - (1 - alpha_t) / sqrt(1 - abar_t) eps_hat) + [t > 1] sigma_t z`
/// with `sigma_t = sqrt(1 - alpha_t)`. The schedule's [`ReverseTerm`]
/// selects the literal constant-offset variant instead.
pub fn reverse_step<S: Scalar>(
    x_t: &SignalMask<S>,
    t: usize,
    eps_hat: &NoiseField<S>,
    z: &NoiseField<S>,
    sched: &NoiseSchedule,
) -> Result<SignalMask<S>> {
    sched.check_step(t)?;
    reverse_jump(x_t, t, t - 1, eps_hat, z, sched)
}

/// Reverse step from `t` to an earlier step `t_prev < t`.
///
/// The effective per-step coefficient is `alpha = abar_t / abar_{t_prev}`,
/// which equals `alpha_t` when `t_prev = t - 1`. No stochastic term is added
/// when landing on `t_prev = 0`. If the schedule clips, `eps_hat` is first
/// replaced by the noise consistent with the clamped clean estimate; this is
/// a no-op whenever that estimate already lies in `[-1, 1]`.
pub fn reverse_jump<S: Scalar>(
    x_t: &SignalMask<S>,
    t: usize,
    t_prev: usize,
    eps_hat: &NoiseField<S>,
    z: &NoiseField<S>,
    sched: &NoiseSchedule,
) -> Result<SignalMask<S>> {
    sched.check_step(t)?;
    ensure!(t_prev < t, "reverse jump needs t_prev < t ({t_prev} >= {t})");
    ensure_same_shape(x_t.shape(), eps_hat.shape())?;
    ensure_same_shape(x_t.shape(), z.shape())?;
    let abar = sched.alpha_bar(t);
    let alpha = abar / sched.alpha_bar(t_prev);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = (1.0 - alpha) / (1.0 - abar).sqrt();
    let stochastic = t_prev > 0;
    let sigma = (1.0 - alpha).sqrt();
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    let clip = sched.clip_denoised();
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .zip(z.as_slice())
        .map(|((&x, &e), &zz)| {
            let (x, mut e) = (x.as_f64(), e.as_f64());
            if clip {
                let x0 = (x - b * e) / a;
                if !(-1.0..=1.0).contains(&x0) {
                    e = (x - a * x0.clamp(-1.0, 1.0)) / b;
                }
            }
            let mut v = inv_sqrt_alpha * (x - eps_coef * e);
            if stochastic {
                v += match sched.reverse_term() {
                    ReverseTerm::Gaussian => sigma * zz.as_f64(),
                    ReverseTerm::Literal => 1.0 - alpha,
                };
            }
            S::of(v)
        })
        .collect();
    Ok(SignalMask(Grid::from_vec(x_t.height(), x_t.width(), data)?))
}

/// Clean-mask estimate `clamp(abar_t^{-1/2} (x_t - sqrt(1 - abar_t) eps_hat), -1, 1)`.
pub fn estimate_x0<S: Scalar>(
    x_t: &SignalMask<S>,
    t: usize,
    eps_hat: &NoiseField<S>,
    sched: &NoiseSchedule,
) -> Result<SignalMask<S>> {
    sched.check_step(t)?;
    let abar = sched.alpha_bar(t);
    let (inv, b) = (1.0 / abar.sqrt(), (1.0 - abar).sqrt());
    let g = x_t.zip_map(eps_hat, |x, e| {
        S::of((inv * (x.as_f64() - b * e.as_f64())).clamp(-1.0, 1.0))
    })?;
    Ok(SignalMask(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(v: &[f64]) -> Grid<f64> {
        Grid::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn forward_special_cases() {
        let sched = make_schedule(100, "linear").unwrap();
        let y = SignalMask(grid(&[-1.0, 0.5, 1.0]));
        let eps = NoiseField(grid(&[0.3, -1.2, 2.0]));
        // abar = 1 is the identity.
        assert_eq!(forward_with_alpha_bar(&y, 1.0, &eps).unwrap(), y);
        // Zero noise: deterministic scaling.
        let zero = NoiseField::zeros(1, 3);
        let x = forward_sample(&y, 40, &zero, &sched).unwrap();
        let a = sched.alpha_bar(40).sqrt();
        for (xv, yv) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((xv - a * yv).abs() < 1e-15);
        }
        // Zero mask: pure noise.
        let x = forward_sample(&SignalMask::zeros(1, 3), 40, &eps, &sched).unwrap();
        let b = (1.0 - sched.alpha_bar(40)).sqrt();
        for (xv, ev) in x.as_slice().iter().zip(eps.as_slice()) {
            assert!((xv - b * ev).abs() < 1e-15);
        }
        assert!(forward_sample(&y, 0, &eps, &sched).is_err());
        assert!(forward_sample(&y, 101, &eps, &sched).is_err());
    }

    #[test]
    fn reverse_step_hand_value() {
        // alpha_t = 0.96, abar_t = 0.5, x_t = 0.3, eps_hat = 0.1, z = 0:
        // 0.96^{-1/2} * (0.3 - 0.04 / sqrt(0.5) * 0.1) = 0.2943431 / 0.9797959 = 0.3004127
        let expected = 0.300_412_7;
        // Two-step table with alpha_1 * alpha_2 = 0.5 and alpha_2 = 0.96.
        let sched = NoiseSchedule::from_alphas(vec![0.5 / 0.96, 0.96]).unwrap();
        let x = SignalMask(grid(&[0.3]));
        let out = reverse_step(&x, 2, &NoiseField(grid(&[0.1])), &NoiseField(grid(&[0.0])), &sched).unwrap();
        assert!((out.as_slice()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn final_step_has_no_stochastic_term() {
        let sched = make_schedule(100, "linear").unwrap();
        let x = SignalMask(grid(&[0.2, -0.4]));
        let e = NoiseField(grid(&[0.5, 0.1]));
        let a = reverse_step(&x, 1, &e, &NoiseField(grid(&[0.0, 0.0])), &sched).unwrap();
        let b = reverse_step(&x, 1, &e, &NoiseField(grid(&[5.0, -3.0])), &sched).unwrap();
        assert_eq!(a, b);
        let lit = sched.clone().with_reverse_term(ReverseTerm::Literal);
        assert_eq!(reverse_step(&x, 1, &e, &NoiseField(grid(&[1.0, 1.0])), &lit).unwrap(), a);
        // Away from t = 1 the literal mode adds the constant 1 - alpha_t.
        let g = reverse_step(&x, 5, &e, &NoiseField::zeros(1, 2), &sched).unwrap();
        let l = reverse_step(&x, 5, &e, &NoiseField::zeros(1, 2), &lit).unwrap();
        for (gv, lv) in g.as_slice().iter().zip(l.as_slice()) {
            assert!((lv - gv - (1.0 - sched.alpha(5))).abs() < 1e-12);
        }
    }

    #[test]
    fn estimate_inverts_forward() {
        let sched = make_schedule(100, "linear").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = SignalMask(grid(&[-1.0, -0.3, 0.0, 0.7, 1.0]));
        for t in [1, 17, 50, 100] {
            let eps = NoiseField::standard_normal(1, 5, &mut rng);
            let x = forward_sample(&y, t, &eps, &sched).unwrap();
            let back = estimate_x0(&x, t, &eps, &sched).unwrap();
            assert!(back.max_abs_diff(&y) < 1e-10);
        }
        // Noise-free input.
        let x = SignalMask(y.map(|v| v * sched.alpha_bar(30).sqrt()));
        let back = estimate_x0(&x, 30, &NoiseField::zeros(1, 5), &sched).unwrap();
        assert!(back.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn true_noise_reverse_loop_lands_near_the_mask() {
        let sched = make_schedule(100, "linear").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = SignalMask(Grid::from_fn(8, 8, |r, c| if (r + c) % 3 == 0 { 1.0 } else { -1.0 }));
        let eps = NoiseField::standard_normal(8, 8, &mut rng);
        let zero = NoiseField::zeros(8, 8);
        let mut x = forward_sample(&y, 100, &eps, &sched).unwrap();
        for t in (1..=100).rev() {
            // The exact noise content of the current state.
            let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
            let true_eps = NoiseField(x.zip_map(&y, |xv, yv| (xv - a * yv) / b).unwrap());
            x = reverse_step(&x, t, &true_eps, &zero, &sched).unwrap();
        }
        assert!(x.max_abs_diff(&y) <= 0.05, "max err {}", x.max_abs_diff(&y));
    }

    #[test]
    fn clipping_only_touches_out_of_range_estimates() {
        let sched = make_schedule(100, "linear").unwrap();
        let raw = sched.clone().with_clip_denoised(false);
        let zero = NoiseField::zeros(1, 2);
        let t = 40;
        let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        // First entry implies x0 = 0.5, second x0 = 3.
        let x = SignalMask(grid(&[a * 0.5 + b * 0.2, a * 3.0 + b * 0.2]));
        let e = NoiseField(grid(&[0.2, 0.2]));
        let c = reverse_step(&x, t, &e, &zero, &sched).unwrap();
        let r = reverse_step(&x, t, &e, &zero, &raw).unwrap();
        assert_eq!(c.as_slice()[0], r.as_slice()[0]);
        // The clipped step equals the raw step taken with the noise implied by x0 = 1.
        let implied = NoiseField(grid(&[0.2, (x.as_slice()[1] - a) / b]));
        let want = reverse_step(&x, t, &implied, &zero, &raw).unwrap();
        assert!((c.as_slice()[1] - want.as_slice()[1]).abs() < 1e-12);
        assert!(c.as_slice()[1] < r.as_slice()[1]);
    }

    #[test]
    fn reverse_step_is_pure() {
        let sched = make_schedule(100, "linear").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = SignalMask(NoiseField::<f32>::standard_normal(4, 4, &mut rng).0);
        let e = NoiseField::standard_normal(4, 4, &mut rng);
        let z = NoiseField::zeros(4, 4);
        let a = reverse_step(&x, 33, &e, &z, &sched).unwrap();
        let b = reverse_step(&x, 33, &e, &z, &sched).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

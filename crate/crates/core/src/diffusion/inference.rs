use crate::denoiser::{DenoiseInput, NoiseModel};
use crate::diffusion::process::{estimate_x0, reverse_jump};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::steps::StepSubsequence;
use crate::error::{ensure, Result};
use crate::grid::{Image, NoiseField, SignalMask};
use crate::rng;
use crate::scalar::Scalar;

/// Everything recorded along one reverse trajectory, in visit order
/// (position 0 is the highest step, the last position the most refined).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    /// Noisy state fed to the network at each position.
    pub noisy: Vec<SignalMask<S>>,
    /// Network noise estimate at each position.
    pub eps_hat: Vec<NoiseField<S>>,
    /// Clamped clean-mask estimate produced at each position.
    pub x0_preds: Vec<SignalMask<S>>,
    /// Clamped terminal state.
    pub output: SignalMask<S>,
}

impl<S: Scalar> Trajectory<S> {
    /// Prior that was fed to the network at position `k`: all-zero at the
    /// first position, then the previous clean estimate.
    pub fn prior_at(&self, k: usize) -> SignalMask<S> {
        if k == 0 {
            let (h, w) = self.noisy[0].shape();
            SignalMask::zeros(h, w)
        } else {
            self.x0_preds[k - 1].clone()
        }
    }

    /// The most refined clean estimate.
    pub fn final_estimate(&self) -> &SignalMask<S> {
        self.x0_preds.last().expect("trajectory has at least one step")
    }
}

/// `N` trajectories sharing one step subsequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSequenceSet<S> {
    pub steps: StepSubsequence,
    pub trajectories: Vec<Trajectory<S>>,
}

impl<S: Scalar> PredictionSequenceSet<S> {
    /// `(N, M)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.trajectories.len(), self.steps.len())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.trajectories.is_empty(), "prediction set has no trajectories");
        let m = self.steps.len();
        for tr in &self.trajectories {
            ensure!(
                tr.noisy.len() == m && tr.eps_hat.len() == m && tr.x0_preds.len() == m,
                "trajectory length does not match the {m} shared steps"
            );
            ensure!(
                tr.x0_preds.iter().all(|x| x.is_clamped()),
                "clean estimates must lie in [-1, 1]"
            );
        }
        Ok(())
    }
}

/// Result of a single reverse run.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput<S> {
    pub mask: SignalMask<S>,
    /// Prior estimates in visit order.
    pub trace: Vec<SignalMask<S>>,
}

/// Runs independent reverse trajectories in lock step, batching the network
/// calls across trajectories. Trajectory `i` draws its initial state and
/// stochastic terms from a stream seeded by `seeds[i]`.
pub fn rollout<S: Scalar, M: NoiseModel<S> + ?Sized>(
    model: &M,
    image: &Image<S>,
    sched: &NoiseSchedule,
    steps: &StepSubsequence,
    seeds: &[u64],
) -> Result<PredictionSequenceSet<S>> {
    let images = vec![image; seeds.len()];
    rollout_images(model, &images, sched, steps, seeds)
}

/// Like [`rollout`], but trajectory `i` is conditioned on `images[i]`.
/// All images must share one shape.
pub fn rollout_images<S: Scalar, M: NoiseModel<S> + ?Sized>(
    model: &M,
    images: &[&Image<S>],
    sched: &NoiseSchedule,
    steps: &StepSubsequence,
    seeds: &[u64],
) -> Result<PredictionSequenceSet<S>> {
    ensure!(!steps.is_empty(), "empty step subsequence");
    ensure!(!seeds.is_empty(), "need at least one trajectory");
    ensure!(
        images.len() == seeds.len(),
        "{} images for {} trajectories",
        images.len(),
        seeds.len()
    );
    for &t in steps.steps() {
        sched.check_step(t)?;
    }
    let (h, w) = images[0].shape();
    for im in images {
        ensure!(im.shape() == (h, w), "image {:?} differs from {:?}", im.shape(), (h, w));
    }
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng::stream(s, "reverse", 0)).collect();
    let mut x: Vec<SignalMask<S>> = rngs
        .iter_mut()
        .map(|r| SignalMask(NoiseField::standard_normal(h, w, r).0))
        .collect();
    let mut priors: Vec<SignalMask<S>> = vec![SignalMask::zeros(h, w); seeds.len()];
    let mut trajectories: Vec<Trajectory<S>> = (0..seeds.len())
        .map(|_| Trajectory {
            noisy: Vec::with_capacity(steps.len()),
            eps_hat: Vec::with_capacity(steps.len()),
            x0_preds: Vec::with_capacity(steps.len()),
            output: SignalMask::zeros(h, w),
        })
        .collect();
    for (k, &t) in steps.steps().iter().enumerate() {
        let t_prev = steps.next_step(k);
        let inputs: Vec<DenoiseInput<'_, S>> = x
            .iter()
            .zip(&priors)
            .zip(images)
            .map(|((x_t, prior), image)| DenoiseInput {
                x_t,
                t,
                image,
                prior,
            })
            .collect();
        let eps = model.predict_batch(&inputs)?;
        ensure!(eps.len() == x.len(), "model returned {} outputs for {} inputs", eps.len(), x.len());
        for (i, e) in eps.into_iter().enumerate() {
            let z = NoiseField::standard_normal(h, w, &mut rngs[i]);
            let x0 = estimate_x0(&x[i], t, &e, sched)?;
            let next = reverse_jump(&x[i], t, t_prev, &e, &z, sched)?;
            let tr = &mut trajectories[i];
            tr.noisy.push(std::mem::replace(&mut x[i], next));
            tr.eps_hat.push(e);
            tr.x0_preds.push(x0.clone());
            priors[i] = x0;
        }
    }
    for (tr, xi) in trajectories.iter_mut().zip(x) {
        tr.output = xi.clamped();
    }
    Ok(PredictionSequenceSet {
        steps: steps.clone(),
        trajectories,
    })
}

/// Reverse process from pure noise with an all-zero initial prior: predict
/// the noise, refresh the prior estimate, then step backwards, for every
/// step of `steps`.
pub fn run_inference<S: Scalar, M: NoiseModel<S> + ?Sized>(
    image: &Image<S>,
    model: &M,
    sched: &NoiseSchedule,
    steps: &StepSubsequence,
    seed: u64,
) -> Result<InferenceOutput<S>> {
    let mut set = rollout(model, image, sched, steps, &[seed])?;
    let tr = set.trajectories.remove(0);
    Ok(InferenceOutput {
        mask: tr.output,
        trace: tr.x0_preds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use crate::grid::Grid;

    struct Zero;

    impl NoiseModel<f64> for Zero {
        fn predict_batch(&self, inputs: &[DenoiseInput<'_, f64>]) -> Result<Vec<NoiseField<f64>>> {
            Ok(inputs
                .iter()
                .map(|i| NoiseField::zeros(i.x_t.height(), i.x_t.width()))
                .collect())
        }
    }

    fn image() -> Image<f64> {
        Image::from_grid(Grid::from_fn(4, 4, |r, c| (r * 4 + c) as f64))
    }

    #[test]
    fn zero_model_run_is_deterministic() {
        let sched = make_schedule(100, "linear").unwrap();
        let steps = StepSubsequence::full(100).unwrap();
        let a = run_inference(&image(), &Zero, &sched, &steps, 11).unwrap();
        let b = run_inference(&image(), &Zero, &sched, &steps, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 100);
        assert!(a.mask.is_clamped());
        let c = run_inference(&image(), &Zero, &sched, &steps, 12).unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn shortened_run_traces_every_visited_step() {
        let sched = make_schedule(100, "linear").unwrap();
        let steps = StepSubsequence::evenly_spaced(100, 12).unwrap();
        let out = run_inference(&image(), &Zero, &sched, &steps, 2).unwrap();
        assert_eq!(out.trace.len(), 12);
        assert!(out.trace.iter().all(|m| m.is_clamped()));
    }

    #[test]
    fn batched_rollout_matches_single_runs() {
        let sched = make_schedule(100, "linear").unwrap();
        let steps = StepSubsequence::evenly_spaced(100, 6).unwrap();
        let set = rollout(&Zero, &image(), &sched, &steps, &[4, 9]).unwrap();
        set.validate().unwrap();
        assert_eq!(set.shape(), (2, 6));
        for (tr, seed) in set.trajectories.iter().zip([4, 9]) {
            let single = run_inference(&image(), &Zero, &sched, &steps, seed).unwrap();
            assert_eq!(tr.output, single.mask);
            assert_eq!(tr.x0_preds, single.trace);
        }
        let tr = &set.trajectories[0];
        assert_eq!(tr.prior_at(0), SignalMask::zeros(4, 4));
        assert_eq!(tr.prior_at(3), tr.x0_preds[2]);
    }

    #[test]
    fn empty_steps_rejected() {
        let sched = make_schedule(10, "linear").unwrap();
        assert!(StepSubsequence::new(vec![], 10).is_err());
        let steps = StepSubsequence::new(vec![11], 11).unwrap();
        assert!(run_inference(&image(), &Zero, &sched, &steps, 0).is_err());
    }
}

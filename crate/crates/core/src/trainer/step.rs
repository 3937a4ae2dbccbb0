use rand::Rng;

use crate::data::TrainSample;
use crate::denoiser::{DenoiseInput, Denoiser, NoiseModel};
use crate::diffusion::{estimate_x0, forward_sample, NoiseSchedule};
use crate::error::{ensure, invalid, Result};
use crate::grid::{ClassMap, Image, NoiseField, SignalMask};
use crate::nn::{AdamW, Graph, ParamGrads, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::supervision::{build_sequences, evaluate_sequences, trajectory_loss, SignalConfig};

/// A noise predictor whose forward pass can be recorded for training.
pub trait TrainableModel<S: Scalar>: NoiseModel<S> {
    fn params(&self) -> &ParamStore<S>;

    fn params_mut(&mut self) -> &mut ParamStore<S>;

    /// `x_t`, `prior`: `[N, 1, H, W]`; `image`: `[N, C, H, W]`; returns `[N, 1, H, W]`.
    fn forward(&self, g: &mut Graph<'_, S>, x_t: Var, steps: &[usize], image: Var, prior: Var) -> Result<Var>;
}

impl<S: Scalar> TrainableModel<S> for Denoiser<S> {
    fn params(&self) -> &ParamStore<S> {
        Denoiser::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        Denoiser::params_mut(self)
    }

    fn forward(&self, g: &mut Graph<'_, S>, x_t: Var, steps: &[usize], image: Var, prior: Var) -> Result<Var> {
        Denoiser::forward(self, g, x_t, steps, image, prior)
    }
}

/// Random quantities of one supervised sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedDraw<S> {
    pub t: usize,
    pub eps: NoiseField<S>,
}

impl<S: Scalar> SupervisedDraw<S> {
    pub fn sample<R: Rng + ?Sized>(steps: usize, h: usize, w: usize, rng: &mut R) -> Self {
        Self {
            t: rng.random_range(1..=steps),
            eps: NoiseField::standard_normal(h, w, rng),
        }
    }
}

/// Recorded tensors of the two coupled passes.
pub struct CoupledPass {
    pub loss: Var,
    pub eps_first: Var,
    pub eps_second: Var,
    pub x_t: Var,
    /// Prior fed to the second pass.
    pub prior: Var,
}

/// Per-pixel weights: `scratch_weight` on scratch pixels, 1 elsewhere.
pub fn pixel_weights<S: Scalar>(classes: &ClassMap, scratch_weight: f64) -> Result<Vec<S>> {
    ensure!(
        classes.as_slice().iter().all(|&v| v <= 2),
        "label values must lie in {{0, 1, 2}}"
    );
    Ok(classes
        .as_slice()
        .iter()
        .map(|&v| S::of(if v > 0 { scratch_weight } else { 1.0 }))
        .collect())
}

fn label_of<S: Scalar>(s: &TrainSample<S>) -> Result<&ClassMap> {
    s.classes.as_ref().ok_or_else(|| invalid!("supervised batch contains an unlabeled sample"))
}

/// Builds the coupled supervised loss
/// `mean_b [ sum w (eps - eps_1)^2 + sum w (eps - eps_2)^2 ]`, where the
/// second pass sees the (detached) clean-mask estimate of the first.
pub fn coupled_passes<S: Scalar, M: TrainableModel<S> + ?Sized>(
    g: &mut Graph<'_, S>,
    model: &M,
    batch: &[TrainSample<S>],
    draws: &[SupervisedDraw<S>],
    sched: &NoiseSchedule,
    scratch_weight: f64,
) -> Result<CoupledPass> {
    ensure!(!batch.is_empty(), "empty supervised batch");
    ensure!(batch.len() == draws.len(), "{} draws for {} samples", draws.len(), batch.len());
    let (h, w) = batch[0].image.shape();
    let mut xs = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len() * h * w);
    for (s, d) in batch.iter().zip(draws) {
        ensure!(s.image.shape() == (h, w), "batch images differ in size");
        let label = label_of(s)?;
        let y = SignalMask::<S>::from_classes(&label.merged());
        xs.push(forward_sample(&y, d.t, &d.eps, sched)?);
        let norm = S::of(1.0 / batch.len() as f64);
        weights.extend(pixel_weights::<S>(label, scratch_weight)?.into_iter().map(|v| (v * norm).sqrt()));
    }
    let steps: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let x_t = g.constant(Tensor::stack_grids(xs.iter().map(|x| &x.0))?);
    let image = g.constant(Tensor::stack_images(batch.iter().map(|s| &s.image))?);
    let eps = Tensor::stack_grids(draws.iter().map(|d| &d.eps.0))?;
    let root_w = Tensor::from_vec(&[batch.len(), 1, h, w], weights)?;
    let zero = g.constant(Tensor::zeros(&[batch.len(), 1, h, w]));
    let eps_first = model.forward(g, x_t, &steps, image, zero)?;
    let mut priors = Vec::with_capacity(batch.len());
    for ((x, grid), &t) in xs.iter().zip(g.value(eps_first).to_grids()).zip(&steps) {
        priors.push(estimate_x0(x, t, &NoiseField(grid), sched)?);
    }
    let prior = g.constant(Tensor::stack_grids(priors.iter().map(|p| &p.0))?);
    let eps_second = model.forward(g, x_t, &steps, image, prior)?;
    let eps = g.constant(eps);
    let mut terms = Vec::with_capacity(2);
    for pred in [eps_first, eps_second] {
        let d = g.sub(eps, pred);
        let d = g.mul_const(d, root_w.clone());
        terms.push(g.sum_squares(d));
    }
    let loss = g.add(terms[0], terms[1]);
    Ok(CoupledPass {
        loss,
        eps_first,
        eps_second,
        x_t,
        prior,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SupervisedOutcome {
    pub loss: f64,
    /// False when every gradient entry was zero and nothing moved.
    pub updated: bool,
}

/// One coupled supervised update with draws taken from `rng`.
pub fn supervised_step<S, M, R>(
    model: &mut M,
    opt: &mut AdamW<S>,
    batch: &[TrainSample<S>],
    sched: &NoiseSchedule,
    scratch_weight: f64,
    rng: &mut R,
) -> Result<SupervisedOutcome>
where
    S: Scalar,
    M: TrainableModel<S> + ?Sized,
    R: Rng + ?Sized,
{
    let draws = draw_batch(batch, sched, rng)?;
    supervised_step_with(model, opt, batch, &draws, sched, scratch_weight)
}

/// One [`SupervisedDraw`] per batch element, in batch order.
pub fn draw_batch<S, R>(batch: &[TrainSample<S>], sched: &NoiseSchedule, rng: &mut R) -> Result<Vec<SupervisedDraw<S>>>
where
    S: Scalar,
    R: Rng + ?Sized,
{
    ensure!(!batch.is_empty(), "empty supervised batch");
    Ok(batch
        .iter()
        .map(|s| {
            let (h, w) = s.image.shape();
            SupervisedDraw::sample(sched.steps(), h, w, rng)
        })
        .collect())
}

pub fn supervised_step_with<S, M>(
    model: &mut M,
    opt: &mut AdamW<S>,
    batch: &[TrainSample<S>],
    draws: &[SupervisedDraw<S>],
    sched: &NoiseSchedule,
    scratch_weight: f64,
) -> Result<SupervisedOutcome>
where
    S: Scalar,
    M: TrainableModel<S> + ?Sized,
{
    let (loss, grads) = supervised_grads(&*model, batch, draws, sched, scratch_weight)?;
    let updated = opt.step(model.params_mut(), &grads);
    Ok(SupervisedOutcome { loss, updated })
}

/// Coupled supervised loss and its gradient, without updating the model.
pub fn supervised_grads<S, M>(
    model: &M,
    batch: &[TrainSample<S>],
    draws: &[SupervisedDraw<S>],
    sched: &NoiseSchedule,
    scratch_weight: f64,
) -> Result<(f64, ParamGrads<S>)>
where
    S: Scalar,
    M: TrainableModel<S> + ?Sized,
{
    let mut g = Graph::new(model.params());
    let pass = coupled_passes(&mut g, model, batch, draws, sched, scratch_weight)?;
    let loss = g.value(pass.loss).as_slice()[0].as_f64();
    ensure!(loss.is_finite(), "supervised loss is not finite ({loss})");
    Ok((loss, g.backward(pass.loss)))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnsupervisedOutcome {
    /// Mean over the batch of the per-image unsupervised loss.
    pub loss: f64,
    /// Consistency feature per image.
    pub lambdas: Vec<f64>,
    /// Fraction of pixels kept by the loss mask, per image.
    pub active: Vec<f64>,
    pub updated: bool,
}

/// Gradient of the unsupervised loss of one image, evaluated one trajectory
/// at a time. The rollout itself is not differentiated; the recorded
/// `(noisy, step, prior)` triples are fed through the network again.
pub fn unsupervised_grads<S, M, R>(
    model: &M,
    image: &Image<S>,
    sched: &NoiseSchedule,
    m: usize,
    n: usize,
    signal: &SignalConfig,
    rng: &mut R,
) -> Result<(f64, f64, f64, Option<ParamGrads<S>>)>
where
    S: Scalar,
    M: TrainableModel<S> + ?Sized,
    R: Rng + ?Sized,
{
    let set = build_sequences(image, model, sched, m, n, rng)?;
    let sig = evaluate_sequences(&set, signal)?;
    let active = sig.loss_mask.count(1) as f64 / sig.loss_mask.as_slice().len() as f64;
    if sig.loss_mask.count(1) == 0 {
        return Ok((0.0, sig.lambda, active, None));
    }
    let mut total = 0.0;
    let mut grads = ParamGrads::empty(model.params().len());
    for (i, tr) in set.trajectories.iter().enumerate() {
        let mut g = Graph::new(model.params());
        let inputs: Vec<SignalMask<S>> = (0..tr.noisy.len()).map(|k| tr.prior_at(k)).collect();
        let queries: Vec<DenoiseInput<'_, S>> = tr
            .noisy
            .iter()
            .zip(set.steps.steps())
            .zip(&inputs)
            .map(|((x_t, &t), prior)| DenoiseInput { x_t, t, image, prior })
            .collect();
        let (x, steps, img, prior) = Denoiser::batch_inputs(&mut g, &queries)?;
        let eps = model.forward(&mut g, x, &steps, img, prior)?;
        let loss = trajectory_loss(&mut g, eps, &set, i, &sig.pseudo_label, &sig.loss_mask, sched)?;
        total += g.value(loss).as_slice()[0].as_f64();
        grads.accumulate(g.backward(loss));
    }
    Ok((total, sig.lambda, active, Some(grads)))
}

/// Builds signals for each unlabeled image, averages the losses and applies
/// one optimizer update.
pub fn unsupervised_step<S, M, R>(
    model: &mut M,
    opt: &mut AdamW<S>,
    images: &[&Image<S>],
    sched: &NoiseSchedule,
    m: usize,
    n: usize,
    signal: &SignalConfig,
    rng: &mut R,
) -> Result<UnsupervisedOutcome>
where
    S: Scalar,
    M: TrainableModel<S> + ?Sized,
    R: Rng + ?Sized,
{
    let (mut out, grads) = unsupervised_batch_grads(&*model, images, sched, m, n, signal, rng)?;
    out.updated = opt.step(model.params_mut(), &grads);
    Ok(out)
}

/// Batch-mean unsupervised loss and gradient, without updating the model.
pub fn unsupervised_batch_grads<S, M, R>(
    model: &M,
    images: &[&Image<S>],
    sched: &NoiseSchedule,
    m: usize,
    n: usize,
    signal: &SignalConfig,
    rng: &mut R,
) -> Result<(UnsupervisedOutcome, ParamGrads<S>)>
where
    S: Scalar,
    M: TrainableModel<S> + ?Sized,
    R: Rng + ?Sized,
{
    ensure!(!images.is_empty(), "empty unsupervised batch");
    let mut out = UnsupervisedOutcome::default();
    let mut grads = ParamGrads::empty(model.params().len());
    for image in images {
        let (loss, lambda, active, g) = unsupervised_grads(model, image, sched, m, n, signal, rng)?;
        out.loss += loss;
        out.lambdas.push(lambda);
        out.active.push(active);
        if let Some(g) = g {
            grads.accumulate(g);
        }
    }
    let inv = 1.0 / images.len() as f64;
    out.loss *= inv;
    ensure!(out.loss.is_finite(), "unsupervised loss is not finite ({})", out.loss);
    grads.scale(S::of(inv));
    Ok((out, grads))
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use texrec::data::{generate_sample, GenConfig, SampleRecord, TrainSample};
use texrec::denoiser::{DenoiseInput, Denoiser, DenoiserConfig, NoiseModel};
use texrec::diffusion::{estimate_x0, forward_sample, make_schedule, NoiseSchedule};
use texrec::error::Result;
use texrec::grid::{ClassMap, Grid, Image, NoiseField, SignalMask};
use texrec::nn::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use texrec::supervision::{build_sequences, evaluate_sequences, trajectory_loss, SignalConfig};
use texrec::trainer::{
    coupled_passes, pixel_weights, supervised_step_with, unsupervised_step, SupervisedDraw, TrainConfig, TrainData,
    TrainableModel, Trainer,
};

/// Noise model without parameters whose output is a fixed function of its inputs.
struct Stub<F> {
    params: ParamStore<f64>,
    f: F,
}

impl<F> Stub<F> {
    fn new(f: F) -> Self {
        Self {
            params: ParamStore::new(),
            f,
        }
    }
}

type StubFn = dyn Fn(&SignalMask<f64>, usize, &Image<f64>) -> NoiseField<f64>;

impl<F: Fn(&SignalMask<f64>, usize, &Image<f64>) -> NoiseField<f64>> NoiseModel<f64> for Stub<F> {
    fn predict_batch(&self, inputs: &[DenoiseInput<'_, f64>]) -> Result<Vec<NoiseField<f64>>> {
        Ok(inputs.iter().map(|i| (self.f)(i.x_t, i.t, i.image)).collect())
    }
}

impl<F: Fn(&SignalMask<f64>, usize, &Image<f64>) -> NoiseField<f64>> TrainableModel<f64> for Stub<F> {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<'_, f64>, x_t: Var, steps: &[usize], image: Var, _prior: Var) -> Result<Var> {
        let xs = g.value(x_t).to_grids();
        let (n, c, h, w) = g.value(image).dims4();
        let img = g.value(image).as_slice().to_vec();
        let mut out = Vec::new();
        for (k, x) in xs.into_iter().enumerate() {
            let plane = img[k * c * h * w..(k + 1) * c * h * w].to_vec();
            let im = Image::from_vec(c, h, w, plane)?;
            out.push((self.f)(&SignalMask(x), steps[k], &im).0);
        }
        assert_eq!(out.len(), n);
        Ok(g.constant(Tensor::stack_grids(out.iter())?))
    }
}

fn labeled(h: usize, w: usize) -> (ClassMap, Image<f64>) {
    let classes = ClassMap::new(
        h,
        w,
        3,
        (0..h * w).map(|i| [0u8, 0, 1, 0, 2, 0][i % 6]).collect(),
    )
    .unwrap();
    // The stubs read the clean signal mask from the image.
    let y = SignalMask::<f64>::from_classes(&classes.merged());
    (classes, Image::from_grid(y.0))
}

fn oracle(sched: NoiseSchedule) -> Stub<Box<StubFn>> {
    Stub::new(Box::new(move |x: &SignalMask<f64>, t: usize, img: &Image<f64>| {
        let ab = sched.alpha_bar(t);
        let y = img.as_slice();
        let v = x
            .as_slice()
            .iter()
            .zip(y)
            .map(|(xv, yv)| (xv - ab.sqrt() * yv) / (1.0 - ab).sqrt())
            .collect();
        NoiseField(Grid::from_vec(x.height(), x.width(), v).unwrap())
    }))
}

fn zero() -> Stub<Box<StubFn>> {
    Stub::new(Box::new(|x: &SignalMask<f64>, _t: usize, _i: &Image<f64>| {
        NoiseField::zeros(x.height(), x.width())
    }))
}

fn draws(n: usize, h: usize, w: usize, seed: u64) -> Vec<SupervisedDraw<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| SupervisedDraw::sample(100, h, w, &mut rng)).collect()
}

#[test]
fn oracle_denoiser_has_zero_supervised_loss() {
    let sched = make_schedule(100, "linear").unwrap();
    let (classes, image) = labeled(8, 8);
    let batch = vec![TrainSample { image, classes: Some(classes) }; 3];
    let mut model = oracle(sched.clone());
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    let out = supervised_step_with(&mut model, &mut opt, &batch, &draws(3, 8, 8, 1), &sched, 5.0).unwrap();
    assert!(out.loss <= 1e-10, "loss {}", out.loss);
    assert!(!out.updated);
}

#[test]
fn zero_denoiser_loss_is_twice_the_noise_energy() {
    let sched = make_schedule(100, "linear").unwrap();
    let (classes, image) = labeled(6, 6);
    let batch = vec![TrainSample { image, classes: Some(classes.clone()) }];
    let d = draws(1, 6, 6, 2);
    let energy: f64 = d[0].eps.as_slice().iter().map(|e| e * e).sum();
    let mut model = zero();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    let unit = supervised_step_with(&mut model, &mut opt, &batch, &d, &sched, 1.0).unwrap();
    assert!((unit.loss - 2.0 * energy).abs() < 1e-9 * energy);
    // Fivefold weight on scratch pixels.
    let weighted: f64 = d[0]
        .eps
        .as_slice()
        .iter()
        .zip(classes.as_slice())
        .map(|(e, &c)| if c > 0 { 5.0 } else { 1.0 } * e * e)
        .sum();
    let five = supervised_step_with(&mut model, &mut opt, &batch, &d, &sched, 5.0).unwrap();
    assert!((five.loss - 2.0 * weighted).abs() < 1e-9 * weighted);
}

#[test]
fn weight_map_marks_scratch_pixels() {
    let (classes, _) = labeled(4, 6);
    let w = pixel_weights::<f64>(&classes, 5.0).unwrap();
    for (wv, &c) in w.iter().zip(classes.as_slice()) {
        assert_eq!(*wv, if c == 0 { 1.0 } else { 5.0 });
    }
    let bad = ClassMap::new(1, 2, 4, vec![0, 3]).unwrap();
    assert!(pixel_weights::<f64>(&bad, 5.0).is_err());
}

#[test]
fn second_pass_prior_is_the_first_pass_estimate() {
    let sched = make_schedule(100, "linear").unwrap();
    let (classes, _) = labeled(8, 8);
    let image = Image::from_grid(Grid::from_fn(8, 8, |r, c| ((r * 3 + c) % 5) as f64 - 2.0));
    let batch = vec![TrainSample { image, classes: Some(classes.clone()) }; 2];
    let model = Denoiser::<f64>::new(DenoiserConfig::tiny(), 4).unwrap().with_schedule(&sched);
    let d = draws(2, 8, 8, 3);
    let mut g = Graph::new(model.params());
    let pass = coupled_passes(&mut g, &model, &batch, &d, &sched, 5.0).unwrap();
    let y = SignalMask::from_classes(&classes.merged());
    let first = g.value(pass.eps_first).to_grids();
    let prior = g.value(pass.prior).to_grids();
    for k in 0..2 {
        let x = forward_sample(&y, d[k].t, &d[k].eps, &sched).unwrap();
        assert_eq!(g.value(pass.x_t).to_grids()[k], x.0);
        let expect = estimate_x0(&x, d[k].t, &NoiseField(first[k].clone()), &sched).unwrap();
        assert_eq!(prior[k], expect.0);
    }
    assert!(g.value(pass.loss).as_slice()[0] > 0.0);
}

#[test]
fn empty_loss_mask_gives_exactly_zero_gradient() {
    let sched = make_schedule(100, "linear").unwrap();
    let model = Denoiser::<f64>::new(DenoiserConfig::tiny(), 5).unwrap().with_schedule(&sched);
    let image = Image::from_grid(Grid::from_fn(8, 8, |r, c| (r as f64 - c as f64) / 8.0));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let set = build_sequences(&image, &model, &sched, 4, 2, &mut rng).unwrap();
    let label = ClassMap::zeros(8, 8, 2);
    let mask = ClassMap::zeros(8, 8, 2);
    let tr = &set.trajectories[0];
    let priors: Vec<SignalMask<f64>> = (0..4).map(|k| tr.prior_at(k)).collect();
    let queries: Vec<DenoiseInput<'_, f64>> = tr
        .noisy
        .iter()
        .zip(set.steps.steps())
        .zip(&priors)
        .map(|((x_t, &t), prior)| DenoiseInput { x_t, t, image: &image, prior })
        .collect();
    let mut g = Graph::new(model.params());
    let (x, steps, img, prior) = Denoiser::batch_inputs(&mut g, &queries).unwrap();
    let eps = model.forward(&mut g, x, &steps, img, prior).unwrap();
    let loss = trajectory_loss(&mut g, eps, &set, 0, &label, &mask, &sched).unwrap();
    assert_eq!(g.value(loss).as_slice()[0], 0.0);
    let grads = g.backward(loss);
    assert!(grads.is_all_zero());
    drop(g);
    let mut params = model.params().clone();
    let before = params.clone();
    let mut opt = AdamW::new(AdamWConfig::default(), &params);
    assert!(!opt.step(&mut params, &grads));
    for (a, b) in params.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn single_step_unsupervised_loss_by_hand() {
    let sched = make_schedule(100, "linear").unwrap();
    let c = -100.0;
    let mut model = Stub::new(move |x: &SignalMask<f64>, _t: usize, _i: &Image<f64>| {
        NoiseField(Grid::filled(x.height(), x.width(), c))
    });
    let image = Image::from_grid(Grid::filled(4, 4, 0.0));
    let signal = SignalConfig {
        tau_f: 1,
        ..SignalConfig::default()
    };
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    let out = unsupervised_step(&mut model, &mut opt, &[&image], &sched, 1, 1, &signal, &mut ChaCha8Rng::seed_from_u64(8))
        .unwrap();
    // Replay the same draws.
    let set = build_sequences(&image, &model, &sched, 1, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let t = set.steps.steps()[0];
    let ab = sched.alpha_bar(t);
    // The estimate saturates at +1, so the pseudo-label and the gate are 1 everywhere.
    let sig = evaluate_sequences(&set, &signal).unwrap();
    assert_eq!(sig.loss_mask.count(1), 16);
    assert_eq!(sig.lambda, 0.0);
    let hand: f64 = set.trajectories[0].noisy[0]
        .as_slice()
        .iter()
        .map(|x| ((x - ab.sqrt()) / (1.0 - ab).sqrt() - c).powi(2))
        .sum();
    assert!((out.loss - hand).abs() <= 1e-9 * hand, "{} vs {hand}", out.loss);
    assert_eq!(out.lambdas, vec![0.0]);
}

fn tiny_data() -> TrainData {
    let gen = GenConfig::small();
    let s: Vec<SampleRecord> = (0..6).map(|i| generate_sample(&gen, i).unwrap()).collect();
    TrainData {
        labeled: s[..2].to_vec(),
        unlabeled: s[2..4].to_vec(),
        val: s[4..].to_vec(),
    }
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        denoiser: DenoiserConfig::tiny(),
        m: 3,
        labeled_batch: 2,
        unlabeled_batch: 1,
        eval_steps: Some(3),
        seed: 17,
        ..TrainConfig::default()
    };
    cfg.signal.tau_f = 2;
    cfg
}

#[test]
fn fixed_seed_reproduces_losses() {
    let data = tiny_data();
    let run = || {
        let mut tr = Trainer::<f32>::new(tiny_config(), None).unwrap();
        (0..2).map(|_| tr.iteration(&data).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.loss_l.to_bits(), y.loss_l.to_bits());
        assert_eq!(x.loss_u.map(f64::to_bits), y.loss_u.map(f64::to_bits));
        assert!(x.loss_u.is_some());
    }
}

#[test]
fn one_optimizer_update_per_iteration() {
    let data = tiny_data();
    let mut tr = Trainer::<f32>::new(tiny_config(), None).unwrap();
    for k in 1..=3 {
        let row = tr.iteration(&data).unwrap();
        assert!(row.loss_u.is_some());
        assert_eq!(tr.optimizer.steps_taken(), k);
    }
}

#[test]
fn empty_labeled_set_is_rejected() {
    let mut tr = Trainer::<f32>::new(tiny_config(), None).unwrap();
    let data = TrainData {
        labeled: vec![],
        ..tiny_data()
    };
    assert!(tr.train(&data).is_err());
}

#[test]
fn supervised_only_skips_unlabeled_steps() {
    let cfg = TrainConfig {
        supervised_only: true,
        max_steps: Some(2),
        ..tiny_config()
    };
    let mut tr = Trainer::<f32>::new(cfg, None).unwrap();
    let summary = tr.train(&tiny_data()).unwrap();
    assert_eq!(summary.steps, 2);
    assert!(tr.log().rows().iter().all(|r| r.loss_u.is_none()));
}

#[test]
fn resume_continues_without_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let data = TrainData {
        labeled: tiny_data().labeled.into_iter().chain(tiny_data().val).collect(),
        ..tiny_data()
    };
    let cfg = TrainConfig {
        labeled_batch: 1,
        epochs: 2,
        checkpoint_every_steps: Some(3),
        supervised_only: true,
        ..tiny_config()
    };
    // Uninterrupted reference run.
    let mut full = Trainer::<f32>::new(cfg.clone(), None).unwrap();
    full.train(&data).unwrap();
    // Interrupted mid-epoch after 5 steps.
    let interrupted = TrainConfig {
        max_steps: Some(5),
        ..cfg.clone()
    };
    let mut first = Trainer::<f32>::new(interrupted, Some(dir.path())).unwrap();
    first.train(&data).unwrap();
    let mut resumed = Trainer::<f32>::resume(dir.path()).unwrap();
    assert_eq!(resumed.state.step, 5);
    resumed.config.max_steps = None;
    resumed.train(&data).unwrap();
    let steps: Vec<u64> = resumed.log().rows().iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=8).collect::<Vec<_>>());
    for (a, b) in resumed.log().rows().iter().zip(full.log().rows()) {
        assert_eq!(a.loss_l.to_bits(), b.loss_l.to_bits());
    }
    let on_disk = texrec::trainer::read_rows(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(on_disk.len(), 8);
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;

use crate::denoiser::config::{DenoiserConfig, Fusion};
use crate::denoiser::{check_inputs, time_embed, DenoiseInput, NoiseModel};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Result};
use crate::grid::NoiseField;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    groups: usize,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Option<Dense>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct Level {
    block: ResBlock,
    attn: Option<AttnBlock>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    time1: Dense,
    time2: Dense,
    image_in: (Conv, Conv),
    prior_in: (Conv, Conv),
    prior_affine: Option<(ParamId, ParamId)>,
    concat_fuse: Option<Conv>,
    pre_encoder: Vec<ResBlock>,
    x_in: (Conv, Conv),
    down: Vec<Level>,
    downsample: Vec<Conv>,
    mid: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv>,
    out_norm: Norm,
    out_conv: Conv,
}

/// Conditional encoder-decoder noise predictor.
///
/// The condition path (image and prior features, their fusion and the
/// residual pre-encoder) never sees the step index; the main path embeds
/// `x_t` and feeds the time embedding into every residual block of the
/// encoder-decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<S> {
    config: DenoiserConfig,
    params: ParamStore<S>,
    layout: Layout,
    training: bool,
    alpha_bars: Option<Vec<f64>>,
}

struct Builder<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: ChaCha8Rng,
    groups: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl<S: Scalar> Builder<'_, S> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..n).map(|_| S::of(self.rng.sample(dist))).collect();
        self.store.add(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        self.conv_scaled(name, cin, cout, k, 1.0)
    }

    fn conv_scaled(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let bound = gain / ((cin * k * k) as f64).sqrt();
        Conv {
            w: self.uniform(format!("{name}.weight"), &[cout, cin, k, k], bound),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            pad: k / 2,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        let bound = 1.0 / (din as f64).sqrt();
        Dense {
            w: self.uniform(format!("{name}.weight"), &[dout, din], bound),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            groups: gcd(self.groups, channels),
            gamma: self.store.add(format!("{name}.gamma"), Tensor::filled(&[channels], S::one())),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, time_dim: Option<usize>) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            time: time_dim.map(|d| self.dense(&format!("{name}.time"), d, cout)),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.conv(&format!("{name}.q"), c, c, 1),
            k: self.conv(&format!("{name}.k"), c, c, 1),
            v: self.conv(&format!("{name}.v"), c, c, 1),
            proj: self.conv(&format!("{name}.proj"), c, c, 1),
        }
    }
}

impl<S: Scalar> Denoiser<S> {
    /// Builds a freshly initialized network; the same seed yields identical
    /// parameters.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            groups: config.norm_groups,
        };
        let base = config.base_channels;
        let tdim = config.time_dim();
        let time1 = b.dense("time.fc1", base, tdim);
        let time2 = b.dense("time.fc2", tdim, tdim);
        let image_in = (
            b.conv("cond.image.conv1", config.image_channels, base, 3),
            b.conv("cond.image.conv2", base, base, 3),
        );
        let prior_in = (
            b.conv("cond.prior.conv1", 1, base, 3),
            b.conv("cond.prior.conv2", base, base, 3),
        );
        let prior_affine = config.prior_affine.then(|| {
            (
                b.store.add("cond.prior.norm.gamma", Tensor::filled(&[base], S::one())),
                b.store.add("cond.prior.norm.beta", Tensor::filled(&[base], S::one())),
            )
        });
        let concat_fuse =
            (config.fusion == Fusion::Concat).then(|| b.conv("cond.fuse", 2 * base, base, 3));
        let pre_encoder = (0..config.pre_encoder_blocks)
            .map(|i| b.res_block(&format!("cond.pre.{i}"), base, base, None))
            .collect();
        let x_in = (b.conv("main.in.conv1", 1, base, 3), b.conv("main.in.conv2", base, base, 3));

        let attn_scales = config.attention_scales();
        let depth = config.depth;
        let mut down = Vec::with_capacity(depth);
        let mut downsample = Vec::with_capacity(depth - 1);
        let mut ch = base;
        for l in 0..depth {
            let out = config.channels_at(l);
            down.push(Level {
                block: b.res_block(&format!("down.{l}"), ch, out, Some(tdim)),
                attn: attn_scales.contains(&l).then(|| b.attn(&format!("down.{l}.attn"), out)),
            });
            ch = out;
            if l + 1 < depth {
                downsample.push(b.conv(&format!("down.{l}.sample"), ch, ch, 3));
            }
        }
        let mid = b.res_block("mid", ch, ch, Some(tdim));
        let mut up = Vec::with_capacity(depth);
        let mut upsample = Vec::with_capacity(depth - 1);
        for l in (0..depth).rev() {
            let skip = config.channels_at(l);
            up.push(Level {
                block: b.res_block(&format!("up.{l}"), ch + skip, skip, Some(tdim)),
                attn: attn_scales.contains(&l).then(|| b.attn(&format!("up.{l}.attn"), skip)),
            });
            ch = skip;
            if l > 0 {
                upsample.push(b.conv(&format!("up.{l}.sample"), ch, ch, 3));
            }
        }
        let out_norm = b.norm("out.norm", ch);
        let out_conv = b.conv_scaled("out.conv", ch, 1, 3, 0.1);
        let layout = Layout {
            time1,
            time2,
            image_in,
            prior_in,
            prior_affine,
            concat_fuse,
            pre_encoder,
            x_in,
            down,
            downsample,
            mid,
            up,
            upsample,
            out_norm,
            out_conv,
        };
        Ok(Self {
            config,
            params,
            layout,
            training: false,
            alpha_bars: None,
        })
    }

    /// Attaches the cumulative products the velocity output head needs.
    pub fn with_schedule(mut self, sched: &NoiseSchedule) -> Self {
        self.alpha_bars = Some(sched.alpha_bars().to_vec());
        self
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Marks the network as training or evaluating. The architecture has no
    /// stochastic layers, so both modes compute the same function.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn conv(&self, g: &mut Graph<'_, S>, c: &Conv, x: Var, stride: usize) -> Var {
        let w = g.param(c.w);
        let b = g.param(c.b);
        g.conv2d(x, w, Some(b), stride, c.pad)
    }

    fn dense(&self, g: &mut Graph<'_, S>, d: &Dense, x: Var) -> Var {
        let w = g.param(d.w);
        let b = g.param(d.b);
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph<'_, S>, n: &Norm, x: Var) -> Var {
        let h = g.group_norm(x, n.groups);
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.channel_affine(h, gamma, beta)
    }

    fn res_block(&self, g: &mut Graph<'_, S>, blk: &ResBlock, x: Var, temb: Option<Var>) -> Var {
        let h = self.norm(g, &blk.norm1, x);
        let h = g.silu(h);
        let mut h = self.conv(g, &blk.conv1, h, 1);
        if let (Some(d), Some(temb)) = (&blk.time, temb) {
            let offset = self.dense(g, d, temb);
            h = g.add_channel(h, offset);
        }
        let h = self.norm(g, &blk.norm2, h);
        let h = g.silu(h);
        let h = self.conv(g, &blk.conv2, h, 1);
        let skip = match &blk.skip {
            Some(c) => self.conv(g, c, x, 1),
            None => x,
        };
        g.add(h, skip)
    }

    fn attn(&self, g: &mut Graph<'_, S>, a: &AttnBlock, x: Var) -> Var {
        let h = self.norm(g, &a.norm, x);
        let q = self.conv(g, &a.q, h, 1);
        let k = self.conv(g, &a.k, h, 1);
        let v = self.conv(g, &a.v, h, 1);
        let o = g.attention(q, k, v);
        let o = self.conv(g, &a.proj, o, 1);
        g.add(x, o)
    }

    fn level(&self, g: &mut Graph<'_, S>, lv: &Level, x: Var, temb: Var) -> Var {
        let h = self.res_block(g, &lv.block, x, Some(temb));
        match &lv.attn {
            Some(a) => self.attn(g, a, h),
            None => h,
        }
    }

    fn stem(&self, g: &mut Graph<'_, S>, convs: &(Conv, Conv), x: Var) -> Var {
        let h = self.conv(g, &convs.0, x, 1);
        let h = g.silu(h);
        self.conv(g, &convs.1, h, 1)
    }

    /// Time-insensitive condition features for `image: [N, C, H, W]` and
    /// `prior: [N, 1, H, W]`.
    pub fn condition_features(&self, g: &mut Graph<'_, S>, image: Var, prior: Var) -> Result<Var> {
        let (n, c, h, w) = g.value(image).dims4();
        ensure!(c == self.config.image_channels, "image has {c} channels, network expects {}", self.config.image_channels);
        ensure!(g.value(prior).dims4() == (n, 1, h, w), "prior shape {:?} does not match image {:?}", g.shape(prior), g.shape(image));
        let l = &self.layout;
        let img = self.stem(g, &l.image_in, image);
        let pri = self.stem(g, &l.prior_in, prior);
        let mut fused = match &l.concat_fuse {
            Some(conv) => {
                let cat = g.concat(img, pri);
                self.conv(g, conv, cat, 1)
            }
            None => {
                let base = self.config.base_channels;
                let mut p = g.group_norm(pri, base);
                if let Some((gamma, beta)) = l.prior_affine {
                    let gv = g.param(gamma);
                    let bv = g.param(beta);
                    p = g.channel_affine(p, gv, bv);
                }
                g.mul(img, p)
            }
        };
        for blk in &l.pre_encoder {
            fused = self.res_block(g, blk, fused, None);
        }
        Ok(fused)
    }

    /// Full forward pass producing `[N, 1, H, W]` noise estimates.
    pub fn forward(
        &self,
        g: &mut Graph<'_, S>,
        x_t: Var,
        steps: &[usize],
        image: Var,
        prior: Var,
    ) -> Result<Var> {
        let (n, one, h, w) = g.value(x_t).dims4();
        ensure!(one == 1, "x_t must have a single channel");
        ensure!(steps.len() == n, "{} step indices for a batch of {n}", steps.len());
        self.config.check_input_shape(h, w)?;
        let l = &self.layout;
        let base = self.config.base_channels;
        let mut basis = Vec::with_capacity(n * base);
        for &t in steps {
            basis.extend(time_embed(t, base)?.into_iter().map(S::of));
        }
        let basis = g.constant(Tensor::from_vec(&[n, base], basis)?);
        let temb = self.dense(g, &l.time1, basis);
        let temb = g.silu(temb);
        let temb = self.dense(g, &l.time2, temb);
        let temb = g.silu(temb);

        let cond = self.condition_features(g, image, prior)?;
        let main = self.stem(g, &l.x_in, x_t);
        let mut hcur = g.add(main, cond);

        let mut skips = Vec::with_capacity(self.config.depth);
        for (i, lv) in l.down.iter().enumerate() {
            hcur = self.level(g, lv, hcur, temb);
            skips.push(hcur);
            if let Some(ds) = l.downsample.get(i) {
                hcur = self.conv(g, ds, hcur, 2);
            }
        }
        hcur = self.res_block(g, &l.mid, hcur, Some(temb));
        for (i, lv) in l.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat(hcur, skip);
            hcur = self.level(g, lv, cat, temb);
            if let Some(us) = l.upsample.get(i) {
                let u = g.upsample2x(hcur);
                hcur = self.conv(g, us, u, 1);
            }
        }
        let o = self.norm(g, &l.out_norm, hcur);
        let o = g.silu(o);
        let f = self.conv(g, &l.out_conv, o, 1);
        if !self.config.velocity_output {
            return Ok(f);
        }
        let abars = self
            .alpha_bars
            .as_ref()
            .ok_or_else(|| crate::error::invalid!("velocity output head needs a schedule (Denoiser::with_schedule)"))?;
        let plane = h * w;
        let (mut cx, mut cf) = (Vec::with_capacity(n * plane), Vec::with_capacity(n * plane));
        for &t in steps {
            ensure!(t >= 1 && t <= abars.len(), "step {t} outside 1..={}", abars.len());
            let abar = abars[t - 1];
            cx.extend(std::iter::repeat_n(S::of((1.0 - abar).sqrt()), plane));
            cf.extend(std::iter::repeat_n(S::of(abar.sqrt()), plane));
        }
        let skip = g.mul_const(x_t, Tensor::from_vec(&[n, 1, h, w], cx)?);
        let f = g.mul_const(f, Tensor::from_vec(&[n, 1, h, w], cf)?);
        Ok(g.add(skip, f))
    }

    /// Stacks a batch of queries into graph inputs `(x_t, steps, image, prior)`.
    pub fn batch_inputs(
        g: &mut Graph<'_, S>,
        inputs: &[DenoiseInput<'_, S>],
    ) -> Result<(Var, Vec<usize>, Var, Var)> {
        check_inputs(inputs)?;
        let x = Tensor::stack_grids(inputs.iter().map(|i| &i.x_t.0))?;
        let p = Tensor::stack_grids(inputs.iter().map(|i| &i.prior.0))?;
        let img = Tensor::stack_images(inputs.iter().map(|i| i.image))?;
        let steps = inputs.iter().map(|i| i.t).collect();
        Ok((g.constant(x), steps, g.constant(img), g.constant(p)))
    }
}

impl<S: Scalar> NoiseModel<S> for Denoiser<S> {
    fn predict_batch(&self, inputs: &[DenoiseInput<'_, S>]) -> Result<Vec<NoiseField<S>>> {
        let mut g = Graph::inference(&self.params);
        let (x, steps, img, prior) = Self::batch_inputs(&mut g, inputs)?;
        let out = self.forward(&mut g, x, &steps, img, prior)?;
        Ok(g.value(out).to_grids().into_iter().map(NoiseField).collect())
    }
}

/// Builds a network from a validated config and a seed.
pub fn build_denoiser<S: Scalar>(config: DenoiserConfig, seed: u64) -> Result<Denoiser<S>> {
    Denoiser::new(config, seed)
}

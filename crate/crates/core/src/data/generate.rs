use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::config::{CountRange, GenConfig, Range};
use crate::error::{ensure, Result};
use crate::grid::{ClassMap, Image};
use crate::rng;
use crate::scalar::Scalar;

pub const BACKGROUND: u8 = 0;
pub const SHALLOW: u8 = 1;
pub const DEEP: u8 = 2;

/// 8-bit raster stored channel-major (`C x H x W`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            data.len() == channels * height * width,
            "raster has {} bytes, expected {channels}x{height}x{width}",
            data.len()
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Grey levels as reals, without normalization.
    pub fn to_image<S: Scalar>(&self) -> Image<S> {
        Image::from_vec(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| S::of(f64::from(v))).collect(),
        )
        .expect("raster dimensions are consistent")
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        let img = self.to_image::<f64>().crop(row, col, h, w)?;
        Ok(Self {
            channels: self.channels,
            height: h,
            width: w,
            data: img.as_slice().iter().map(|&v| v as u8).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScratchMeta {
    pub class: u8,
    pub contrast: f64,
    pub width: f64,
    pub bright: bool,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub scratches: Vec<ScratchMeta>,
}

/// Image plus its three-class ground truth (`None` for unlabeled data).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Raster,
    pub classes: Option<ClassMap>,
    pub meta: Option<SampleMeta>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: Range) -> f64 {
    if r.max > r.min {
        rng.random_range(r.min..=r.max)
    } else {
        r.min
    }
}

fn count<R: Rng + ?Sized>(rng: &mut R, c: CountRange) -> usize {
    rng.random_range(c.min..=c.max)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Smooth illumination plus speckle, in grey levels (single plane).
pub fn render_background(cfg: &GenConfig, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "background", 0);
    let (h, w) = (cfg.height, cfg.width);
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = r.random_range(0.5..1.5);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let u = 2.0 * col as f64 / w.max(2) as f64 - 1.0;
            let v = 2.0 * row as f64 / h.max(2) as f64 - 1.0;
            let along = ca * u + sa * v;
            let shade = 0.6 * along + 0.4 * (std::f64::consts::PI * freq * (sa * u - ca * v) + phase).sin();
            let speckle: f64 = r.sample(StandardNormal);
            out.push(cfg.background_level + cfg.gradient_amplitude * shade + cfg.speckle_sigma * speckle);
        }
    }
    out
}

fn draw_scratch<R: Rng + ?Sized>(cfg: &GenConfig, class: u8, r: &mut R) -> ScratchMeta {
    let (contrast, width) = if class == DEEP {
        (uniform(r, cfg.deep_contrast), uniform(r, cfg.deep_width))
    } else {
        (uniform(r, cfg.shallow_contrast), uniform(r, cfg.shallow_width))
    };
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let diag = (h * h + w * w).sqrt();
    let length = uniform(r, cfg.length) * diag;
    let segments = count(r, cfg.segments);
    let mut heading: f64 = r.random_range(0.0..std::f64::consts::TAU);
    // Start away from the far edge the scratch heads to, so most of it is visible.
    let mut p = (r.random_range(0.0..w), r.random_range(0.0..h));
    p.0 -= heading.cos() * length * 0.5;
    p.1 -= heading.sin() * length * 0.5;
    p.0 = p.0.clamp(0.0, w - 1.0);
    p.1 = p.1.clamp(0.0, h - 1.0);
    let mut points = vec![p];
    let step = length / segments as f64;
    for _ in 0..segments {
        if cfg.max_turn > 0.0 {
            heading += r.random_range(-cfg.max_turn..=cfg.max_turn);
        }
        p = (p.0 + step * heading.cos(), p.1 + step * heading.sin());
        points.push(p);
    }
    ScratchMeta {
        class,
        contrast,
        width,
        bright: r.random_bool(cfg.bright_probability),
        points,
    }
}

/// Adds one scratch to the intensity offsets and the class map. Pixels
/// within half the width of the polyline take the full contrast and the
/// class label; the contrast falls off linearly over one more pixel.
fn stamp(s: &ScratchMeta, height: usize, width: usize, delta: &mut [f64], classes: &mut [u8]) {
    let half = s.width / 2.0;
    let reach = half + 1.0;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &s.points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64 - 1.0) as usize;
    let (c0, c1) = (clip((x0 - reach).floor(), width), clip((x1 + reach).ceil(), width));
    let (r0, r1) = (clip((y0 - reach).floor(), height), clip((y1 + reach).ceil(), height));
    if x1 + reach < 0.0 || y1 + reach < 0.0 || x0 - reach > width as f64 || y0 - reach > height as f64 {
        return;
    }
    let sign = if s.bright { 1.0 } else { -1.0 };
    for row in r0..=r1 {
        for col in c0..=c1 {
            let p = (col as f64, row as f64);
            let d = s
                .points
                .windows(2)
                .map(|seg| segment_distance(p, seg[0], seg[1]))
                .fold(f64::MAX, f64::min);
            let cover = if d <= half { 1.0 } else { (1.0 - (d - half)).max(0.0) };
            if cover > 0.0 {
                let idx = row * width + col;
                delta[idx] += sign * s.contrast * cover;
                if d <= half {
                    classes[idx] = classes[idx].max(s.class);
                }
            }
        }
    }
}

/// Renders one labeled sample; `(cfg, seed)` fully determine the bytes.
pub fn generate_sample(cfg: &GenConfig, seed: u64) -> Result<SampleRecord> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let background = render_background(cfg, seed);
    let mut r = rng::stream(seed, "scratches", 0);
    let mut scratches = Vec::new();
    for _ in 0..count(&mut r, cfg.deep_count) {
        scratches.push(draw_scratch(cfg, DEEP, &mut r));
    }
    for _ in 0..count(&mut r, cfg.shallow_count) {
        scratches.push(draw_scratch(cfg, SHALLOW, &mut r));
    }
    let mut delta = vec![0.0; h * w];
    let mut classes = vec![BACKGROUND; h * w];
    for s in &scratches {
        stamp(s, h, w, &mut delta, &mut classes);
    }
    let plane: Vec<u8> = background
        .iter()
        .zip(&delta)
        .map(|(b, d)| (b + d).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut data = Vec::with_capacity(cfg.channels * h * w);
    for _ in 0..cfg.channels {
        data.extend_from_slice(&plane);
    }
    Ok(SampleRecord {
        image: Raster::new(cfg.channels, h, w, data)?,
        classes: Some(ClassMap::new(h, w, 3, classes)?),
        meta: Some(SampleMeta { seed, scratches }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = GenConfig::small();
        let a = generate_sample(&cfg, 17).unwrap();
        let b = generate_sample(&cfg, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&cfg, 18).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn contradictory_contrasts_rejected() {
        let cfg = GenConfig {
            shallow_contrast: Range::new(5.0, 15.0),
            ..GenConfig::small()
        };
        assert!(generate_sample(&cfg, 1).is_err());
    }

    #[test]
    fn foreground_is_scarce_and_contrast_matches_config() {
        let cfg = GenConfig::default();
        let (mut shallow, mut deep, mut total) = (0usize, 0usize, 0usize);
        let (mut sum, mut n) = (0.0, 0usize);
        let (mut deep_sum, mut deep_n) = (0.0, 0usize);
        for seed in 0..100 {
            let s = generate_sample(&cfg, seed).unwrap();
            let classes = s.classes.as_ref().unwrap();
            shallow += classes.count(SHALLOW);
            deep += classes.count(DEEP);
            total += classes.as_slice().len();
            let bg = render_background(&cfg, seed);
            for ((&c, &v), b) in classes.as_slice().iter().zip(&s.image.data).zip(&bg) {
                let diff = (f64::from(v) - b.round().clamp(0.0, 255.0)).abs();
                match c {
                    SHALLOW => {
                        sum += diff;
                        n += 1;
                    }
                    DEEP => {
                        deep_sum += diff;
                        deep_n += 1;
                    }
                    _ => {}
                }
            }
        }
        let (fs, fd) = (shallow as f64 / total as f64, deep as f64 / total as f64);
        assert!(fs < 0.05 && fd < 0.05, "shallow {fs}, deep {fd}");
        assert!(fs > 0.0 && fd > 0.0);
        let mean = sum / n as f64;
        assert!((2.0..=6.0).contains(&mean), "shallow contrast {mean}");
        assert!(deep_sum / deep_n as f64 > 6.0);
    }
}

use std::f64::consts::PI;

use rand::Rng;

use crate::data::generate::SampleRecord;
use crate::grid::{ClassMap, Image};
use crate::scalar::Scalar;

/// Geometric part of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip_h: false,
        flip_v: false,
        scale: 1.0,
        angle: 0.0,
    };

    /// Flips with probability 1/2 per axis, scale in `[0.8, 1.2]`, any angle.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            scale: rng.random_range(0.8..=1.2),
            angle: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Source coordinates (row, col) feeding output pixel `(r, c)`.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        let (s, co) = self.angle.sin_cos();
        // Inverse rotation, then inverse scale, then the (self-inverse) flips.
        let mut sx = (co * dx - s * dy) / self.scale;
        let mut sy = (s * dx + co * dy) / self.scale;
        if self.flip_h {
            sx = -sx;
        }
        if self.flip_v {
            sy = -sy;
        }
        (snap(sy + cy), snap(sx + cx))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear resampling with replicated edges; output keeps the input size.
pub fn warp_image<S: Scalar>(img: &Image<S>, p: &AugmentParams) -> Image<S> {
    let (h, w) = img.shape();
    let mut data = Vec::with_capacity(img.as_slice().len());
    for ch in 0..img.channels() {
        for r in 0..h {
            for c in 0..w {
                let (y, x) = p.source(r, c, h, w);
                let y = y.clamp(0.0, (h - 1) as f64);
                let x = x.clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let at = |rr, cc| img.get(ch, rr, cc).as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(S::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Image::from_vec(img.channels(), h, w, data).expect("same dimensions")
}

/// Nearest-neighbour resampling; pixels mapped from outside become background.
pub fn warp_classes(map: &ClassMap, p: &AugmentParams) -> ClassMap {
    let (h, w) = map.shape();
    let mut out = ClassMap::zeros(h, w, map.classes());
    for r in 0..h {
        for c in 0..w {
            let (y, x) = p.source(r, c, h, w);
            let (y, x) = (y.round(), x.round());
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                out.set(r, c, map.get(y as usize, x as usize));
            }
        }
    }
    out
}

/// A sample ready for the network: real-valued image plus optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<S> {
    pub image: Image<S>,
    pub classes: Option<ClassMap>,
}

impl<S: Scalar> TrainSample<S> {
    /// Standardized image without geometric changes.
    pub fn plain(sample: &SampleRecord) -> Self {
        Self {
            image: sample.image.to_image::<S>().standardized(),
            classes: sample.classes.clone(),
        }
    }
}

pub fn apply_augment<S: Scalar>(sample: &SampleRecord, p: &AugmentParams) -> TrainSample<S> {
    TrainSample {
        image: warp_image(&sample.image.to_image::<S>(), p).standardized(),
        classes: sample.classes.as_ref().map(|m| warp_classes(m, p)),
    }
}

/// Random flip, scale and rotation followed by intensity standardization.
pub fn augment<S: Scalar, R: Rng + ?Sized>(sample: &SampleRecord, rng: &mut R) -> TrainSample<S> {
    apply_augment(sample, &AugmentParams::sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, GenConfig};
    use rand::SeedableRng;

    fn sample() -> SampleRecord {
        let cfg = GenConfig {
            seed: 5,
            ..GenConfig::small()
        };
        generate_sample(&cfg, 11).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let img = s.image.to_image::<f64>();
        let cls = s.classes.clone().unwrap();
        for p in [
            AugmentParams { flip_h: true, ..AugmentParams::IDENTITY },
            AugmentParams { flip_v: true, ..AugmentParams::IDENTITY },
        ] {
            assert_eq!(warp_image(&warp_image(&img, &p), &p), img);
            assert_eq!(warp_classes(&warp_classes(&cls, &p), &p), cls);
        }
    }

    #[test]
    fn quarter_turn_preserves_class_counts() {
        let s = sample();
        let cls = s.classes.unwrap();
        let p = AugmentParams { angle: PI / 2.0, ..AugmentParams::IDENTITY };
        let rot = warp_classes(&cls, &p);
        for k in 0..3 {
            assert_eq!(rot.count(k), cls.count(k));
        }
        // Four quarter turns come back to the start.
        let mut m = cls.clone();
        for _ in 0..4 {
            m = warp_classes(&m, &p);
        }
        assert_eq!(m, cls);
    }

    #[test]
    fn upscaling_keeps_labels_discrete() {
        let s = sample();
        let cls = s.classes.clone().unwrap();
        let p = AugmentParams { scale: 1.2, angle: 0.3, ..AugmentParams::IDENTITY };
        let out = warp_classes(&cls, &p);
        assert!(out.as_slice().iter().all(|&v| v <= 2));
        let before: std::collections::BTreeSet<u8> = cls.as_slice().iter().copied().collect();
        let after: std::collections::BTreeSet<u8> = out.as_slice().iter().copied().collect();
        assert!(after.is_subset(&before));
    }

    #[test]
    fn augmented_image_is_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t: TrainSample<f64> = augment(&sample(), &mut rng);
        let v = t.image.as_slice();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
        assert_eq!(t.image.shape(), (64, 64));
    }
}

//! Dense 2-D rasters: real grids, signal-space masks, noise fields, images
//! and integer class maps.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Row-major `height x width` grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<S> {
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> Grid<S> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, S::zero())
    }

    pub fn filled(height: usize, width: usize, value: S) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "grid data has {} values, expected {}x{}",
            data.len(),
            height,
            width
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> S {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: S) {
        self.data[row * self.width + col] = value;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        ensure_same_shape(self.shape(), other.shape())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum_squares(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Copies the `h x w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            row + h <= self.height && col + w <= self.width,
            "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
            self.height,
            self.width
        );
        Ok(Self::from_fn(h, w, |r, c| self.get(row + r, col + c)))
    }

    pub fn cast<T: Scalar>(&self) -> Grid<T> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    ensure!(
        a == b,
        "shape mismatch: {}x{} vs {}x{}",
        a.0,
        a.1,
        b.0,
        b.1
    );
    Ok(())
}

macro_rules! grid_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<S>(pub Grid<S>);

        impl<S> Deref for $name<S> {
            type Target = Grid<S>;
            fn deref(&self) -> &Grid<S> {
                &self.0
            }
        }

        impl<S> DerefMut for $name<S> {
            fn deref_mut(&mut self) -> &mut Grid<S> {
                &mut self.0
            }
        }

        impl<S> From<Grid<S>> for $name<S> {
            fn from(g: Grid<S>) -> Self {
                Self(g)
            }
        }

        impl<S: Scalar> $name<S> {
            pub fn zeros(height: usize, width: usize) -> Self {
                Self(Grid::zeros(height, width))
            }

            pub fn into_grid(self) -> Grid<S> {
                self.0
            }
        }
    };
}

grid_newtype!(
    /// Mask in signal space: -1 is background, +1 is scratch.
    ///
    /// Noisy diffusion states share this type and may leave `[-1, 1]`;
    /// clean estimates and final outputs are clamped.
    SignalMask
);

grid_newtype!(
    /// Field of i.i.d. standard-normal draws (or a network's estimate of one).
    NoiseField
);

impl<S: Scalar> SignalMask<S> {
    /// Maps class labels to signal space via `2y - 1`, where every non-zero
    /// class counts as scratch.
    pub fn from_classes(classes: &ClassMap) -> Self {
        Self(Grid::from_fn(classes.height(), classes.width(), |r, c| {
            if classes.get(r, c) > 0 {
                S::one()
            } else {
                -S::one()
            }
        }))
    }

    pub fn clamped(&self) -> Self {
        let one = S::one();
        Self(self.0.map(|v| v.max(-one).min(one)))
    }

    /// Probability view `(v + 1) / 2`.
    pub fn probability(&self) -> Grid<S> {
        let half = S::of(0.5);
        self.0.map(|v| (v + S::one()) * half)
    }

    pub fn is_clamped(&self) -> bool {
        self.0.as_slice().iter().all(|v| v.abs() <= S::one())
    }
}

impl<S: Scalar> NoiseField<S> {
    pub fn standard_normal<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..height * width)
            .map(|_| S::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self(Grid {
            height,
            width,
            data,
        })
    }
}

/// Multi-channel image stored channel-major (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        ensure!(channels > 0, "image needs at least one channel");
        ensure!(
            data.len() == channels * height * width,
            "image data has {} values, expected {}x{}x{}",
            data.len(),
            channels,
            height,
            width
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_grid(grid: Grid<S>) -> Self {
        let (height, width) = grid.shape();
        Self {
            channels: 1,
            height,
            width,
            data: grid.into_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> S {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            row + h <= self.height && col + w <= self.width,
            "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(self.channels * h * w);
        for ch in 0..self.channels {
            for r in 0..h {
                let start = (ch * self.height + row + r) * self.width + col;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Per-channel standardization to zero mean and unit variance.
    pub fn standardized(&self) -> Self {
        let plane = self.height * self.width;
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(plane.max(1)) {
            let n = S::of(chunk.len() as f64);
            let mean = chunk.iter().copied().sum::<S>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + S::of(1e-8)).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Integer label raster with values in `0..classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    height: usize,
    width: usize,
    classes: u8,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, classes: u8, data: Vec<u8>) -> Result<Self> {
        ensure!(classes >= 2, "class count must be >= 2, got {classes}");
        ensure!(
            data.len() == height * width,
            "class map has {} values, expected {}x{}",
            data.len(),
            height,
            width
        );
        if let Some(bad) = data.iter().find(|&&v| v >= classes) {
            return Err(crate::error::invalid!(
                "class value {bad} out of range for {classes} classes"
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, classes: u8) -> Self {
        Self {
            height,
            width,
            classes: classes.max(2),
            data: vec![0; height * width],
        }
    }

    /// Binarizes a probability grid: class 1 where `p >= threshold`.
    pub fn threshold<S: Scalar>(prob: &Grid<S>, threshold: S) -> Self {
        Self {
            height: prob.height(),
            width: prob.width(),
            classes: 2,
            data: prob
                .as_slice()
                .iter()
                .map(|&p| u8::from(p >= threshold))
                .collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> u8 {
        self.classes
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        debug_assert!(value < self.classes);
        self.data[row * self.width + col] = value;
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            row + h <= self.height && col + w <= self.width,
            "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            let start = (row + r) * self.width + col;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            classes: self.classes,
            data,
        })
    }

    /// Merges every non-zero class into a single foreground class.
    pub fn merged(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            classes: 2,
            data: self.data.iter().map(|&v| u8::from(v > 0)).collect(),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_enter_signal_space_as_two_y_minus_one() {
        let classes = ClassMap::new(1, 3, 3, vec![0, 1, 2]).unwrap();
        let m = SignalMask::<f64>::from_classes(&classes);
        assert_eq!(m.as_slice(), &[-1.0, 1.0, 1.0]);
        assert_eq!(m.probability().as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn class_map_rejects_out_of_range_values() {
        assert!(ClassMap::new(1, 2, 2, vec![0, 2]).is_err());
        assert!(ClassMap::new(1, 2, 1, vec![0, 0]).is_err());
    }

    #[test]
    fn standardized_image_has_unit_moments() {
        let img = Image::<f64>::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = img.standardized();
        let mean: f64 = s.as_slice().iter().sum::<f64>() / 4.0;
        let var: f64 = s.as_slice().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

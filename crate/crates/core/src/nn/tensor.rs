use crate::error::{ensure, Result};
use crate::grid::{Grid, Image};
use crate::scalar::Scalar;

/// Dense row-major tensor. Activations are `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            "tensor of shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Stacks equally-shaped single-channel grids into `[N, 1, H, W]`.
    pub fn stack_grids<'a, I>(grids: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Grid<S>>,
    {
        let mut data = Vec::new();
        let mut shape: Option<(usize, usize)> = None;
        let mut n = 0;
        for g in grids {
            match shape {
                None => shape = Some(g.shape()),
                Some(s) => crate::grid::ensure_same_shape(s, g.shape())?,
            }
            data.extend_from_slice(g.as_slice());
            n += 1;
        }
        ensure!(n > 0, "cannot stack an empty list of grids");
        let (h, w) = shape.unwrap_or((0, 0));
        Self::from_vec(&[n, 1, h, w], data)
    }

    /// Stacks `count` copies of an image into `[N, C, H, W]`.
    pub fn repeat_image(image: &Image<S>, count: usize) -> Self {
        let mut data = Vec::with_capacity(count * image.as_slice().len());
        for _ in 0..count {
            data.extend_from_slice(image.as_slice());
        }
        Self {
            shape: vec![count, image.channels(), image.height(), image.width()],
            data,
        }
    }

    pub fn stack_images<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Image<S>>,
    {
        let mut data = Vec::new();
        let mut dims: Option<(usize, usize, usize)> = None;
        let mut n = 0;
        for img in images {
            let d = (img.channels(), img.height(), img.width());
            match dims {
                None => dims = Some(d),
                Some(prev) => ensure!(prev == d, "image shapes differ: {:?} vs {:?}", prev, d),
            }
            data.extend_from_slice(img.as_slice());
            n += 1;
        }
        ensure!(n > 0, "cannot stack an empty list of images");
        let (c, h, w) = dims.unwrap_or((0, 0, 0));
        Self::from_vec(&[n, c, h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Splits a `[N, 1, H, W]` tensor back into grids.
    pub fn to_grids(&self) -> Vec<Grid<S>> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(c, 1, "to_grids expects a single channel");
        (0..n)
            .map(|i| {
                Grid::from_vec(h, w, self.data[i * h * w..(i + 1) * h * w].to_vec())
                    .expect("slice has h*w values")
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }
}

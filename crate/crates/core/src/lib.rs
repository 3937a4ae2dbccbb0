pub mod archive;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod supervision;
pub mod texture;
pub mod trainer;

pub use denoiser::{Denoiser, DenoiserConfig, NoiseModel};
pub use error::{Error, Result};
pub use grid::{ClassMap, Grid, Image, NoiseField, SignalMask};
pub use scalar::Scalar;

pub type Denoiser32 = Denoiser<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type SignalMask32 = SignalMask<f32>;
pub type SignalMask64 = SignalMask<f64>;
pub type NoiseField32 = NoiseField<f32>;
pub type NoiseField64 = NoiseField<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;

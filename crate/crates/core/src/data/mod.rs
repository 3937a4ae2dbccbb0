//! Synthetic low-contrast scratch images, dataset files and augmentation.

mod augment;
mod config;
mod dataset;
mod generate;
mod io;

pub use augment::{apply_augment, augment, warp_classes, warp_image, AugmentParams, TrainSample};
pub use config::{CountRange, GenConfig, Preset, Range};
pub use dataset::{
    generate_dataset, load_dataset, write_samples, Dataset, DatasetManifest, ManifestEntry, SplitCounts, LABELED,
    SEALED_DIR, TEST, UNLABELED, VALIDATION,
};
pub use generate::{
    generate_sample, render_background, Raster, SampleMeta, SampleRecord, ScratchMeta, BACKGROUND, DEEP, SHALLOW,
};
pub use io::{read_mask, read_probability, read_raster, write_mask, write_probability, write_raster};

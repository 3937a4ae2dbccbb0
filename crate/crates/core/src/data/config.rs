use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

/// Inclusive range of reals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

/// Inclusive range of counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

/// Parameters of the synthetic scratch-image generator. Intensities are in
/// grey levels (0..=255), lengths in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background_level: f64,
    /// Peak amplitude of the smooth illumination gradient.
    pub gradient_amplitude: f64,
    pub speckle_sigma: f64,
    pub deep_contrast: Range,
    pub deep_width: Range,
    pub deep_count: CountRange,
    pub shallow_contrast: Range,
    pub shallow_width: Range,
    pub shallow_count: CountRange,
    /// Scratch length as a fraction of the image diagonal.
    pub length: Range,
    /// Polyline segments per scratch.
    pub segments: CountRange,
    /// Largest heading change between consecutive segments, in radians.
    pub max_turn: f64,
    /// Probability that a scratch is brighter (rather than darker) than
    /// its surroundings.
    pub bright_probability: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            channels: 1,
            background_level: 120.0,
            gradient_amplitude: 18.0,
            speckle_sigma: 2.5,
            deep_contrast: Range::new(10.0, 30.0),
            deep_width: Range::new(1.0, 3.0),
            deep_count: CountRange::new(0, 2),
            shallow_contrast: Range::new(2.0, 6.0),
            shallow_width: Range::new(1.0, 2.0),
            shallow_count: CountRange::new(1, 3),
            length: Range::new(0.25, 0.7),
            segments: CountRange::new(3, 6),
            max_turn: 0.35,
            bright_probability: 0.5,
            seed: 0,
        }
    }
}

/// Named generator presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-size images.
    Default,
    /// 64x64 images with at most one scratch of each kind.
    Small,
}

impl std::str::FromStr for Preset {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "small" | "smoke" => Ok(Self::Small),
            other => Err(crate::error::invalid!("unknown preset '{other}'")),
        }
    }
}

impl GenConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Default => Self::default(),
            Preset::Small => Self::small(),
        }
    }

    /// 64x64 configuration used by quick experiments and tests.
    pub fn small() -> Self {
        Self {
            height: 64,
            width: 64,
            gradient_amplitude: 8.0,
            deep_contrast: Range::new(15.0, 35.0),
            deep_count: CountRange::new(0, 1),
            shallow_contrast: Range::new(6.0, 12.0),
            shallow_count: CountRange::new(1, 1),
            deep_width: Range::new(1.0, 2.0),
            length: Range::new(0.3, 0.6),
            segments: CountRange::new(2, 4),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.height > 0 && self.width > 0, "image size must be positive");
        ensure!(
            self.channels == 1 || self.channels == 3,
            "channels must be 1 or 3, got {}",
            self.channels
        );
        for (name, r) in [
            ("deep_contrast", self.deep_contrast),
            ("deep_width", self.deep_width),
            ("shallow_contrast", self.shallow_contrast),
            ("shallow_width", self.shallow_width),
            ("length", self.length),
        ] {
            ensure!(r.valid(), "{name} range [{}, {}] is invalid", r.min, r.max);
            ensure!(r.min >= 0.0, "{name} must be non-negative");
        }
        ensure!(
            self.shallow_contrast.max < self.deep_contrast.min,
            "shallow contrast max {} must be below deep contrast min {}",
            self.shallow_contrast.max,
            self.deep_contrast.min
        );
        ensure!(self.deep_width.min > 0.0 && self.shallow_width.min > 0.0, "scratch widths must be positive");
        for (name, c) in [
            ("deep_count", self.deep_count),
            ("shallow_count", self.shallow_count),
            ("segments", self.segments),
        ] {
            ensure!(c.min <= c.max, "{name} range [{}, {}] is invalid", c.min, c.max);
        }
        ensure!(self.segments.min >= 1, "scratches need at least one segment");
        let hi = self.background_level + self.gradient_amplitude + self.deep_contrast.max;
        let lo = self.background_level - self.gradient_amplitude - self.deep_contrast.max;
        ensure!(
            lo >= 0.0 && hi <= 255.0,
            "background and contrasts leave the 0..=255 grey range"
        );
        ensure!(self.speckle_sigma >= 0.0, "speckle sigma must be non-negative");
        ensure!((0.0..=1.0).contains(&self.bright_probability), "bright_probability must be in [0, 1]");
        ensure!(self.max_turn >= 0.0, "max_turn must be non-negative");
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_contradictions_fail() {
        GenConfig::default().validate().unwrap();
        GenConfig::small().validate().unwrap();
        let bad = GenConfig {
            shallow_contrast: Range::new(2.0, 12.0),
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = GenConfig::default();
        assert_eq!(a.hash(), GenConfig::default().hash());
        let b = GenConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        let text = toml::to_string(&a).unwrap();
        assert_eq!(toml::from_str::<GenConfig>(&text).unwrap(), a);
    }
}

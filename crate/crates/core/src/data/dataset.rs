use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::config::GenConfig;
use crate::data::generate::{generate_sample, SampleRecord};
use crate::data::io::{read_mask, read_raster, write_mask, write_raster};
use crate::error::{ensure, Error, Result};
use crate::rng;

pub const LABELED: &str = "labeled";
pub const UNLABELED: &str = "unlabeled";
pub const VALIDATION: &str = "val";
pub const TEST: &str = "test";
/// Directory holding the withheld masks of the unlabeled split.
pub const SEALED_DIR: &str = "sealed";

/// Samples per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const fn new(labeled: usize, unlabeled: usize, val: usize, test: usize) -> Self {
        Self {
            labeled,
            unlabeled,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.labeled + self.unlabeled + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    split: String,
    config_hash: String,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

/// One split: a header line followed by one JSON object per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            split: self.split.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, self.to_jsonl()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let bad = |n: usize, msg: String| Error::format(path, format!("line {}: {msg}", n + 1));
        let (n, first) = lines.next().ok_or_else(|| Error::format(path, "empty manifest"))?;
        let first = first.map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(n, e.to_string()))?;
        let mut entries = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?);
        }
        Ok(Self {
            split: header.split,
            config_hash: header.config_hash,
            seed: header.seed,
            entries,
        })
    }
}

/// Removes everything written so far if generation does not complete.
struct Cleanup {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    armed: bool,
}

impl Cleanup {
    fn dir(&mut self, path: PathBuf) -> Result<()> {
        if !path.exists() {
            let mut missing = Vec::new();
            let mut p = path.as_path();
            while !p.exists() {
                missing.push(p.to_path_buf());
                match p.parent() {
                    Some(parent) if !parent.as_os_str().is_empty() => p = parent,
                    _ => break,
                }
            }
            fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            self.dirs.extend(missing.into_iter().rev());
        }
        Ok(())
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

fn split_seed(cfg: &GenConfig, split: &str, index: usize) -> u64 {
    rng::sub_seed(cfg.seed, split, index as u64)
}

/// Generates all splits under `out`, returning the manifests in the order
/// labeled, unlabeled, val, test. Unlabeled masks go to the sealed
/// sidecar only. On failure every file written by this call is removed.
pub fn generate_dataset(cfg: &GenConfig, counts: SplitCounts, out: &Path) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let mut guard = Cleanup {
        files: Vec::new(),
        dirs: Vec::new(),
        armed: true,
    };
    guard.dir(out.to_path_buf())?;
    let hash = cfg.hash();
    let mut manifests = Vec::new();
    let mut sealed = None;
    for (split, n) in [
        (LABELED, counts.labeled),
        (UNLABELED, counts.unlabeled),
        (VALIDATION, counts.val),
        (TEST, counts.test),
    ] {
        let img_rel = PathBuf::from("images").join(split);
        let mask_rel = if split == UNLABELED {
            PathBuf::from(SEALED_DIR).join("masks").join(split)
        } else {
            PathBuf::from("masks").join(split)
        };
        guard.dir(out.join(&img_rel))?;
        guard.dir(out.join(&mask_rel))?;
        let mut entries = Vec::with_capacity(n);
        let mut oracle = Vec::new();
        for i in 0..n {
            let sample = generate_sample(cfg, split_seed(cfg, split, i))?;
            let name = format!("{i:05}.png");
            let image = img_rel.join(&name);
            let mask = mask_rel.join(&name);
            guard.files.push(out.join(&image));
            write_raster(&out.join(&image), &sample.image)?;
            guard.files.push(out.join(&mask));
            write_mask(&out.join(&mask), sample.classes.as_ref().expect("generated samples are labeled"))?;
            if split == UNLABELED {
                entries.push(ManifestEntry { image: image.clone(), mask: None });
                oracle.push(ManifestEntry {
                    image: PathBuf::from("..").join(&image),
                    mask: Some(PathBuf::from("..").join(&mask)),
                });
            } else {
                entries.push(ManifestEntry { image, mask: Some(mask) });
            }
        }
        if split == UNLABELED {
            sealed = Some(DatasetManifest {
                split: split.to_string(),
                config_hash: hash.clone(),
                seed: cfg.seed,
                entries: oracle,
            });
        }
        manifests.push(DatasetManifest {
            split: split.to_string(),
            config_hash: hash.clone(),
            seed: cfg.seed,
            entries,
        });
    }
    let cfg_path = out.join("gen_config.toml");
    guard.files.push(cfg_path.clone());
    let text = toml::to_string(cfg).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    if let Some(s) = &sealed {
        let p = out.join(SEALED_DIR).join(format!("{UNLABELED}.jsonl"));
        guard.files.push(p.clone());
        s.write(&p)?;
    }
    for m in &manifests {
        let p = out.join(format!("{}.jsonl", m.split));
        guard.files.push(p.clone());
        m.write(&p)?;
    }
    guard.armed = false;
    Ok(manifests)
}

/// Manifest-backed access to samples on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
}

/// Opens a manifest and checks that every referenced file exists.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for e in &manifest.entries {
        for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
            let full = root.join(p);
            if !full.is_file() {
                return Err(Error::io(
                    full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                ));
            }
        }
    }
    Ok(Dataset { manifest, root })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.entries[index].image)
    }

    pub fn get(&self, index: usize) -> Result<SampleRecord> {
        let e = self
            .manifest
            .entries
            .get(index)
            .ok_or_else(|| crate::error::invalid!("sample {index} out of range"))?;
        let image = read_raster(&self.root.join(&e.image))?;
        let classes = match &e.mask {
            Some(m) => {
                let path = self.root.join(m);
                let mask = read_mask(&path)?;
                ensure!(
                    mask.shape() == image.shape(),
                    "{}: mask is {:?} but image is {:?}",
                    path.display(),
                    mask.shape(),
                    image.shape()
                );
                Some(mask)
            }
            None => None,
        };
        Ok(SampleRecord {
            image,
            classes,
            meta: None,
        })
    }

    /// Visit order for a shuffle seed.
    pub fn order(&self, shuffle_seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(shuffle_seed, "shuffle", 0));
        idx
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SampleRecord>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn iter_shuffled(&self, shuffle_seed: u64) -> impl Iterator<Item = Result<SampleRecord>> + '_ {
        self.order(shuffle_seed).into_iter().map(|i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        self.iter().collect()
    }
}

/// Writes a manifest next to the given samples (helper for ad-hoc sets).
pub fn write_samples(out: &Path, split: &str, samples: &[SampleRecord], seed: u64) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from("images").join(split).join(format!("{i:05}.png"));
        write_raster(&out.join(&image), &s.image)?;
        let mask = match &s.classes {
            Some(c) => {
                let m = PathBuf::from("masks").join(split).join(format!("{i:05}.png"));
                write_mask(&out.join(&m), c)?;
                Some(m)
            }
            None => None,
        };
        entries.push(ManifestEntry { image, mask });
    }
    let m = DatasetManifest {
        split: split.to_string(),
        config_hash: String::new(),
        seed,
        entries,
    };
    m.write(&out.join(format!("{split}.jsonl")))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { seed: 3, ..GenConfig::small() };
        let manifests = generate_dataset(&cfg, SplitCounts::new(4, 8, 2, 2), dir.path()).unwrap();
        assert_eq!(manifests.len(), 4);
        let labeled = load_dataset(&dir.path().join("labeled.jsonl")).unwrap();
        assert_eq!(labeled.manifest, manifests[0]);
        let samples = labeled.load_all().unwrap();
        assert_eq!(samples.len(), 4);
        let direct = generate_sample(&cfg, split_seed(&cfg, LABELED, 2)).unwrap();
        assert_eq!(samples[2].image, direct.image);
        assert_eq!(samples[2].classes, direct.classes);
        let unlabeled = load_dataset(&dir.path().join("unlabeled.jsonl")).unwrap();
        assert_eq!(unlabeled.len(), 8);
        assert!(unlabeled.iter().all(|s| s.unwrap().classes.is_none()));
        let oracle = load_dataset(&dir.path().join(SEALED_DIR).join("unlabeled.jsonl")).unwrap();
        assert!(oracle.get(0).unwrap().classes.is_some());
        assert_eq!(oracle.get(5).unwrap().image, unlabeled.get(5).unwrap().image);
        assert_eq!(labeled.order(9), labeled.order(9));
        let mut sorted = labeled.order(9);
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&GenConfig::small(), SplitCounts::new(2, 0, 0, 0), dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/labeled/00001.png")).unwrap();
        let err = load_dataset(&dir.path().join("labeled.jsonl")).unwrap_err();
        assert!(err.to_string().contains("00001.png"));
    }

    #[test]
    fn failed_generation_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        // A file where a directory is expected makes the second split fail.
        fs::create_dir_all(out.join("images")).unwrap();
        fs::write(out.join("images/unlabeled"), b"x").unwrap();
        let err = generate_dataset(&GenConfig::small(), SplitCounts::new(2, 2, 0, 0), &out);
        assert!(err.is_err());
        assert!(!out.join("labeled.jsonl").exists());
        assert!(!out.join("images/labeled/00000.png").exists());
    }
}

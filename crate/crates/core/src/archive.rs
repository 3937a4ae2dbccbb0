//! Mask-sequence archives: the prior estimates of one or more reverse
//! trajectories stored as 16-bit probability PNGs plus a tab-separated
//! manifest `trajectory, position, step, file`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_probability, write_probability};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::texture::{consistency_feature, high_frequency_ratio, mask_entropy};

pub const MANIFEST: &str = "manifest.tsv";

/// One stored estimate; `step` is 0 for a trajectory's terminal mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveFrame {
    pub step: usize,
    pub probability: Grid<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Row {
    trajectory: usize,
    position: usize,
    step: usize,
    file: PathBuf,
}

/// Writes each trajectory's frames in order into `dir`.
pub fn write_archive<S: Scalar>(dir: &Path, trajectories: &[Vec<(usize, Grid<S>)>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST);
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    for (i, frames) in trajectories.iter().enumerate() {
        for (k, (step, prob)) in frames.iter().enumerate() {
            let file = PathBuf::from(format!("t{i:03}_p{k:03}.png"));
            write_probability(&dir.join(&file), prob)?;
            w.serialize(Row {
                trajectory: i,
                position: k,
                step: *step,
                file,
            })
            .map_err(|e| Error::format(&path, e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Reads an archive back as one frame list per trajectory. Errors in the
/// manifest name its line number.
pub fn read_archive(dir: &Path) -> Result<Vec<Vec<ArchiveFrame>>> {
    let path = dir.join(MANIFEST);
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let at = |line: u64, msg: String| Error::format(&path, format!("line {line}: {msg}"));
    let mut by_traj: BTreeMap<usize, Vec<(usize, ArchiveFrame)>> = BTreeMap::new();
    let mut shape = None;
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            at(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: Row = rec.deserialize(None).map_err(|e| at(line, e.to_string()))?;
        let prob = read_probability(&dir.join(&row.file)).map_err(|e| at(line, e.to_string()))?;
        match shape {
            None => shape = Some(prob.shape()),
            Some(s) if s != prob.shape() => {
                return Err(at(line, format!("frame is {:?}, earlier frames are {s:?}", prob.shape())));
            }
            _ => {}
        }
        let frames = by_traj.entry(row.trajectory).or_default();
        if frames.iter().any(|(p, _)| *p == row.position) {
            return Err(at(line, format!("duplicate position {} in trajectory {}", row.position, row.trajectory)));
        }
        frames.push((
            row.position,
            ArchiveFrame {
                step: row.step,
                probability: prob,
            },
        ));
    }
    if by_traj.is_empty() {
        return Err(Error::format(&path, "archive lists no frames"));
    }
    let mut out = Vec::with_capacity(by_traj.len());
    for (expected, (traj, mut frames)) in by_traj.into_iter().enumerate() {
        if traj != expected {
            return Err(Error::format(&path, format!("trajectory {expected} is missing")));
        }
        frames.sort_by_key(|(p, _)| *p);
        for (k, (p, _)) in frames.iter().enumerate() {
            if *p != k {
                return Err(Error::format(&path, format!("trajectory {traj} has no position {k}")));
            }
        }
        out.push(frames.into_iter().map(|(_, f)| f).collect());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Texture entropy (bits) per trajectory and position.
    pub series: Vec<Vec<f64>>,
    /// High-frequency ratio of each series.
    pub per_trajectory: Vec<f64>,
    /// Mean over trajectories.
    pub lambda: f64,
}

pub fn entropy_report(frames: &[Vec<ArchiveFrame>], tau_m: f64, window: usize, tau_f: usize) -> Result<EntropyReport> {
    let series: Vec<Vec<f64>> = frames
        .iter()
        .map(|tr| tr.iter().map(|f| mask_entropy(&f.probability, tau_m, window)).collect())
        .collect::<Result<_>>()?;
    let per_trajectory = series
        .iter()
        .map(|s| high_frequency_ratio(s, tau_f))
        .collect::<Result<_>>()?;
    let lambda = consistency_feature(&series, tau_f)?;
    Ok(EntropyReport {
        series,
        per_trajectory,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize, len: usize) -> Vec<Vec<(usize, Grid<f64>)>> {
        (0..n)
            .map(|i| {
                (0..len)
                    .map(|k| {
                        let g = Grid::from_fn(6, 6, |r, c| if (r + c + k + i) % 4 == 0 { 0.9 } else { 0.1 });
                        (len - 1 - k, g)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = frames(2, 5);
        write_archive(dir.path(), &src).unwrap();
        let back = read_archive(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in src.iter().zip(&back) {
            for ((step, g), f) in a.iter().zip(b) {
                assert_eq!(*step, f.step);
                assert!(g.max_abs_diff(&f.probability) < 1e-4);
            }
        }
    }

    #[test]
    fn constant_archive_has_zero_lambda() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_fn(6, 6, |r, _| if r == 2 { 1.0 } else { 0.0 });
        let src = vec![(0..13).map(|k| (12 - k, g.clone())).collect::<Vec<_>>()];
        write_archive(dir.path(), &src).unwrap();
        let rep = entropy_report(&read_archive(dir.path()).unwrap(), 0.5, 3, 9).unwrap();
        assert_eq!(rep.series[0].len(), 13);
        assert!(rep.series[0].iter().all(|&e| e == rep.series[0][0]));
        assert_eq!(rep.lambda, 0.0);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), &frames(1, 3)).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap();
        let broken = text.replacen("\t1\t", "\tone\t", 1);
        fs::write(&p, broken).unwrap();
        let err = read_archive(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(2);
        fs::write(&p, lines.join("\n")).unwrap();
        let err = read_archive(dir.path()).unwrap_err().to_string();
        assert!(err.contains("no position 1"), "{err}");
        fs::write(&p, format!("{text}0\t5\t0\tmissing.png\n")).unwrap();
        let err = read_archive(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 5"), "{err}");
    }
}

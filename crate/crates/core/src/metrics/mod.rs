//! Segmentation scores and tiled full-image inference.

mod window;

pub use window::{sliding_window_infer, tile_origins, tile_seed, Stitched, WindowConfig};

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::{DEEP, SHALLOW};
use crate::error::{ensure, Result};
use crate::grid::{ensure_same_shape, ClassMap};

/// Binary counts for the merged scratch class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_gt(gt: &ClassMap) -> Result<()> {
    ensure!(
        gt.as_slice().iter().all(|&v| v <= DEEP),
        "ground truth holds values outside {{0, 1, 2}}"
    );
    Ok(())
}

/// Any nonzero prediction counts as scratch; ground-truth classes 1 and 2 are
/// both positives.
pub fn confusion(pred: &ClassMap, gt: &ClassMap) -> Result<ConfusionCounts> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    check_gt(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (p > 0, g > 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Pixels of one ground-truth class and how many of them were predicted scratch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub detected: u64,
    pub total: u64,
}

impl ClassRecall {
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.detected as f64 / self.total as f64)
    }
}

impl Add for ClassRecall {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            detected: self.detected + o.detected,
            total: self.total + o.total,
        }
    }
}

pub fn class_recall(pred: &ClassMap, gt: &ClassMap, class: u8) -> Result<ClassRecall> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    let mut r = ClassRecall::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        if g == class {
            r.total += 1;
            r.detected += u64::from(p > 0);
        }
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub shallow_recall: f64,
    pub deep_recall: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub iou_undefined: bool,
    pub shallow_undefined: bool,
    pub deep_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(c: &ConfusionCounts, shallow: ClassRecall, deep: ClassRecall) -> MetricReport {
    let (iou, iou_undefined) = ratio(c.tp, c.tp + c.fp + c.fn_);
    let (dice, _) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let (accuracy, _) = ratio(c.tp + c.tn, c.total());
    let (shallow_recall, shallow_undefined) = ratio(shallow.detected, shallow.total);
    let (deep_recall, deep_undefined) = ratio(deep.detected, deep.total);
    MetricReport {
        iou,
        dice,
        accuracy,
        shallow_recall,
        deep_recall,
        iou_undefined,
        shallow_undefined,
        deep_undefined,
    }
}

/// Everything needed to report one image or a pooled set of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelTally {
    pub counts: ConfusionCounts,
    pub shallow: ClassRecall,
    pub deep: ClassRecall,
}

impl PixelTally {
    pub fn of(pred: &ClassMap, gt: &ClassMap) -> Result<Self> {
        Ok(Self {
            counts: confusion(pred, gt)?,
            shallow: class_recall(pred, gt, SHALLOW)?,
            deep: class_recall(pred, gt, DEEP)?,
        })
    }

    pub fn report(&self) -> MetricReport {
        metrics(&self.counts, self.shallow, self.deep)
    }
}

impl Add for PixelTally {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            counts: self.counts + o.counts,
            shallow: self.shallow + o.shallow,
            deep: self.deep + o.deep,
        }
    }
}

impl AddAssign for PixelTally {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Per-image reports plus the pooled (pixel-summed) aggregate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<PixelTally>,
    pub total: PixelTally,
}

impl Evaluation {
    pub fn push(&mut self, t: PixelTally) {
        self.total += t;
        self.per_image.push(t);
    }

    pub fn report(&self) -> MetricReport {
        self.total.report()
    }

    /// Tab-separated per-image table with a header row.
    pub fn table(&self, names: &[String]) -> String {
        let mut out = String::from("image\tiou\tdice\taccuracy\tshallow_recall\tdeep_recall\n");
        for (i, t) in self.per_image.iter().enumerate() {
            let r = t.report();
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let rec = |v: f64, undef: bool| if undef { "NA".to_string() } else { format!("{v:.6}") };
            out.push_str(&format!(
                "{name}\t{}\t{:.6}\t{:.6}\t{}\t{}\n",
                rec(r.iou, r.iou_undefined),
                r.dice,
                r.accuracy,
                rec(r.shallow_recall, r.shallow_undefined),
                rec(r.deep_recall, r.deep_undefined)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[u8]) -> ClassMap {
        ClassMap::new(1, v.len(), 3, v.to_vec()).unwrap()
    }

    #[test]
    fn toy_counts() {
        // Positives at a, b; prediction at b, c.
        let gt = map(&[1, 2, 0, 0]);
        let pred = map(&[0, 1, 1, 0]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let r = metrics(&c, ClassRecall::default(), ClassRecall::default());
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.dice - 0.5).abs() < 1e-15);
        assert!(r.shallow_undefined && r.deep_undefined);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let gt = map(&[0, 1, 2, 0, 0, 2]);
        let c = confusion(&gt.merged(), &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let r = PixelTally::of(&gt.merged(), &gt).unwrap().report();
        assert_eq!((r.iou, r.dice, r.accuracy), (1.0, 1.0, 1.0));
        let inv = map(&gt.merged().as_slice().iter().map(|&v| 1 - v).collect::<Vec<_>>());
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn shallow_recall_hand_count() {
        let mut gt = vec![0u8; 20];
        let mut pred = vec![0u8; 20];
        for i in 0..10 {
            gt[i] = SHALLOW;
            pred[i] = u8::from(i < 7);
        }
        let r = PixelTally::of(&map(&pred), &map(&gt)).unwrap().report();
        assert!((r.shallow_recall - 0.7).abs() < 1e-15);
        assert!(r.deep_undefined);
    }

    #[test]
    fn empty_foreground_is_flagged() {
        let r = PixelTally::of(&map(&[0, 0]), &map(&[0, 0])).unwrap().report();
        assert!(r.iou_undefined);
        assert_eq!(r.iou, 0.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn shape_mismatch_and_bad_labels() {
        assert!(confusion(&map(&[0, 1]), &map(&[0, 1, 0])).is_err());
        let bad = ClassMap::new(1, 2, 4, vec![0, 3]).unwrap();
        assert!(confusion(&map(&[0, 1]), &bad).is_err());
    }
}

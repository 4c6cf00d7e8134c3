//! Per-class IoU with absent-class exclusion and mean IoU over tooth classes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::apk::TEETH;
use crate::data::LabelMap;
use crate::error::{Error, Result};

/// IoU of class `k` (0 background, 1..=16 teeth). `None` when neither map
/// contains `k`.
pub fn iou(pred: &LabelMap, gt: &LabelMap, k: u8) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p == k && g == k) as u64;
        union += (p == k || g == k) as u64;
    }
    Ok(ratio(inter, union))
}

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
        return Err(Error::Contract(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    Ok(())
}

fn ratio(inter: u64, union: u64) -> Option<f64> {
    (union > 0).then(|| inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Sum intersections and unions over the split, then divide.
    #[default]
    Dataset,
    /// Average per-scene IoUs over the scenes where the class is defined.
    Scene,
}

/// Background, the 16 teeth, then foreground (any tooth).
const SLOTS: usize = TEETH + 2;
const FG: usize = TEETH + 1;

/// Confusion counts over a split. Merge is associative.
#[derive(Clone, Debug, PartialEq)]
pub struct IoUAccumulator {
    pub mode: Aggregation,
    inter: [u64; SLOTS],
    union: [u64; SLOTS],
    scene_sum: [f64; SLOTS],
    scene_count: [u64; SLOTS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// T1..T16; `None` for classes absent from both maps across the split.
    pub per_class: [Option<f64>; TEETH],
    /// Mean over defined tooth classes; `None` if there are none.
    pub miou: Option<f64>,
    /// Foreground (any tooth) and background IoU.
    pub fb_iou: [Option<f64>; 2],
}

impl IoUAccumulator {
    pub fn new(mode: Aggregation) -> Self {
        IoUAccumulator {
            mode,
            inter: [0; SLOTS],
            union: [0; SLOTS],
            scene_sum: [0.0; SLOTS],
            scene_count: [0; SLOTS],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_shapes(pred, gt)?;
        let mut inter = [0u64; SLOTS];
        let mut union = [0u64; SLOTS];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p as usize > TEETH || g as usize > TEETH {
                return Err(Error::Data(format!("label {} outside 0..={TEETH}", p.max(g))));
            }
            if p == g {
                inter[p as usize] += 1;
                union[p as usize] += 1;
            } else {
                union[p as usize] += 1;
                union[g as usize] += 1;
            }
            inter[FG] += (p > 0 && g > 0) as u64;
            union[FG] += (p > 0 || g > 0) as u64;
        }
        for k in 0..SLOTS {
            self.inter[k] += inter[k];
            self.union[k] += union[k];
            if let Some(v) = ratio(inter[k], union[k]) {
                self.scene_sum[k] += v;
                self.scene_count[k] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IoUAccumulator) {
        for k in 0..SLOTS {
            self.inter[k] += other.inter[k];
            self.union[k] += other.union[k];
            self.scene_sum[k] += other.scene_sum[k];
            self.scene_count[k] += other.scene_count[k];
        }
    }

    /// Intersection and union pixel counts for class `k` (0..=16).
    pub fn counts(&self, k: usize) -> (u64, u64) {
        (self.inter[k], self.union[k])
    }

    fn class_iou(&self, k: usize) -> Option<f64> {
        match self.mode {
            Aggregation::Dataset => ratio(self.inter[k], self.union[k]),
            Aggregation::Scene => (self.scene_count[k] > 0).then(|| self.scene_sum[k] / self.scene_count[k] as f64),
        }
    }

    pub fn report(&self) -> IoUReport {
        let per_class: [Option<f64>; TEETH] = std::array::from_fn(|k| self.class_iou(k + 1));
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        IoUReport {
            per_class,
            miou,
            fb_iou: [self.class_iou(FG), self.class_iou(0)],
        }
    }
}

impl IoUReport {
    /// Mean IoU, failing when no tooth class is defined.
    pub fn miou(&self) -> Result<f64> {
        self.miou
            .ok_or_else(|| Error::Contract("mIoU is undefined: no tooth class appears in prediction or ground truth".into()))
    }

    pub const CSV_HEADER: &'static str =
        "Method,Epoch,T1,T2,T3,T4,T5,T6,T7,T8,T9,T10,T11,T12,T13,T14,T15,T16,mIoU";

    pub fn csv_row(&self, method: &str, epoch: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{method},{epoch}");
        for v in self.per_class {
            let _ = write!(s, ",{}", fmt(v));
        }
        let _ = write!(s, ",{}", fmt(self.miou));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: u8) -> LabelMap {
        let mut d = vec![0; h * w];
        for r in rows {
            for c in cols.clone() {
                d[r * w + c] = k;
            }
        }
        LabelMap::new(h, w, d).unwrap()
    }

    #[test]
    fn set_arithmetic_cases() {
        let a = square(8, 8, 0..4, 0..4, 3);
        assert_eq!(iou(&a, &a, 3).unwrap(), Some(1.0));
        let b = square(8, 8, 4..8, 4..8, 3);
        assert_eq!(iou(&a, &b, 3).unwrap(), Some(0.0));
        let half = square(8, 8, 0..4, 2..6, 3);
        assert!((iou(&a, &half, 3).unwrap().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = square(8, 8, 0..0, 0..0, 3);
        assert_eq!(iou(&a, &empty, 3).unwrap(), Some(0.0));
        assert_eq!(iou(&empty, &empty, 3).unwrap(), None);
    }

    #[test]
    fn undefined_miou_is_an_error() {
        let empty = square(4, 4, 0..0, 0..0, 1);
        let mut acc = IoUAccumulator::new(Aggregation::Dataset);
        acc.add(&empty, &empty).unwrap();
        let r = acc.report();
        assert!(matches!(r.miou(), Err(Error::Contract(_))));
        assert_eq!(r.fb_iou, [None, Some(1.0)]);
    }

    #[test]
    fn csv_uses_nan_literal() {
        let a = square(4, 4, 0..2, 0..2, 2);
        let mut acc = IoUAccumulator::new(Aggregation::Dataset);
        acc.add(&a, &a).unwrap();
        let row = acc.report().csv_row("full", "3");
        assert_eq!(row.split(',').count(), IoUReport::CSV_HEADER.split(',').count());
        assert!(row.starts_with("full,3,NaN,1.0000,NaN"));
        assert!(row.ends_with(",1.0000"));
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let a = square(4, 4, 0..1, 0..1, 1);
        let b = square(4, 5, 0..1, 0..1, 1);
        assert!(matches!(iou(&a, &b, 1), Err(Error::Contract(_))));
    }
}

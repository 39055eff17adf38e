//! Overlap and boundary metrics for binary segmentation masks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BASELINE_THRESHOLD: f64 = 0.99;
pub const ADAPTED_THRESHOLD: f64 = 0.9;

/// Per-slice or aggregated scores. Overlap scores are percentages;
/// `hausdorff` is in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub dice: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
    pub specificity: f64,
    pub hausdorff: f64,
    pub n_slices: usize,
    /// Slices whose Hausdorff distance fell back to the image diagonal
    /// because a mask was empty.
    pub empty_hausdorff: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
    pub specificity: f64,
}

pub fn threshold_predictions<T: Scalar>(probs: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("threshold", format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(probs.map(|p| if p.as_f64() > tau { T::one() } else { T::zero() }))
}

fn binary<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<Vec<bool>> {
    t.data()
        .iter()
        .enumerate()
        .map(|(i, v)| match v.as_f64() {
            0.0 => Ok(false),
            1.0 => Ok(true),
            x => Err(Error::invalid(op, format!("non-binary value {x} at index {i}"))),
        })
        .collect()
}

impl Confusion {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Scores in percent. A ratio with an empty denominator is 100 when
    /// both masks are empty and 0 otherwise.
    pub fn overlap(&self) -> Overlap {
        let both_empty = self.tp + self.fp + self.fn_ == 0;
        let ratio = |num: u64, den: u64, empty: bool| {
            if den == 0 {
                if empty {
                    100.0
                } else {
                    0.0
                }
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let fg_iou = ratio(self.tp, self.tp + self.fp + self.fn_, both_empty);
        let bg_iou = ratio(self.tn, self.tn + self.fp + self.fn_, true);
        Overlap {
            dice: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, both_empty),
            miou: (fg_iou + bg_iou) / 2.0,
            recall: ratio(self.tp, self.tp + self.fn_, both_empty),
            precision: ratio(self.tp, self.tp + self.fp, both_empty),
            specificity: ratio(self.tn, self.tn + self.fp, true),
        }
    }
}

/// `(dice, miou, recall, precision, specificity)` of two binary masks.
pub fn confusion_metrics<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Overlap> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("confusion_metrics", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (p, g) = (binary("confusion_metrics", pred)?, binary("confusion_metrics", gt)?);
    Ok(Confusion::from_masks(&p, &g).overlap())
}

fn points(mask: &[bool], w: usize) -> Vec<(i64, i64)> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| ((i / w) as i64, (i % w) as i64))
        .collect()
}

fn directed_sq(a: &[(i64, i64)], b: &[(i64, i64)]) -> i64 {
    a.iter()
        .map(|&(ay, ax)| {
            b.iter()
                .map(|&(by, bx)| (ay - by).pow(2) + (ax - bx).pow(2))
                .min()
                .expect("nonempty")
        })
        .max()
        .unwrap_or(0)
}

/// Symmetric Hausdorff distance between the foreground pixel sets of two
/// `h×w` masks. Returns `None` if either set is empty.
pub fn hausdorff_masks(pred: &[bool], gt: &[bool], w: usize) -> Option<f64> {
    let (a, b) = (points(pred, w), points(gt, w));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    Some((directed_sq(&a, &b).max(directed_sq(&b, &a)) as f64).sqrt())
}

/// Hausdorff distance of two `[.., H, W]` binary masks in pixels; an empty
/// mask yields the image diagonal.
pub fn hausdorff<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(hausdorff_or_diagonal(pred, gt)?.0)
}

fn hausdorff_or_diagonal<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, bool)> {
    if pred.shape() != gt.shape() || pred.shape().len() < 2 {
        return Err(Error::shape("hausdorff", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (p, g) = (binary("hausdorff", pred)?, binary("hausdorff", gt)?);
    Ok(match hausdorff_masks(&p, &g, w) {
        Some(d) => (d, false),
        None => (((h * h + w * w) as f64).sqrt(), true),
    })
}

/// All metrics for a single slice.
pub fn slice_metrics<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<MetricsRecord> {
    let o = confusion_metrics(pred, gt)?;
    let (hd, empty) = hausdorff_or_diagonal(pred, gt)?;
    Ok(MetricsRecord {
        dice: o.dice,
        miou: o.miou,
        recall: o.recall,
        precision: o.precision,
        specificity: o.specificity,
        hausdorff: hd,
        n_slices: 1,
        empty_hausdorff: usize::from(empty),
    })
}

/// Thresholds a `[N, 1, H, W]` probability batch and scores every sample
/// against `masks`.
pub fn batch_metrics<T: Scalar>(probs: &Tensor<T>, masks: &Tensor<T>, tau: f64) -> Result<Vec<MetricsRecord>> {
    if probs.shape() != masks.shape() {
        return Err(Error::shape("batch_metrics", format!("{:?} vs {:?}", probs.shape(), masks.shape())));
    }
    let pred = threshold_predictions(probs, tau)?;
    (0..probs.shape()[0])
        .map(|i| slice_metrics(&pred.sample(i)?, &masks.sample(i)?))
        .collect()
}

/// Unweighted mean over records; slice and fallback counts are summed.
pub fn aggregate(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    if records.is_empty() {
        return Err(Error::invalid("aggregate", "no records"));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(MetricsRecord {
        dice: mean(|r| r.dice),
        miou: mean(|r| r.miou),
        recall: mean(|r| r.recall),
        precision: mean(|r| r.precision),
        specificity: mean(|r| r.specificity),
        hausdorff: mean(|r| r.hausdorff),
        n_slices: records.iter().map(|r| r.n_slices).sum(),
        empty_hausdorff: records.iter().map(|r| r.empty_hausdorff).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Tensor<f32> {
        Tensor::new(&[1, bits.len()], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn thresholds() {
        let p = Tensor::<f32>::full(&[4], 0.95);
        assert!(threshold_predictions(&p, 0.9).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(threshold_predictions(&p, 0.99).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(threshold_predictions(&p, 1.0).is_err());
        assert!(threshold_predictions(&p, 0.0).is_err());
    }

    #[test]
    fn hand_confusion_example() {
        let o = confusion_metrics(&mask(&[1, 1, 0, 0]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!((o.dice, o.recall, o.precision, o.specificity), (50.0, 50.0, 50.0, 50.0));
        assert!((o.miou - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let o = confusion_metrics(&mask(&[1, 0, 1, 0]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!([o.dice, o.miou, o.recall, o.precision, o.specificity], [100.0; 5]);
        let o = confusion_metrics(&mask(&[1, 1, 1]), &mask(&[0, 0, 0])).unwrap();
        assert_eq!((o.specificity, o.precision), (0.0, 0.0));
        let o = confusion_metrics(&mask(&[0, 0]), &mask(&[0, 0])).unwrap();
        assert_eq!([o.dice, o.miou, o.recall, o.precision, o.specificity], [100.0; 5]);
    }

    #[test]
    fn rejects_non_binary_masks() {
        let soft = Tensor::<f32>::new(&[1, 2], vec![0.5, 1.0]).unwrap();
        assert!(confusion_metrics(&soft, &mask(&[1, 0])).is_err());
        assert!(confusion_metrics(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let mut a = Tensor::<f64>::zeros(&[5, 5]);
        let mut b = Tensor::<f64>::zeros(&[5, 5]);
        a.data_mut()[0] = 1.0;
        b.data_mut()[3 * 5 + 4] = 1.0;
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        let empty = Tensor::<f64>::zeros(&[3, 4]);
        assert_eq!(hausdorff(&empty, &empty).unwrap(), 5.0);
    }

    #[test]
    fn aggregate_is_a_mean() {
        let r = |d| MetricsRecord { dice: d, n_slices: 1, ..Default::default() };
        assert_eq!(aggregate(&[r(40.0)]).unwrap(), r(40.0));
        let m = aggregate(&[r(40.0), r(60.0)]).unwrap();
        assert_eq!((m.dice, m.n_slices), (50.0, 2));
        assert!(aggregate(&[]).is_err());
    }
}

//! Overlap metrics for binary masks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

fn is_binary<T: Element>(v: T) -> bool {
    v == T::zero() || v == T::one()
}

/// Pixel confusion counts of a predicted mask against a reference.
pub fn confusion<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(format!("mask shapes differ: {} vs {}", pred.shape(), reference.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &r)) in pred.data().iter().zip(reference.data()).enumerate() {
        if !is_binary(p) || !is_binary(r) {
            return Err(Error::InvalidArgument(format!("non-binary mask value at pixel {i}")));
        }
        match (p == T::one(), r == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; two empty masks score 1.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// `TP / (TP + FP + FN)`; two empty masks score 1.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Binary mask `(N, H, W)` that is 1 where `foreground` is the argmax class.
/// Ties go to the lower class index.
pub fn argmax_mask<T: Element>(prob: &Tensor<T>, foreground: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = prob.shape().nchw()?;
    if foreground >= c {
        return Err(Error::InvalidArgument(format!("class {foreground} out of range for {c} classes")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for img in prob.data().chunks_exact(c * plane) {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if img[k * plane + p] > img[best * plane + p] {
                    best = k;
                }
            }
            out.push(if best == foreground { T::one() } else { T::zero() });
        }
    }
    Tensor::from_values(&[n, h, w], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

impl ImageScore {
    pub fn new(id: impl Into<String>, counts: ConfusionCounts) -> Self {
        ImageScore { id: id.into(), dice: dice(&counts), iou: iou(&counts), counts }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for one value.
    pub stdev: f64,
}

pub fn mean_stdev(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stdev = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary { mean, stdev })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageScore>,
    pub dice: Summary,
    pub iou: Summary,
    pub counts: ConfusionCounts,
}

pub fn aggregate(images: Vec<ImageScore>) -> Result<MetricsReport> {
    let d: Vec<f64> = images.iter().map(|s| s.dice).collect();
    let j: Vec<f64> = images.iter().map(|s| s.iou).collect();
    let dice = mean_stdev(&d)?;
    let iou = mean_stdev(&j)?;
    let counts = images.iter().fold(ConfusionCounts::default(), |acc, s| acc.merge(s.counts));
    Ok(MetricsReport { images, dice, iou, counts })
}

impl MetricsReport {
    /// `image_id\tdice\tiou` rows then
    /// `AGGREGATE\tmean_dice\tstd_dice\tmean_iou\tstd_iou`, 6 decimals.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for img in &self.images {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", img.id, img.dice, img.iou);
        }
        let _ = writeln!(
            s,
            "AGGREGATE\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.dice.mean, self.dice.stdev, self.iou.mean, self.iou.stdev
        );
        s
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} images  dice {:.4} ± {:.4}  iou {:.4} ± {:.4}",
            self.images.len(),
            self.dice.mean,
            self.dice.stdev,
            self.iou.mean,
            self.iou.stdev
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Tensor<f32> {
        Tensor::from_values(&[bits.len()], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn hand_counted_examples() {
        let r = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let p = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        let c = confusion(&p, &r).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 2, fn_: 2, tn: 2 });
        assert_eq!(dice(&c), 0.5);
        assert_eq!(iou(&c), 1.0 / 3.0);

        let c = confusion(&mask(&[0; 12]), &mask(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0])).unwrap();
        assert_eq!((c.fn_, c.tp), (10, 0));
        assert_eq!(dice(&c), 0.0);
        let empty = confusion(&mask(&[0; 4]), &mask(&[0; 4])).unwrap();
        assert_eq!((dice(&empty), iou(&empty)), (1.0, 1.0));
    }

    #[test]
    fn rejects_bad_masks() {
        assert!(confusion(&mask(&[0, 1]), &mask(&[0, 1, 1])).is_err());
        let half = Tensor::from_values(&[2], vec![0.5f32, 1.0]).unwrap();
        assert!(confusion(&half, &mask(&[0, 1])).is_err());
    }

    #[test]
    fn argmax_tie_goes_to_background() {
        let p = Tensor::from_values(&[1, 2, 1, 3], vec![0.3f32, 0.5, 0.6, 0.7, 0.5, 0.4]).unwrap();
        assert_eq!(argmax_mask(&p, 1).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert!(argmax_mask(&p, 2).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = mean_stdev(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.stdev - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_stdev(&[0.7]).unwrap().stdev, 0.0);
        assert_eq!(mean_stdev(&[1.0, 1.0]).unwrap(), Summary { mean: 1.0, stdev: 0.0 });
        assert!(mean_stdev(&[]).is_err());
    }

    #[test]
    fn tsv_format() {
        let c = ConfusionCounts { tp: 2, fp: 2, fn_: 2, tn: 2 };
        let r = aggregate(vec![ImageScore::new("0001", c)]).unwrap();
        assert_eq!(r.to_tsv(), "0001\t0.500000\t0.333333\nAGGREGATE\t0.500000\t0.000000\t0.333333\t0.000000\n");
    }

    proptest! {
        #[test]
        fn threshold_equals_argmax_off_ties(v in proptest::collection::vec(0.0f64..=1.0, 16)) {
            let mut data = Vec::new();
            data.extend(v.iter().map(|p| 1.0 - p));
            data.extend(v.iter().copied());
            let prob = Tensor::from_values(&[1, 2, 4, 4], data).unwrap();
            let m = argmax_mask(&prob, 1).unwrap();
            for (p, &b) in v.iter().zip(m.data()) {
                if (1.0 - p) != *p {
                    prop_assert_eq!(b == 1.0, *p > 0.5);
                }
            }
        }

        #[test]
        fn symmetric_bounded_and_related(a in proptest::collection::vec(0u8..2, 64), b in proptest::collection::vec(0u8..2, 64)) {
            let (pa, pb) = (mask(&a), mask(&b));
            let ab = confusion(&pa, &pb).unwrap();
            let ba = confusion(&pb, &pa).unwrap();
            prop_assert_eq!(dice(&ab), dice(&ba));
            prop_assert_eq!(iou(&ab), iou(&ba));
            prop_assert!((0.0..=1.0).contains(&dice(&ab)));
            let j = iou(&ab);
            prop_assert!((dice(&ab) - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        }
    }
}

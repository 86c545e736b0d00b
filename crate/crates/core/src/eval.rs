//! Confusion counting, binary change metrics and TP/TN/FP/FN rendering.

use std::ops::{Add, AddAssign};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const TN_COLOR: [u8; 3] = [255, 255, 255];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// Pixel tallies with "changed" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts with prediction and reference exchanged.
    pub fn swapped(&self) -> Self {
        Self { fp: self.fn_, fn_: self.fp, ..*self }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oa: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub ciou: f64,
}

fn binary_value<T: Scalar>(v: T) -> Result<bool> {
    if v == T::one() {
        Ok(true)
    } else if v == T::zero() {
        Ok(false)
    } else {
        Err(TensorError::Argument(format!("expected a binary map, found value {v}")))
    }
}

/// Per-pixel tally of a binary prediction against a binary reference.
pub fn confusion_counts<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    pred.expect_same_shape(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (binary_value(p)?, binary_value(g)?) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// OA, precision, recall, F1 and changed-class IoU. A ratio whose
/// denominator is zero is 1.0 when there are no positives in either map and
/// 0.0 otherwise.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(TensorError::Argument("metrics of an empty confusion matrix".into()));
    }
    let no_positives = c.tp + c.fp + c.fn_ == 0;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            if no_positives {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    Ok(MetricReport {
        oa: ratio(c.tp + c.tn, total),
        pre: ratio(c.tp, c.tp + c.fp),
        rec: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        ciou: ratio(c.tp, c.tp + c.fp + c.fn_),
    })
}

/// `(H, W)` of a map whose leading dimensions are all 1.
fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [lead @ .., h, w] if lead.iter().all(|&d| d == 1) => Ok((*h, *w)),
        _ => Err(TensorError::Shape(format!("expected a single [H, W] map, got {shape:?}"))),
    }
}

/// Colors each pixel by its confusion class.
pub fn render_change_map<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<RgbImage> {
    pred.expect_same_shape(gt)?;
    let (h, w) = plane_dims(pred.shape())?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let color = match (binary_value(p)?, binary_value(g)?) {
            (true, true) => TP_COLOR,
            (false, false) => TN_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
        };
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(color));
    }
    Ok(img)
}

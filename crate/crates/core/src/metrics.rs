//! Pixel-level segmentation metrics from binary masks.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
    pub iou: f64,
    pub dice: f64,
}

impl Metrics {
    /// Percentages in the order IoU, Dice, Acc, Se, Sp.
    pub fn table_row(&self) -> String {
        [self.iou, self.dice, self.acc, self.se, self.sp]
            .iter()
            .map(|v| format!("{:.2}", v * 100.0))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Metrics {
            acc: avg(|m| m.acc),
            se: avg(|m| m.se),
            sp: avg(|m| m.sp),
            iou: avg(|m| m.iou),
            dice: avg(|m| m.dice),
        })
    }
}

/// Pixel tallies of a predicted mask against ground truth. Both must hold only
/// 0 and 1.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::InvalidArgument(format!("mask value ({p}, {g}) is not binary"))),
        }
    }
    Ok(c)
}

/// `0/0` is taken as 1: agreement on an empty class is perfect.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::InvalidArgument("metrics of zero pixels".into()));
    }
    Ok(Metrics {
        acc: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    })
}

/// `1` where `prob ≥ threshold`.
pub fn binarize<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let t = T::cst(threshold);
    Ok(prob.data().iter().map(|&v| u8::from(v >= t)).collect())
}

#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

/// Per-image metrics with the mean-of-images and pooled-count aggregates.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean: Metrics,
    pub pooled: Metrics,
}

impl MetricReport {
    pub fn from_counts(items: Vec<(String, ConfusionCounts)>) -> Result<Self> {
        let mut per_image = Vec::with_capacity(items.len());
        let mut pooled = ConfusionCounts::default();
        for (id, counts) in items {
            pooled += counts;
            per_image.push(ImageMetrics {
                metrics: compute_metrics(&counts)?,
                id,
                counts,
            });
        }
        let all: Vec<Metrics> = per_image.iter().map(|m| m.metrics).collect();
        let mean = Metrics::mean(&all).ok_or_else(|| Error::InvalidArgument("metric report over no images".into()))?;
        Ok(Self {
            per_image,
            mean,
            pooled: compute_metrics(&pooled)?,
        })
    }

    /// `id,acc,se,sp,iou,dice` with percentages to two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,acc,se,sp,iou,dice\n");
        let mut row = |id: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{id},{:.2},{:.2},{:.2},{:.2},{:.2}",
                m.acc * 100.0,
                m.se * 100.0,
                m.sp * 100.0,
                m.iou * 100.0,
                m.dice * 100.0
            );
        };
        for im in &self.per_image {
            row(&im.id, &im.metrics);
        }
        row("AGGREGATE_MEAN", &self.mean);
        row("AGGREGATE_POOLED", &self.pooled);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn simple_tallies() {
        let ones = [1u8; 16];
        assert_eq!(confusion(&ones, &ones).unwrap(), counts(16, 0, 0, 0));
        assert_eq!(confusion(&[0; 16], &ones).unwrap(), counts(0, 0, 0, 16));
        assert!(confusion(&[2, 0], &[1, 0]).is_err());
        assert!(confusion(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn worked_example() {
        let m = compute_metrics(&counts(2, 12, 1, 1)).unwrap();
        assert_eq!(m.iou, 0.5);
        assert_eq!(m.dice, 4.0 / 6.0);
        assert_eq!(m.acc, 0.875);
        assert_eq!(m.se, 2.0 / 3.0);
        assert_eq!(m.sp, 12.0 / 13.0);
    }

    #[test]
    fn perfect_and_empty_cases() {
        let m = compute_metrics(&counts(5, 11, 0, 0)).unwrap();
        assert_eq!([m.acc, m.se, m.sp, m.iou, m.dice], [1.0; 5]);
        let e = compute_metrics(&counts(0, 16, 0, 0)).unwrap();
        assert_eq!([e.acc, e.se, e.sp, e.iou, e.dice], [1.0; 5]);
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn table_row_layout() {
        let m = Metrics {
            iou: 0.8951,
            dice: 0.9343,
            acc: 0.9640,
            se: 0.9455,
            sp: 0.9702,
        };
        assert_eq!(m.table_row(), "89.51, 93.43, 96.40, 94.55, 97.02");
    }

    #[test]
    fn binarize_boundary_inclusive() {
        let t = Tensor::<f64>::from_f64(vec![3], &[0.49, 0.5, 0.51]).unwrap();
        assert_eq!(binarize(&t, 0.5).unwrap(), vec![0, 1, 1]);
        assert_eq!(binarize(&Tensor::<f32>::full(vec![4], 0.5), 0.5).unwrap(), vec![1; 4]);
        assert!(binarize(&t, 1.0).is_err());
        assert!(binarize(&t, 0.0).is_err());
    }

    #[test]
    fn csv_has_row_per_image_plus_aggregates() {
        let r = MetricReport::from_counts(vec![
            ("a".into(), counts(2, 12, 1, 1)),
            ("b".into(), counts(4, 12, 0, 0)),
        ])
        .unwrap();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 2);
        assert_eq!(lines[0], "id,acc,se,sp,iou,dice");
        assert_eq!(lines[1], "a,87.50,66.67,92.31,50.00,66.67");
        assert!(lines[3].starts_with("AGGREGATE_MEAN,93.75,"));
        assert_eq!(r.pooled, compute_metrics(&counts(6, 24, 1, 1)).unwrap());
    }

    fn mask_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (prop::collection::vec(0u8..2, 64), prop::collection::vec(0u8..2, 64))
    }

    proptest! {
        #[test]
        fn confusion_matches_pixel_loop((p, g) in mask_pair()) {
            let c = confusion(&p, &g).unwrap();
            let mut o = [0u64; 4];
            for i in 0..p.len() {
                o[(p[i] * 2 + g[i]) as usize] += 1;
            }
            prop_assert_eq!(c, counts(o[3], o[0], o[2], o[1]));
            prop_assert_eq!(c.total(), 64);
        }

        #[test]
        fn dice_iou_identity_and_ranges((p, g) in mask_pair()) {
            let c = confusion(&p, &g).unwrap();
            let m = compute_metrics(&c).unwrap();
            if c.tp + c.fp + c.fn_ > 0 {
                prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
            }
            prop_assert!(m.dice >= m.iou);
            for v in [m.acc, m.se, m.sp, m.iou, m.dice] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn swap_transposes_errors((p, g) in mask_pair()) {
            let (a, b) = (confusion(&p, &g).unwrap(), confusion(&g, &p).unwrap());
            prop_assert_eq!(a.fp, b.fn_);
            prop_assert_eq!(a.fn_, b.fp);
            let (ma, mb) = (compute_metrics(&a).unwrap(), compute_metrics(&b).unwrap());
            prop_assert_eq!(ma.dice, mb.dice);
            prop_assert_eq!(ma.iou, mb.iou);
            prop_assert_eq!(ma.acc, mb.acc);
        }

        #[test]
        fn pooled_equals_formula_on_summed_counts(pairs in prop::collection::vec(mask_pair(), 1..6)) {
            let items: Vec<_> = pairs.iter().enumerate()
                .map(|(i, (p, g))| (i.to_string(), confusion(p, g).unwrap()))
                .collect();
            let sum = items.iter().fold(ConfusionCounts::default(), |a, (_, c)| a + *c);
            let r = MetricReport::from_counts(items).unwrap();
            prop_assert_eq!(r.pooled, compute_metrics(&sum).unwrap());
        }

        #[test]
        fn raising_threshold_is_monotone(v in prop::collection::vec(0.0f64..=1.0, 32), t1 in 0.01f64..0.99, dt in 0.0f64..0.5) {
            let t2 = (t1 + dt).min(0.999);
            let x = Tensor::new(vec![32], v).unwrap();
            let (a, b) = (binarize(&x, t1).unwrap(), binarize(&x, t2).unwrap());
            prop_assert!(a.iter().zip(&b).all(|(&lo, &hi)| hi <= lo));
        }
    }
}

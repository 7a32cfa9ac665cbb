//! Segmentation and detection scores, plus the difference-threshold baseline.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::types::{ImagePair, PixelLabeling, RoiMask};

/// Pixel counts with "change" as the positive class, in-ROI pixels only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// Pixels left out by the ROI.
    pub excluded: u64,
}

impl Confusion {
    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.excluded += other.excluded;
    }

    /// IoU of the change class; 1 when the class is absent from both maps.
    pub fn change_iou(&self) -> f64 {
        iou(self.tp, self.fp + self.fn_)
    }

    /// IoU of the background class, same vacuous rule.
    pub fn background_iou(&self) -> f64 {
        iou(self.tn, self.fp + self.fn_)
    }

    pub fn score(&self) -> SegScore {
        let iou = [self.background_iou(), self.change_iou()];
        SegScore {
            iou,
            miou: 0.5 * (iou[0] + iou[1]),
            counts: *self,
        }
    }
}

fn iou(inter: u64, disagree: u64) -> f64 {
    let union = inter + disagree;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    /// `[background, change]`.
    pub iou: [f64; 2],
    pub miou: f64,
    pub counts: Confusion,
}

pub fn confusion(pred: &PixelLabeling, gt: &PixelLabeling, roi: Option<&RoiMask>) -> Result<Confusion> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(shape_err(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if let Some(r) = roi {
        if r.width() != gt.width() || r.height() != gt.height() {
            return Err(shape_err("ROI dimensions differ from the ground truth"));
        }
    }
    let mut c = Confusion::default();
    for (j, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
        if roi.is_some_and(|r| !r.is_inside(j)) {
            c.excluded += 1;
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn miou(pred: &PixelLabeling, gt: &PixelLabeling, roi: Option<&RoiMask>) -> Result<SegScore> {
    Ok(confusion(pred, gt, roi)?.score())
}

/// Corpus scores: counts pooled over all images, and the mean of per-image mIOUs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CorpusSeg {
    pub pooled: Confusion,
    miou_sum: f64,
    n: usize,
}

impl CorpusSeg {
    pub fn push(&mut self, c: &Confusion) {
        self.pooled.add(c);
        self.miou_sum += c.score().miou;
        self.n += 1;
    }

    pub fn pooled_score(&self) -> SegScore {
        self.pooled.score()
    }

    pub fn mean_per_image_miou(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            self.miou_sum / self.n as f64
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Precision-recall point reached after admitting every score `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetScore {
    pub ap: f64,
    pub accuracy: f64,
    /// Ordered by decreasing threshold.
    pub curve: Vec<PrPoint>,
}

/// Step-curve precision-recall points in ranking order (score descending, ties by index).
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(shape_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(domain_err("average precision needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    Ok(order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            tp += labels[i] as usize;
            PrPoint {
                threshold: scores[i],
                precision: tp as f64 / (rank + 1) as f64,
                recall: tp as f64 / positives as f64,
            }
        })
        .collect())
}

/// `sum_k (R_k - R_{k-1}) P_k` over the ranking.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in &curve {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    Ok(ap)
}

pub fn accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    if preds.is_empty() {
        return Err(domain_err("accuracy of an empty set"));
    }
    if preds.len() != labels.len() {
        return Err(shape_err(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// AP, accuracy at the 0.5 boundary, and the curve.
pub fn detection_score(scores: &[f64], labels: &[bool]) -> Result<DetScore> {
    let curve = pr_curve(scores, labels)?;
    let ap = average_precision(scores, labels)?;
    let preds: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
    Ok(DetScore {
        ap,
        accuracy: accuracy(&preds, labels)?,
        curve,
    })
}

/// Change wherever the color difference exceeds `t`.
pub fn difference_threshold_baseline(pair: &ImagePair, t: f64) -> PixelLabeling {
    let labels = pair.difference_map().iter().map(|&d| d > t).collect();
    PixelLabeling::new(pair.width(), pair.height(), labels).expect("difference map matches the pair")
}

/// The default threshold sweep for the baseline: 0.025, 0.05, .., 0.5.
pub fn dt_thresholds() -> Vec<f64> {
    (1..=20).map(|k| 0.025 * k as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RgbImage;
    use proptest::prelude::*;

    fn lab(w: usize, h: usize, bits: &[u8]) -> PixelLabeling {
        PixelLabeling::from_u8(w, h, bits).unwrap()
    }

    #[test]
    fn perfect_and_inverted() {
        let gt = lab(2, 2, &[1, 0, 0, 1]);
        assert_eq!(miou(&gt, &gt, None).unwrap().miou, 1.0);
        assert_eq!(miou(&gt.complement(), &gt, None).unwrap().miou, 0.0);
    }

    #[test]
    fn half_square_hand_count() {
        // 4x4 ground-truth square of 4 pixels, prediction covers 2 of them
        let gt = lab(4, 4, &[0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0]);
        let pred = lab(4, 4, &[0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let s = miou(&pred, &gt, None).unwrap();
        assert_eq!(s.iou[1], 0.5);
        assert_eq!(s.iou[0], 12.0 / 14.0);
        assert_eq!(s.miou, 0.5 * (0.5 + 12.0 / 14.0));
    }

    #[test]
    fn roi_excludes_pixels() {
        let gt = lab(2, 2, &[1, 0, 0, 0]);
        let pred = lab(2, 2, &[1, 1, 0, 0]);
        let roi = RoiMask::new(2, 2, vec![true, false, true, true]).unwrap();
        let s = miou(&pred, &gt, Some(&roi)).unwrap();
        assert_eq!(s.miou, 1.0);
        assert_eq!(s.counts.excluded, 1);
    }

    #[test]
    fn vacuous_change_class() {
        let z = PixelLabeling::zeros(3, 3);
        let s = miou(&z, &z, None).unwrap();
        assert_eq!(s.iou, [1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(miou(&PixelLabeling::zeros(2, 3), &PixelLabeling::zeros(3, 2), None).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap(),
            0.25
        );
        assert!(average_precision(&[0.3, 0.2], &[false, false]).is_err());
        let scores = [0.9, 0.7, 0.6, 0.2];
        let labels = [true, false, true, false];
        let up = average_precision(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert!(average_precision(&neg, &labels).unwrap() < up);
        assert!((up - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(accuracy(&[true, true], &[true, false]).unwrap(), 0.5);
        assert_eq!(
            accuracy(&[true, true, false, false], &[true, true, false, true]).unwrap(),
            0.75
        );
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn dt_boundaries() {
        let a = RgbImage::new(2, 1, vec![[0.0; 3], [0.5; 3]]).unwrap();
        let b = RgbImage::new(2, 1, vec![[1.0; 3], [0.5, 0.5, 0.6]]).unwrap();
        let pair = ImagePair::new("d", a, b).unwrap();
        assert_eq!(difference_threshold_baseline(&pair, 3f64.sqrt()).count_foreground(), 0);
        assert_eq!(difference_threshold_baseline(&pair, 0.0).count_foreground(), 2);
        assert_eq!(dt_thresholds().len(), 20);
    }

    #[test]
    fn dt_recovers_clean_rectangle() {
        let a = RgbImage::filled(8, 8, [0.4, 0.5, 0.6]).unwrap();
        let mut px = a.pixels().to_vec();
        let mut mask = vec![false; 64];
        for r in 2..5 {
            for c in 1..6 {
                px[r * 8 + c] = [0.8, 0.2, 0.6];
                mask[r * 8 + c] = true;
            }
        }
        let pair = ImagePair::new("r", a, RgbImage::new(8, 8, px).unwrap()).unwrap();
        assert_eq!(
            difference_threshold_baseline(&pair, 0.1),
            PixelLabeling::new(8, 8, mask).unwrap()
        );
    }

    fn bits(n: usize) -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(any::<bool>(), n)
    }

    proptest! {
        #[test]
        fn relabeling_symmetry(p in bits(20), g in bits(20)) {
            let pred = PixelLabeling::new(5, 4, p).unwrap();
            let gt = PixelLabeling::new(5, 4, g).unwrap();
            let a = miou(&pred, &gt, None).unwrap().miou;
            let b = miou(&pred.complement(), &gt.complement(), None).unwrap().miou;
            prop_assert!((a - b).abs() < 1e-15);
        }

        #[test]
        fn ap_invariant_to_monotone_maps(scores in prop::collection::vec(-3.0f64..3.0, 12), l in bits(12)) {
            prop_assume!(l.iter().any(|&x| x));
            let a = average_precision(&scores, &l).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(a, average_precision(&mapped, &l).unwrap());
        }

        #[test]
        fn false_positive_never_helps(p in bits(16), g in bits(16), j in 0usize..16) {
            let gt = PixelLabeling::new(4, 4, g.clone()).unwrap();
            prop_assume!(!g[j]);
            let pred = PixelLabeling::new(4, 4, p).unwrap();
            let mut more = pred.clone();
            more.set(j, true);
            prop_assert!(miou(&more, &gt, None).unwrap().iou[1] <= miou(&pred, &gt, None).unwrap().iou[1]);
        }
    }
}

//! Segmentation quality: class confusion counts and mean intersection over union.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::pool::ClassId;

/// `counts[gt * C + pred]`, accumulated over any number of images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Records one pixel. Unlabeled ground truth is ignored.
    #[inline]
    pub fn add(&mut self, gt: ClassId, pred: ClassId) {
        if gt.is_labeled() {
            self.counts[gt.index() * self.num_classes + pred.index()] += 1;
        }
    }

    pub fn add_maps(&mut self, gt: &Array2<ClassId>, pred: &Array2<ClassId>) -> Result<()> {
        if gt.dim() != pred.dim() {
            return Err(Error::Data(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dim(),
                gt.dim()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            self.add(g, p);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU; `None` for classes absent from both prediction and ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt_total: u64 = (0..c).map(|p| self.counts[k * c + p]).sum();
                let pred_total: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union; 0 when nothing was recorded.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// mIoU accumulated over a whole split.
pub fn compute_miou(predictions: &[Array2<ClassId>], gt: &[&Array2<ClassId>], num_classes: usize) -> Result<f64> {
    if predictions.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth maps",
            predictions.len(),
            gt.len()
        )));
    }
    let mut confusion = Confusion::new(num_classes);
    for (p, g) in predictions.iter().zip(gt) {
        confusion.add_maps(g, p)?;
    }
    Ok(confusion.miou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const A: ClassId = ClassId(0);
    const B: ClassId = ClassId(1);

    #[test]
    fn perfect_and_disjoint() {
        let gt = array![[A, B], [B, A]];
        assert_eq!(compute_miou(&[gt.clone()], &[&gt], 2).unwrap(), 1.0);
        let inverted = gt.mapv(|c| ClassId(1 - c.0));
        assert_eq!(compute_miou(&[inverted], &[&gt], 2).unwrap(), 0.0);
    }

    #[test]
    fn two_class_hand_count() {
        // IoU_A = 1 / 2, IoU_B = 2 / 3
        let gt = array![[A, A], [B, B]];
        let pred = array![[A, B], [B, B]];
        let m = compute_miou(&[pred], &[&gt], 2).unwrap();
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = array![[A, A]];
        assert_eq!(compute_miou(&[gt.clone()], &[&gt], 5).unwrap(), 1.0);
        let unl = array![[ClassId::UNLABELED, A]];
        assert_eq!(compute_miou(&[array![[B, A]]], &[&unl], 2).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let gt = array![[A, A]];
        assert!(compute_miou(&[array![[A]]], &[&gt], 2).is_err());
        assert!(compute_miou(&[], &[&gt], 2).is_err());
    }
}

//! Anchor-free classification and box-regression targets.

use crate::geometry::{cell_center, BBox};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Labels<S> {
    /// `H×W×1`, 1 on cells whose centers fall inside the box.
    pub cls_target: Tensor<S>,
    /// `H×W×4` distances (left, top, right, bottom) from each positive
    /// cell center to the box sides, in cells. Zero elsewhere.
    pub reg_target: Tensor<S>,
    /// `H×W×1`; cells where the regression target applies.
    pub valid_mask: Tensor<S>,
}

impl<S: Scalar> Labels<S> {
    pub fn positives(&self) -> usize {
        self.cls_target.data().iter().filter(|&&x| x > S::zero()).count()
    }

    pub fn valid_cells(&self) -> Vec<usize> {
        self.valid_mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &x)| x > S::zero())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Labels for a target box on an `h×w` grid.
pub fn make_labels<S: Scalar>(gt_box: &BBox, h: usize, w: usize) -> Labels<S> {
    let mut cls = vec![S::zero(); h * w];
    let mut reg = vec![S::zero(); h * w * 4];
    for cell in gt_box.cells_inside(h, w) {
        let (cx, cy) = cell_center(cell / w, cell % w);
        cls[cell] = S::one();
        let d = [cx - gt_box.x0, cy - gt_box.y0, gt_box.x1 - cx, gt_box.y1 - cy];
        for (k, v) in d.into_iter().enumerate() {
            reg[cell * 4 + k] = S::lit(v);
        }
    }
    let cls_target = Tensor::from_vec(&[h, w, 1], cls).expect("label shape");
    Labels {
        valid_mask: cls_target.clone(),
        cls_target,
        reg_target: Tensor::from_vec(&[h, w, 4], reg).expect("label shape"),
    }
}

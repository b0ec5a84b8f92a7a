use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};

/// Axis-aligned square: top-left `(a, b)` and side `w`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub a: f64,
    pub b: f64,
    pub w: f64,
}

impl Box {
    pub const fn new(a: f64, b: f64, w: f64) -> Self {
        Box { a, b, w }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64) -> Self {
        Box::new(cx - 0.5 * w, cy - 0.5 * w, w)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.a + 0.5 * self.w, self.b + 0.5 * self.w)
    }

    pub fn area(&self) -> f64 {
        self.w * self.w
    }

    pub fn scaled(&self, factor: f64) -> Box {
        Box::new(self.a * factor, self.b * factor, self.w * factor)
    }
}

/// Bounding box regression target, dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub t_w: f64,
    pub t_a: f64,
    pub t_b: f64,
}

impl RegressionTarget {
    pub const IDENTITY: RegressionTarget = RegressionTarget {
        t_w: 1.0,
        t_a: 0.0,
        t_b: 0.0,
    };

    pub fn to_array(self) -> [f64; 3] {
        [self.t_w, self.t_a, self.t_b]
    }
}

/// Target that moves `bx` onto `gt`:
/// `t_w = w*/w`, `t_a = (a* + w*/2 - a - w/2) / w*`, `t_b` likewise.
pub fn bbox_targets(bx: Box, gt: Box) -> Result<RegressionTarget> {
    if !(bx.w > 0.0 && gt.w > 0.0) {
        return Err(PcnError::InvalidBox(format!(
            "widths must be positive, got {} and {}",
            bx.w, gt.w
        )));
    }
    Ok(RegressionTarget {
        t_w: gt.w / bx.w,
        t_a: (gt.a + 0.5 * gt.w - bx.a - 0.5 * bx.w) / gt.w,
        t_b: (gt.b + 0.5 * gt.w - bx.b - 0.5 * bx.w) / gt.w,
    })
}

/// Inverse of [`bbox_targets`].
pub fn bbox_apply(bx: Box, t: RegressionTarget) -> Result<Box> {
    if !(bx.w > 0.0 && t.t_w > 0.0) {
        return Err(PcnError::InvalidBox(format!(
            "box width {} and t_w {} must be positive",
            bx.w, t.t_w
        )));
    }
    let w = t.t_w * bx.w;
    Ok(Box::new(
        bx.a + 0.5 * bx.w - 0.5 * w + t.t_a * w,
        bx.b + 0.5 * bx.w - 0.5 * w + t.t_b * w,
        w,
    ))
}

pub fn iou(x: &Box, y: &Box) -> f64 {
    let ix = (x.a + x.w).min(y.a + y.w) - x.a.max(y.a);
    let iy = (x.b + x.w).min(y.b + y.w) - x.b.max(y.b);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (x.area() + y.area() - inter)
}

/// Greedy NMS. Returns indices of the kept boxes by descending score; equal
/// scores keep their input order.
pub fn nms_indices(boxes: &[Box], scores: &[f64], thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(cands: &[(Box, f64)], thresh: f64) -> Vec<(Box, f64)> {
    let boxes: Vec<Box> = cands.iter().map(|c| c.0).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.1).collect();
    nms_indices(&boxes, &scores, thresh)
        .into_iter()
        .map(|i| cands[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_identity() {
        let b = Box::new(3.0, -2.0, 7.0);
        assert_eq!(bbox_targets(b, b).unwrap(), RegressionTarget::IDENTITY);
    }

    #[test]
    fn targets_hand_checked() {
        let t = bbox_targets(Box::new(0.0, 0.0, 10.0), Box::new(1.0, 1.0, 12.0)).unwrap();
        assert!((t.t_w - 1.2).abs() < 1e-12);
        assert!((t.t_a - 1.0 / 6.0).abs() < 1e-12);
        assert!((t.t_b - 1.0 / 6.0).abs() < 1e-12);
        let back = bbox_apply(Box::new(0.0, 0.0, 10.0), t).unwrap();
        assert!((back.a - 1.0).abs() < 1e-12 && (back.w - 12.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_widths_rejected() {
        assert!(bbox_targets(Box::new(0.0, 0.0, 0.0), Box::new(0.0, 0.0, 1.0)).is_err());
        assert!(bbox_targets(Box::new(0.0, 0.0, 1.0), Box::new(0.0, 0.0, -1.0)).is_err());
        let t = RegressionTarget { t_w: 0.0, t_a: 0.0, t_b: 0.0 };
        assert!(bbox_apply(Box::new(0.0, 0.0, 1.0), t).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = Box::new(0.0, 0.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Box::new(5.0, 5.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &Box::new(2.0, 0.0, 2.0)), 0.0);
        assert!((iou(&a, &Box::new(1.0, 1.0, 2.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn nms_basic() {
        let b = Box::new(0.0, 0.0, 10.0);
        assert_eq!(nms(&[(b, 0.3)], 0.5), vec![(b, 0.3)]);
        let kept = nms(&[(b, 0.8), (b, 0.9)], 0.3);
        assert_eq!(kept, vec![(b, 0.9)]);
        let far = Box::new(50.0, 0.0, 10.0);
        let kept = nms(&[(b, 0.5), (far, 0.7), (b, 0.5)], 0.3);
        assert_eq!(kept, vec![(far, 0.7), (b, 0.5)]);
        assert_eq!(nms_indices(&[b, b], &[0.5, 0.5], 0.3), vec![0]);
    }
}

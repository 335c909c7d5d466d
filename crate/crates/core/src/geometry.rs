//! Boxes, IoU/GIoU with analytic gradients, and greedy NMS.
//!
//! Boxes live in normalized image coordinates in center form. Overlap math is
//! carried out in f64 and rounded to f32 at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center form, normalized to the image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub const fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f32; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn max_side(&self) -> f32 {
        self.w.max(self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w >= 0.0
            && self.h >= 0.0
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Whether `(x, y)` lies inside, half-open on the right and bottom edges.
    pub fn contains_half_open(&self, x: f32, y: f32) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x < x2 && y >= y1 && y < y2
    }

    pub fn flip_h(&self) -> Self {
        Self::new(1.0 - self.cx, self.cy, self.w, self.h)
    }

    pub fn flip_v(&self) -> Self {
        Self::new(self.cx, 1.0 - self.cy, self.w, self.h)
    }
}

fn corners64(b: &BBox) -> [f64; 4] {
    let (cx, cy, w, h) = (b.cx as f64, b.cy as f64, b.w as f64, b.h as f64);
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

struct Overlap {
    inter: f64,
    union: f64,
    enclose: f64,
}

fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let [ax1, ay1, ax2, ay2] = corners64(a);
    let [bx1, by1, bx2, by2] = corners64(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    let enclose = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Overlap {
        inter,
        union,
        enclose,
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let o = overlap(a, b);
    if o.union <= 0.0 {
        0.0
    } else {
        (o.inter / o.union) as f32
    }
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f32 {
    let o = overlap(a, b);
    let iou = if o.union <= 0.0 { 0.0 } else { o.inter / o.union };
    if o.enclose <= 0.0 {
        return iou as f32;
    }
    (iou - (o.enclose - o.union) / o.enclose) as f32
}

/// `1 - GIoU(pred, gt)` and its gradient with respect to `(cx, cy, w, h)` of `pred`.
///
/// Where a min/max is tied between the two boxes the prediction's edge is
/// taken as the active one, which makes the gradient vanish at `pred == gt`.
pub fn giou_loss_and_grad(pred: &BBox, gt: &BBox) -> Result<(f32, [f32; 4])> {
    if !(pred.w > 0.0 && pred.h > 0.0) || !pred.is_valid() {
        return Err(Error::DegenerateBox(format!("prediction {pred:?}")));
    }
    let [px1, py1, px2, py2] = corners64(pred);
    let [gx1, gy1, gx2, gy2] = corners64(gt);

    let ix1 = px1.max(gx1);
    let iy1 = py1.max(gy1);
    let ix2 = px2.min(gx2);
    let iy2 = py2.min(gy2);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;

    let area_p = (px2 - px1) * (py2 - py1);
    let area_g = (gx2 - gx1) * (gy2 - gy1);
    let union = area_p + area_g - inter;

    let ex1 = px1.min(gx1);
    let ey1 = py1.min(gy1);
    let ex2 = px2.max(gx2);
    let ey2 = py2.max(gy2);
    let ew = ex2 - ex1;
    let eh = ey2 - ey1;
    let enclose = ew * eh;

    let giou = inter / union - 1.0 + union / enclose;
    let loss = 1.0 - giou;

    // Partial derivatives of the intersection and enclosure extents w.r.t.
    // the prediction's corners (x1, y1, x2, y2).
    let w_active = iw_raw > 0.0;
    let h_active = ih_raw > 0.0;
    let d_iw = [
        if w_active && px1 >= gx1 { -1.0 } else { 0.0 },
        0.0,
        if w_active && px2 <= gx2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_ih = [
        0.0,
        if h_active && py1 >= gy1 { -1.0 } else { 0.0 },
        0.0,
        if h_active && py2 <= gy2 { 1.0 } else { 0.0 },
    ];
    let d_ew = [
        if px1 <= gx1 { -1.0 } else { 0.0 },
        0.0,
        if px2 >= gx2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_eh = [
        0.0,
        if py1 <= gy1 { -1.0 } else { 0.0 },
        0.0,
        if py2 >= gy2 { 1.0 } else { 0.0 },
    ];
    let pw = px2 - px1;
    let ph = py2 - py1;
    let d_area_p = [-ph, -pw, ph, pw];

    let mut d_corner = [0.0f64; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area_p[k] - d_inter;
        let d_enclose = d_ew[k] * eh + ew * d_eh[k];
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclose - union * d_enclose) / (enclose * enclose);
        d_corner[k] = -(d_iou + d_ratio);
    }

    // x1 = cx - w/2, x2 = cx + w/2.
    let grad = [
        (d_corner[0] + d_corner[2]) as f32,
        (d_corner[1] + d_corner[3]) as f32,
        (0.5 * (d_corner[2] - d_corner[0])) as f32,
        (0.5 * (d_corner[3] - d_corner[1])) as f32,
    ];
    Ok((loss as f32, grad))
}

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score (ties by ascending index) and keeps a box
/// unless its IoU with an already kept box exceeds `iou_threshold`. Returns
/// kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f32], iou_threshold: f32) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Shape(format!(
            "nms: {} boxes vs {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let order = argsort_desc(scores);
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[idx]) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending score, ties by ascending index.
pub fn argsort_desc(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

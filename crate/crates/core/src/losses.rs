//! Query weighting and the per-patch anchor loss.
//!
//! Positive and negative weights come from a sigmoid normalization of
//! score and IoU:
//!
//! ```text
//! norm(x1, x2) = sigmoid((x1 * x2 - 1/3) * 4.5) / sigmoid(3)
//! w_pos = norm(s^g1, iou^g2)
//! w_neg = norm(s^g1, p_neg(iou^g2)) - sigmoid(-1.5)
//! ```
//!
//! Weights are computed from detached score/IoU values; no gradient flows
//! through them.

use serde::{Deserialize, Serialize};

use crate::assign::Assignment;
use crate::config::{LossConfig, PNegForm, WeightConfig};
use crate::error::Result;
use crate::geometry::{giou_loss_and_grad, iou, BBox};
use crate::predictor::AnchorOut;

/// Clamp applied to scores before taking logarithms.
pub const SCORE_EPS: f32 = 1e-7;

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn norm_weight(x1: f32, x2: f32) -> f32 {
    let x = x1 as f64 * x2 as f64;
    (sigmoid64((x - 1.0 / 3.0) * 4.5) / sigmoid64(3.0)) as f32
}

fn p_neg(form: PNegForm, t: f32) -> f32 {
    match form {
        PNegForm::LinearComplement => 1.0 - t,
    }
}

pub fn pos_weight(score: f32, iou: f32, cfg: &WeightConfig) -> f32 {
    norm_weight(score.powf(cfg.gamma1), iou.powf(cfg.gamma2))
}

pub fn neg_weight(score: f32, iou: f32, cfg: &WeightConfig) -> f32 {
    let x2 = p_neg(cfg.p_neg, iou.powf(cfg.gamma2));
    (norm_weight(score.powf(cfg.gamma1), x2) as f64 - sigmoid64(-1.5)) as f32
}

/// Lower bound of the positive weight, `sigmoid(-1.5) / sigmoid(3)`.
pub fn min_pos_weight() -> f64 {
    sigmoid64(-1.5) / sigmoid64(3.0)
}

/// Upper bound of the negative weight, `1 - sigmoid(-1.5)`.
pub fn max_neg_weight() -> f64 {
    1.0 - sigmoid64(-1.5)
}

/// Lower bound of the negative weight.
pub fn min_neg_weight() -> f64 {
    min_pos_weight() - sigmoid64(-1.5)
}

fn l1_and_grad(pred: &BBox, gt: &BBox) -> (f32, [f32; 4]) {
    let p = pred.as_array();
    let g = gt.as_array();
    let mut v = 0.0f32;
    let mut d = [0.0f32; 4];
    for k in 0..4 {
        let diff = p[k] - g[k];
        v += diff.abs();
        d[k] = if diff > 0.0 {
            0.25
        } else if diff < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    (0.25 * v, d)
}

/// Mean absolute coordinate difference.
pub fn l1_distance(a: &BBox, b: &BBox) -> f32 {
    l1_and_grad(a, b).0
}

/// Weighted regression loss `l1 * w * L1 + l_giou * w * (1 - GIoU)` and its gradient.
pub fn box_loss(pred: &BBox, gt: &BBox, w_pos: f32, cfg: &LossConfig) -> Result<(f32, [f32; 4])> {
    let (l1, d_l1) = l1_and_grad(pred, gt);
    let (lg, d_lg) = giou_loss_and_grad(pred, gt)?;
    let a = cfg.lambda_l1 * w_pos;
    let b = cfg.lambda_giou * w_pos;
    let mut grad = [0.0f32; 4];
    for k in 0..4 {
        grad[k] = a * d_l1[k] + b * d_lg[k];
    }
    Ok((a * l1 + b * lg, grad))
}

/// Positive classification loss `-l_cls * (w_pos log s + w_neg log(1 - s))`
/// and its gradient w.r.t. the score logit.
pub fn cls_loss_positive(score: f32, w_pos: f32, w_neg: f32, cfg: &LossConfig) -> (f32, f32) {
    let s = score.clamp(SCORE_EPS, 1.0 - SCORE_EPS) as f64;
    let (wp, wn) = (w_pos as f64, w_neg as f64);
    let lam = cfg.lambda_cls as f64;
    let value = -lam * (wp * s.ln() + wn * (1.0 - s).ln());
    let grad = -lam * (wp * (1.0 - s) - wn * s);
    (value as f32, grad as f32)
}

/// Sigmoid focal loss for the background outcome,
/// `l_cls * (1 - alpha) * s^gamma * -log(1 - s)`, with its logit gradient.
pub fn cls_loss_negative(score: f32, cfg: &LossConfig) -> (f32, f32) {
    let s = score.clamp(SCORE_EPS, 1.0 - SCORE_EPS) as f64;
    let g = cfg.focal_gamma as f64;
    let scale = cfg.lambda_cls as f64 * (1.0 - cfg.focal_alpha as f64);
    let nll = -(1.0 - s).ln();
    let value = scale * s.powf(g) * nll;
    // d/dz with ds/dz = s (1 - s).
    let grad = scale * (g * s.powf(g) * (1.0 - s) * nll + s.powf(g + 1.0));
    (value as f32, grad as f32)
}

/// Per-patch loss components, already normalized by the matched count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Weighted L1 term (before the L1 coefficient).
    pub l1: f64,
    /// Weighted `1 - GIoU` term (before the GIoU coefficient).
    pub giou: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    /// `lambda_an * (l1_coef * l1 + giou_coef * giou + cls_coef * (cls_pos + cls_neg))`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.l1 += scale * other.l1;
        self.giou += scale * other.giou;
        self.cls_pos += scale * other.cls_pos;
        self.cls_neg += scale * other.cls_neg;
        self.total += scale * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.l1, self.giou, self.cls_pos, self.cls_neg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct AnchorLoss {
    pub breakdown: LossBreakdown,
    /// Gradient of `breakdown.total` w.r.t. each anchor's five logits.
    pub grads: Vec<[f32; 5]>,
    pub matched: usize,
}

/// Loss of one patch: matched anchors take the weighted box loss plus the
/// soft-label positive classification loss (IoU as the positive weight);
/// the rest take the focal negative loss. Sums are divided by
/// `max(1, matched)` and scaled by `lambda_anchor`.
pub fn anchor_loss(
    anchors: &[AnchorOut],
    targets: &[BBox],
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<AnchorLoss> {
    let matched = assignment.pairs.len();
    let norm = 1.0 / matched.max(1) as f64;
    let mut is_pos = vec![None; anchors.len()];
    for &(a, t) in &assignment.pairs {
        is_pos[a] = Some(t);
    }

    let mut bd = LossBreakdown::default();
    let mut grads = Vec::with_capacity(anchors.len());
    let lam_an = cfg.lambda_anchor as f64;
    // Per-term scale applied to raw gradients so they match `total`.
    let gscale = (lam_an * norm) as f32;
    for (an, pos) in anchors.iter().zip(&is_pos) {
        match *pos {
            Some(t) => {
                let gt = &targets[t];
                let overlap = iou(&an.bbox, gt);
                let w_pos = pos_weight(an.score, overlap, &cfg.weights);
                let w_neg = neg_weight(an.score, overlap, &cfg.weights);
                let (l1, _) = l1_and_grad(&an.bbox, gt);
                let (lg, _) = giou_loss_and_grad(&an.bbox, gt)?;
                let (_, d_box) = box_loss(&an.bbox, gt, w_pos, cfg)?;
                let (cls, d_cls) = cls_loss_positive(an.score, overlap, w_neg, cfg);
                bd.l1 += (w_pos * l1) as f64 * norm;
                bd.giou += (w_pos * lg) as f64 * norm;
                bd.cls_pos += cls as f64 / cfg.lambda_cls as f64 * norm;
                let g = an.chain(d_box, d_cls);
                grads.push(g.map(|v| v * gscale));
            }
            None => {
                let (v, d) = cls_loss_negative(an.score, cfg);
                bd.cls_neg += v as f64 / cfg.lambda_cls as f64 * norm;
                grads.push([0.0, 0.0, 0.0, 0.0, d * gscale]);
            }
        }
    }
    bd.total = lam_an
        * (cfg.lambda_l1 as f64 * bd.l1
            + cfg.lambda_giou as f64 * bd.giou
            + cfg.lambda_cls as f64 * (bd.cls_pos + bd.cls_neg));
    Ok(AnchorLoss {
        breakdown: bd,
        grads,
        matched,
    })
}

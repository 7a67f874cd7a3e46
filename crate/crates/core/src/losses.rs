//! Detection losses: CIoU box regression, objectness and classification
//! binary cross-entropy, target assignment and the γ sparsity penalty.
//!
//! Boxes and losses are computed in f64; gradients are analytic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{decode_box, BBox, GroundTruth, HeadConfig};
use crate::nnops::{sigmoid, Tensor};

/// Predictions are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Anchors matching a GT shape better than this are not penalised as background.
pub const IGNORE_IOU: f64 = 0.7;
pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("ground truth box has non-positive area ({w}x{h})")]
    DegenerateGt { w: f64, h: f64 },
    #[error("head {head}: expected {expected} channels, got {actual}")]
    ChannelMismatch {
        head: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{heads} heads but {outputs} outputs")]
    HeadCount { heads: usize, outputs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiouTerms {
    pub iou: f64,
    pub rho2: f64,
    pub c2: f64,
    pub v: f64,
    pub alpha: f64,
    pub loss: f64,
}

/// Loss terms plus d(loss)/d(cx, cy, w, h) of the prediction, α held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiouResult {
    pub terms: CiouTerms,
    pub grad: [f64; 4],
}

struct Geometry {
    inter: f64,
    union: f64,
    rho2: f64,
    c2: f64,
    v: f64,
    // d/d(x1, y1, x2, y2) of the prediction
    d_inter: [f64; 4],
    d_c2: [f64; 4],
}

fn geometry(p: &BBox, g: &BBox) -> Geometry {
    let (px1, py1, px2, py2) = p.corners();
    let (gx1, gy1, gx2, gy2) = g.corners();

    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let mut d_inter = [0.0; 4];
    let inter = if iw > 0.0 && ih > 0.0 {
        if px1 > gx1 {
            d_inter[0] = -ih;
        }
        if px2 < gx2 {
            d_inter[2] = ih;
        }
        if py1 > gy1 {
            d_inter[1] = -iw;
        }
        if py2 < gy2 {
            d_inter[3] = iw;
        }
        iw * ih
    } else {
        0.0
    };
    let union = p.w * p.h + g.w * g.h - inter;

    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let mut d_c2 = [0.0; 4];
    if px1 < gx1 {
        d_c2[0] = -2.0 * cw;
    }
    if px2 > gx2 {
        d_c2[2] = 2.0 * cw;
    }
    if py1 < gy1 {
        d_c2[1] = -2.0 * ch;
    }
    if py2 > gy2 {
        d_c2[3] = 2.0 * ch;
    }

    let rho2 = (p.cx - g.cx).powi(2) + (p.cy - g.cy).powi(2);
    let v = 4.0 / (PI * PI) * ((g.w / g.h).atan() - (p.w / p.h).atan()).powi(2);
    Geometry {
        inter,
        union,
        rho2,
        c2: cw * cw + ch * ch,
        v,
        d_inter,
        d_c2,
    }
}

/// Corner-space gradient to center-form gradient.
fn corners_to_center(d: [f64; 4]) -> [f64; 4] {
    [d[0] + d[2], d[1] + d[3], (d[2] - d[0]) / 2.0, (d[3] - d[1]) / 2.0]
}

fn check_gt(gt: &BBox) -> Result<(), LossError> {
    if gt.w > 0.0 && gt.h > 0.0 {
        Ok(())
    } else {
        Err(LossError::DegenerateGt { w: gt.w, h: gt.h })
    }
}

/// CIoU loss `1 - IoU + ρ²/c² + αv` and its gradient w.r.t. the prediction.
/// The prediction must have positive width and height for the gradient to be
/// meaningful.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<CiouResult, LossError> {
    check_gt(gt)?;
    let geo = geometry(pred, gt);
    let iou = if geo.union > 0.0 { geo.inter / geo.union } else { 0.0 };
    let alpha = if geo.v == 0.0 {
        0.0
    } else {
        geo.v / ((1.0 - iou) + geo.v)
    };
    let loss = 1.0 - iou + geo.rho2 / geo.c2 + alpha * geo.v;
    let terms = CiouTerms {
        iou,
        rho2: geo.rho2,
        c2: geo.c2,
        v: geo.v,
        alpha,
        loss,
    };

    // -dIoU: IoU = I/U with U = wh + gwgh - I
    let u = geo.union;
    let d_iou_corner = geo.d_inter.map(|d| d * (u + geo.inter) / (u * u));
    let mut grad = corners_to_center(d_iou_corner).map(|x| -x);
    // area term of the union: dU/dw = h, dU/dh = w
    grad[2] += geo.inter * pred.h / (u * u);
    grad[3] += geo.inter * pred.w / (u * u);

    // ρ²/c²
    let c2 = geo.c2;
    let d_c2 = corners_to_center(geo.d_c2);
    grad[0] += 2.0 * (pred.cx - gt.cx) / c2;
    grad[1] += 2.0 * (pred.cy - gt.cy) / c2;
    for k in 0..4 {
        grad[k] -= geo.rho2 * d_c2[k] / (c2 * c2);
    }

    // αv with α fixed; d atan(w/h) = (h dw - w dh) / (w² + h²)
    if alpha > 0.0 {
        let diff = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
        let dv_datan = -8.0 / (PI * PI) * diff;
        let s = pred.w * pred.w + pred.h * pred.h;
        grad[2] += alpha * dv_datan * pred.h / s;
        grad[3] += alpha * dv_datan * (-pred.w) / s;
    }
    Ok(CiouResult { terms, grad })
}

/// The loss whose gradient [`ciou_loss`] reports: α frozen at `alpha`.
pub fn ciou_loss_fixed_alpha(pred: &BBox, gt: &BBox, alpha: f64) -> f64 {
    let geo = geometry(pred, gt);
    let iou = if geo.union > 0.0 { geo.inter / geo.union } else { 0.0 };
    1.0 - iou + geo.rho2 / geo.c2 + alpha * geo.v
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-[t ln p + (1-t) ln(1-p)]` with `p` clamped.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = clamp_prob(p);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// d bce / d p; zero where the clamp is active.
pub fn bce_grad(p: f64, t: f64) -> f64 {
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

/// Per-head training targets and the matching predictions.
///
/// Slot `s = (a * grid_h + i) * grid_w + j` for anchor `a` at row `i`,
/// column `j`; class arrays are indexed `s * classes + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    pub grid_w: usize,
    pub grid_h: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    pub obj_mask: Vec<bool>,
    pub noobj_mask: Vec<bool>,
    pub pred_conf: Vec<f64>,
    pub target_conf: Vec<f64>,
    pub pred_class: Vec<f64>,
    pub target_class: Vec<f64>,
}

impl LossInputs {
    /// All-background targets with predictions at 0.5.
    pub fn empty(grid_w: usize, grid_h: usize, boxes_per_cell: usize, classes: usize) -> Self {
        let n = grid_w * grid_h * boxes_per_cell;
        LossInputs {
            grid_w,
            grid_h,
            boxes_per_cell,
            classes,
            obj_mask: vec![false; n],
            noobj_mask: vec![true; n],
            pred_conf: vec![0.5; n],
            target_conf: vec![0.0; n],
            pred_class: vec![0.5; n * classes],
            target_class: vec![0.0; n * classes],
        }
    }

    pub fn slots(&self) -> usize {
        self.grid_w * self.grid_h * self.boxes_per_cell
    }

    pub fn slot(&self, anchor: usize, i: usize, j: usize) -> usize {
        (anchor * self.grid_h + i) * self.grid_w + j
    }
}

fn masked_bce(mask: &[bool], p: &[f64], t: &[f64]) -> f64 {
    mask.iter()
        .zip(p.iter().zip(t))
        .filter(|(m, _)| **m)
        .map(|(_, (&p, &t))| bce(p, t))
        .sum()
}

fn masked_bce_grad(mask: &[bool], p: &[f64], t: &[f64]) -> Vec<f64> {
    mask.iter()
        .zip(p.iter().zip(t))
        .map(|(&m, (&p, &t))| if m { bce_grad(p, t) } else { 0.0 })
        .collect()
}

pub fn obj_conf_loss(x: &LossInputs) -> f64 {
    masked_bce(&x.obj_mask, &x.pred_conf, &x.target_conf)
}

pub fn noobj_conf_loss(x: &LossInputs) -> f64 {
    masked_bce(&x.noobj_mask, &x.pred_conf, &x.target_conf)
}

/// d/d pred_conf.
pub fn obj_conf_grad(x: &LossInputs) -> Vec<f64> {
    masked_bce_grad(&x.obj_mask, &x.pred_conf, &x.target_conf)
}

pub fn noobj_conf_grad(x: &LossInputs) -> Vec<f64> {
    masked_bce_grad(&x.noobj_mask, &x.pred_conf, &x.target_conf)
}

fn class_mask(x: &LossInputs) -> Vec<bool> {
    x.obj_mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, x.classes))
        .collect()
}

pub fn class_loss(x: &LossInputs) -> f64 {
    masked_bce(&class_mask(x), &x.pred_class, &x.target_class)
}

/// d/d pred_class.
pub fn class_grad(x: &LossInputs) -> Vec<f64> {
    masked_bce_grad(&class_mask(x), &x.pred_class, &x.target_class)
}

/// Width/height IoU of two boxes sharing a center.
pub fn shape_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    let union = w * h + aw * ah - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// A slot responsible for a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub slot: usize,
    pub anchor: usize,
    pub cell: (usize, usize),
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub inputs: LossInputs,
    pub assigned: Vec<Assignment>,
}

fn center_cell(b: &BBox, gw: usize, gh: usize) -> (usize, usize) {
    let j = ((b.cx * gw as f64).floor().max(0.0) as usize).min(gw - 1);
    let i = ((b.cy * gh as f64).floor().max(0.0) as usize).min(gh - 1);
    (j, i)
}

fn anchor_ious(head: &HeadConfig, b: &BBox) -> Vec<f64> {
    let (w, h) = (b.w * head.net_w as f64, b.h * head.net_h as f64);
    head.anchors
        .iter()
        .map(|&(aw, ah)| shape_iou(w, h, f64::from(aw), f64::from(ah)))
        .collect()
}

/// Builds targets for one head. Every GT is given the free anchor with the
/// highest shape-IoU at the cell holding its center (ties go to the lower
/// anchor index; if every anchor of that cell is already taken by earlier
/// GTs the box gets no slot in this head). Anchors at a GT's center cell with
/// shape-IoU above [`IGNORE_IOU`] are removed from the background mask.
pub fn assign_targets(gts: &[GroundTruth], head: &HeadConfig, grid: (usize, usize)) -> Result<HeadTargets, LossError> {
    let (gw, gh) = grid;
    let na = head.anchors.len();
    let mut inputs = LossInputs::empty(gw, gh, na, head.classes);
    let mut assigned = Vec::new();
    for gt in gts {
        check_gt(&gt.bbox)?;
        let (j, i) = center_cell(&gt.bbox, gw, gh);
        let ious = anchor_ious(head, &gt.bbox);
        let mut order: Vec<usize> = (0..na).collect();
        order.sort_by(|&a, &b| ious[b].total_cmp(&ious[a]));
        for &a in &order {
            if ious[a] > IGNORE_IOU {
                let s = inputs.slot(a, i, j);
                inputs.noobj_mask[s] = false;
            }
        }
        if let Some(&a) = order.iter().find(|&&a| !inputs.obj_mask[inputs.slot(a, i, j)]) {
            let s = inputs.slot(a, i, j);
            inputs.obj_mask[s] = true;
            inputs.noobj_mask[s] = false;
            inputs.target_conf[s] = 1.0;
            if gt.class_id < head.classes {
                inputs.target_class[s * head.classes + gt.class_id] = 1.0;
            }
            assigned.push(Assignment {
                slot: s,
                anchor: a,
                cell: (j, i),
                gt: *gt,
            });
        }
    }
    Ok(HeadTargets { inputs, assigned })
}

/// L1 penalty on batch-norm scales of prunable layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub lambda: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig { lambda: DEFAULT_LAMBDA }
    }
}

pub fn sparsity_penalty<'a>(gammas: impl IntoIterator<Item = &'a f32>, lambda: f64) -> f64 {
    lambda * gammas.into_iter().map(|g| f64::from(g.abs())).sum::<f64>()
}

/// Subgradient `λ·sign(γ)`, zero at `γ = 0`.
pub fn sparsity_grad(gamma: f32, lambda: f64) -> f64 {
    if gamma > 0.0 {
        lambda
    } else if gamma < 0.0 {
        -lambda
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ciou: f64,
    pub obj: f64,
    pub noobj: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ciou: 1.0,
            obj: 1.0,
            noobj: 1.0,
            class: 1.0,
        }
    }
}

/// Per-term totals; `epoch` is filled in by the trainer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub ciou: f64,
    pub obj: f64,
    pub noobj: f64,
    pub class: f64,
    pub sparsity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.ciou += o.ciou;
        self.obj += o.obj;
        self.noobj += o.noobj;
        self.class += o.class;
        self.sparsity += o.sparsity;
        self.total += o.total;
    }

    pub fn scaled(mut self, k: f64) -> Self {
        self.ciou *= k;
        self.obj *= k;
        self.noobj *= k;
        self.class *= k;
        self.sparsity *= k;
        self.total *= k;
        self
    }

    fn recompute_total(&mut self, w: &LossWeights) {
        self.total =
            w.ciou * self.ciou + w.obj * self.obj + w.noobj * self.noobj + w.class * self.class + self.sparsity;
    }
}

/// Fills the prediction fields of `targets` from raw head logits.
pub fn fill_predictions(head: &HeadConfig, feature: &Tensor, inputs: &mut LossInputs) {
    for a in 0..inputs.boxes_per_cell {
        for i in 0..inputs.grid_h {
            for j in 0..inputs.grid_w {
                let s = inputs.slot(a, i, j);
                inputs.pred_conf[s] = f64::from(sigmoid(feature.at(head.channel(a, 4), i, j)));
                for c in 0..inputs.classes {
                    inputs.pred_class[s * inputs.classes + c] =
                        f64::from(sigmoid(feature.at(head.channel(a, 5 + c), i, j)));
                }
            }
        }
    }
}

/// Loss of one head for one image and its gradient w.r.t. the raw logits.
///
/// Confidence and class gradients use the sigmoid/BCE identity
/// `d/dlogit = p - t`, which stays finite where the clamp saturates.
pub fn head_loss(
    head: &HeadConfig,
    feature: &Tensor,
    gts: &[GroundTruth],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor), LossError> {
    if feature.c() != head.channels() {
        return Err(LossError::ChannelMismatch {
            head: 0,
            expected: head.channels(),
            actual: feature.c(),
        });
    }
    let grid = (feature.w(), feature.h());
    let HeadTargets { mut inputs, assigned } = assign_targets(gts, head, grid)?;
    fill_predictions(head, feature, &mut inputs);

    let mut out = LossBreakdown {
        obj: obj_conf_loss(&inputs),
        noobj: noobj_conf_loss(&inputs),
        class: class_loss(&inputs),
        ..Default::default()
    };
    let mut grad = Tensor::zeros(&[feature.c(), feature.h(), feature.w()]);
    let (gh, gw) = (feature.h(), feature.w());
    let idx = |ch: usize, i: usize, j: usize| (ch * gh + i) * gw + j;
    let g = grad.data_mut();
    for a in 0..inputs.boxes_per_cell {
        for i in 0..gh {
            for j in 0..gw {
                let s = inputs.slot(a, i, j);
                let p = inputs.pred_conf[s];
                let t = inputs.target_conf[s];
                let mut d = 0.0;
                if inputs.obj_mask[s] {
                    d += weights.obj * (p - t);
                    for c in 0..inputs.classes {
                        let k = s * inputs.classes + c;
                        g[idx(head.channel(a, 5 + c), i, j)] =
                            (weights.class * (inputs.pred_class[k] - inputs.target_class[k])) as f32;
                    }
                }
                if inputs.noobj_mask[s] {
                    d += weights.noobj * (p - t);
                }
                g[idx(head.channel(a, 4), i, j)] = d as f32;
            }
        }
    }

    let s = f64::from(head.scale_xy);
    for asg in &assigned {
        let (j, i) = asg.cell;
        let a = asg.anchor;
        let t: [f32; 4] = std::array::from_fn(|f| feature.at(head.channel(a, f), i, j));
        let pred = decode_box(head, grid, (j, i), a, t);
        let r = ciou_loss(&pred, &asg.gt.bbox)?;
        out.ciou += r.terms.loss;
        let (sx, sy) = (f64::from(sigmoid(t[0])), f64::from(sigmoid(t[1])));
        let chain = [
            sx * (1.0 - sx) * s / gw as f64,
            sy * (1.0 - sy) * s / gh as f64,
            pred.w,
            pred.h,
        ];
        for f in 0..4 {
            g[idx(head.channel(a, f), i, j)] += (weights.ciou * r.grad[f] * chain[f]) as f32;
        }
    }
    out.recompute_total(weights);
    Ok((out, grad))
}

/// Sum of [`head_loss`] over every head of one image.
pub fn image_loss(
    heads: &[HeadConfig],
    outputs: &[Tensor],
    gts: &[GroundTruth],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>), LossError> {
    if heads.len() != outputs.len() {
        return Err(LossError::HeadCount {
            heads: heads.len(),
            outputs: outputs.len(),
        });
    }
    let mut total = LossBreakdown::default();
    let mut grads = Vec::with_capacity(heads.len());
    for (k, (h, f)) in heads.iter().zip(outputs).enumerate() {
        let (b, g) = head_loss(h, f, gts, weights).map_err(|e| match e {
            LossError::ChannelMismatch { expected, actual, .. } => LossError::ChannelMismatch {
                head: k,
                expected,
                actual,
            },
            e => e,
        })?;
        total.add(&b);
        grads.push(g);
    }
    Ok((total, grads))
}

/// Detection loss summed over a batch plus the γ penalty.
pub fn total_loss<'a>(
    heads: &[HeadConfig],
    batch: &[(Vec<Tensor>, Vec<GroundTruth>)],
    gammas: impl IntoIterator<Item = &'a f32>,
    sparsity: Option<SparsityConfig>,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let mut total = LossBreakdown::default();
    for (outputs, gts) in batch {
        total.add(&image_loss(heads, outputs, gts, weights)?.0);
    }
    total.sparsity = sparsity.map_or(0.0, |s| sparsity_penalty(gammas, s.lambda));
    total.recompute_total(weights);
    Ok(total)
}

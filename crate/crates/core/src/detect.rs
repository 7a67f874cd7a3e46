//! Box geometry, yolo head decoding and non-maximum suppression.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::netcfg::{LayerKind, YoloSpec};
use crate::nnops::{sigmoid, Tensor};

/// Class ids used throughout: 0 plastic, 1 bio, 2 rov.
pub const CLASS_NAMES: [&str; 3] = ["plastic", "bio", "rov"];

pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_IOU_THRESH: f64 = 0.45;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("head expects {expected} channels, feature has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Axis-aligned box in center form, coordinates normalized to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clips to `[0, 1]²`.
    pub fn clipped(&self) -> BBox {
        let (x1, y1, x2, y2) = self.corners();
        BBox::from_corners(
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
            x2.clamp(0.0, 1.0),
            y2.clamp(0.0, 1.0),
        )
    }
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // Areas from the same corners as the intersection, so iou(a, a) == 1 exactly.
    let corner_area = |x: &BBox| {
        let (x1, y1, x2, y2) = x.corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    };
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Objectness times class probability.
    pub confidence: f64,
}

/// An annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// What a decoder needs to know about one yolo layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Anchors predicted by this head, in pixels.
    pub anchors: Vec<(f32, f32)>,
    pub classes: usize,
    pub scale_xy: f32,
    pub net_w: usize,
    pub net_h: usize,
}

impl HeadConfig {
    pub fn from_spec(y: &YoloSpec, net_w: usize, net_h: usize) -> Self {
        HeadConfig {
            anchors: y.masked_anchors(),
            classes: y.classes,
            scale_xy: y.scale_xy,
            net_w,
            net_h,
        }
    }

    pub fn channels(&self) -> usize {
        (self.classes + 5) * self.anchors.len()
    }

    /// Channel of field `field` (0..5+classes) for anchor `a`.
    pub fn channel(&self, a: usize, field: usize) -> usize {
        a * (self.classes + 5) + field
    }
}

/// Heads of a model, one per yolo layer, in output order.
pub fn head_configs(model: &Model) -> Vec<HeadConfig> {
    model
        .output_layers()
        .iter()
        .filter_map(|&o| match &model.net.layers[o].kind {
            LayerKind::Yolo(y) => Some(HeadConfig::from_spec(y, model.net.input_width, model.net.input_height)),
            _ => None,
        })
        .collect()
}

/// Decodes one prediction slot to its box, given raw logits.
pub fn decode_box(head: &HeadConfig, grid: (usize, usize), cell: (usize, usize), anchor: usize, t: [f32; 4]) -> BBox {
    let (gw, gh) = grid;
    let (j, i) = cell;
    let s = f64::from(head.scale_xy);
    let off = (s - 1.0) / 2.0;
    let (aw, ah) = head.anchors[anchor];
    BBox {
        cx: (f64::from(sigmoid(t[0])) * s - off + j as f64) / gw as f64,
        cy: (f64::from(sigmoid(t[1])) * s - off + i as f64) / gh as f64,
        w: f64::from(aw) * f64::from(t[2]).exp() / head.net_w as f64,
        h: f64::from(ah) * f64::from(t[3]).exp() / head.net_h as f64,
    }
}

/// One detection per cell and anchor, labelled with its best class.
pub fn decode_yolo_head(feature: &Tensor, head: &HeadConfig) -> Result<Vec<Detection>, DetectError> {
    if feature.c() != head.channels() {
        return Err(DetectError::ChannelMismatch {
            expected: head.channels(),
            actual: feature.c(),
        });
    }
    let (gh, gw) = (feature.h(), feature.w());
    let mut out = Vec::with_capacity(gh * gw * head.anchors.len());
    for a in 0..head.anchors.len() {
        for i in 0..gh {
            for j in 0..gw {
                let v = |f: usize| feature.at(head.channel(a, f), i, j);
                let bbox = decode_box(head, (gw, gh), (j, i), a, [v(0), v(1), v(2), v(3)]);
                let obj = f64::from(sigmoid(v(4)));
                let (class_id, score) = (0..head.classes).map(|c| (c, f64::from(sigmoid(v(5 + c))))).fold(
                    (0, f64::NEG_INFINITY),
                    |best, cur| {
                        if cur.1 > best.1 {
                            cur
                        } else {
                            best
                        }
                    },
                );
                out.push(Detection {
                    bbox,
                    class_id,
                    confidence: obj * score,
                });
            }
        }
    }
    Ok(out)
}

/// Greedy per-class suppression. Detections below `conf_thresh` are dropped;
/// the rest are visited by descending confidence (ties keep input order) and a
/// box is kept unless it overlaps an already kept box of its class by more
/// than `iou_thresh`.
pub fn nms(dets: &[Detection], conf_thresh: f64, iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.confidence >= conf_thresh).collect();
    // stable sort keeps insertion order among equal confidences
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Raw detections from every head of a model output, in head order.
pub fn decode_outputs(model: &Model, outputs: &[Tensor]) -> Result<Vec<Detection>, DetectError> {
    let mut all = Vec::new();
    for (t, head) in outputs.iter().zip(head_configs(model)) {
        all.extend(decode_yolo_head(t, &head)?);
    }
    Ok(all)
}

/// Forward pass, decode and NMS on an image already at network size.
pub fn detect(model: &Model, image: &Tensor, conf_thresh: f64, iou_thresh: f64) -> Result<Vec<Detection>, DetectError> {
    let outputs = model.forward(image)?;
    Ok(nms(&decode_outputs(model, &outputs)?, conf_thresh, iou_thresh))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub confidence: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            confidence: d.confidence,
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
        }
    }
}

/// One record per line: `image_id class_id confidence cx cy w h`.
pub fn format_records(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            r.image_id, r.class_id, r.confidence, r.cx, r.cy, r.w, r.h
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, confidence: f64) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, w, h),
            class_id,
            confidence,
        }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(0.9, 0.9, 0.1, 0.1)), 0.0);
        let l = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let r = BBox::from_corners(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&l, &r) - 1.0 / 3.0).abs() < 1e-12);
        let empty = BBox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&empty, &empty), 0.0);
    }

    fn head(classes: usize) -> HeadConfig {
        HeadConfig {
            anchors: vec![(10.0, 14.0), (23.0, 27.0), (37.0, 58.0)],
            classes,
            scale_xy: 1.0,
            net_w: 64,
            net_h: 64,
        }
    }

    #[test]
    fn zero_logits_center_cells() {
        let h = head(3);
        let f = Tensor::zeros(&[24, 2, 2]);
        let dets = decode_yolo_head(&f, &h).unwrap();
        assert_eq!(dets.len(), 12);
        let d = &dets[3]; // anchor 0, cell (i=1, j=1)
        assert!((d.bbox.cx - 0.75).abs() < 1e-12);
        assert!((d.bbox.cy - 0.75).abs() < 1e-12);
        assert!((d.bbox.w - 10.0 / 64.0).abs() < 1e-12);
        assert!((d.confidence - 0.25).abs() < 1e-12);
    }

    #[test]
    fn tw_ln2_doubles_width() {
        let h = head(3);
        let mut f = Tensor::zeros(&[24, 1, 1]);
        f.data_mut()[2] = std::f32::consts::LN_2;
        let dets = decode_yolo_head(&f, &h).unwrap();
        assert!((dets[0].bbox.w - 20.0 / 64.0).abs() < 1e-6);
    }

    #[test]
    fn scale_xy_stretches_offsets() {
        let mut h = head(1);
        h.scale_xy = 2.0;
        let mut f = Tensor::zeros(&[18, 1, 1]);
        f.data_mut()[0] = 50.0; // sigmoid -> 1
        let d = decode_yolo_head(&f, &h).unwrap()[0];
        assert!((d.bbox.cx - 1.5).abs() < 1e-6);
    }

    #[test]
    fn head_channel_mismatch() {
        assert_eq!(
            decode_yolo_head(&Tensor::zeros(&[20, 1, 1]), &head(3)),
            Err(DetectError::ChannelMismatch {
                expected: 24,
                actual: 20
            })
        );
    }

    #[test]
    fn nms_suppresses_same_class_only() {
        let a = det(0.5, 0.5, 0.4, 0.4, 0, 0.9);
        let b = det(0.52, 0.5, 0.4, 0.4, 0, 0.7);
        assert!(iou(&a.bbox, &b.bbox) > 0.8);
        assert_eq!(nms(&[b, a], 0.25, 0.5), vec![a]);
        let c = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[a, c], 0.25, 0.5), vec![a, c]);
    }

    #[test]
    fn nms_confidence_filter_and_ties() {
        let a = det(0.2, 0.2, 0.1, 0.1, 0, 0.5);
        let b = det(0.7, 0.7, 0.1, 0.1, 0, 0.5);
        let low = det(0.5, 0.5, 0.1, 0.1, 0, 0.1);
        assert_eq!(nms(&[a, b, low], 0.25, 0.45), vec![a, b]);
        assert_eq!(nms(&[b, a], 0.25, 0.45), vec![b, a]);
    }

    #[test]
    fn nms_output_is_nonoverlapping_subset() {
        let mut g = SplitMix64::new(1);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..40)
                .map(|_| {
                    det(
                        g.next_f64(),
                        g.next_f64(),
                        g.uniform(0.05, 0.4),
                        g.uniform(0.05, 0.4),
                        g.below(3),
                        g.next_f64(),
                    )
                })
                .collect();
            let kept = nms(&dets, 0.2, 0.45);
            for (i, a) in kept.iter().enumerate() {
                assert!(dets.contains(a));
                for b in &kept[i + 1..] {
                    assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= 0.45);
                }
            }
        }
    }

    #[test]
    fn records_format() {
        let r = DetectionRecord::new("img1", &det(0.5, 0.25, 0.1, 0.2, 2, 0.875));
        assert_eq!(
            format_records(&[r]),
            "img1 2 0.875000 0.500000 0.250000 0.100000 0.200000\n"
        );
    }
}

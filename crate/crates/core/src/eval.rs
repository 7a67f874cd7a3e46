//! Detection matching, average precision, mAP@0.5 and throughput.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{letterbox_image, Sample};
use crate::detect::{self, iou, DetectError, Detection, GroundTruth, CLASS_NAMES};
use crate::model::Model;
use crate::nnops::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground truth for this class")]
    ZeroGt,
    #[error("{0} images given, benchmark needs at least one")]
    NoImages(usize),
    #[error("{dets} detection lists for {gts} ground-truth lists")]
    Mismatch { dets: usize, gts: usize },
    #[error(transparent)]
    Detect(#[from] DetectError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApInterp {
    /// Area under the max-interpolated precision envelope at every recall step.
    AllPoint,
    /// Mean interpolated precision at recall 0, 0.1, ..., 1.
    Voc11,
}

impl ApInterp {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" | "allpoint" | "all-point" => Some(ApInterp::AllPoint),
            "voc11" | "11" => Some(ApInterp::Voc11),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub conf_thresh: f64,
    /// NMS overlap used when the evaluator runs a model itself.
    pub nms_iou: f64,
    pub interp: ApInterp,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            conf_thresh: 0.005,
            nms_iou: detect::DEFAULT_IOU_THRESH,
            interp: ApInterp::AllPoint,
        }
    }
}

/// TP/FP flag per detection. `dets` must be in descending confidence; each
/// detection takes the unmatched same-class GT it overlaps most, if that
/// overlap reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts.iter().enumerate() {
                if used[k] || g.class_id != d.class_id {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            match best {
                Some((k, _)) => {
                    used[k] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Precision/recall after each detection of a confidence-ordered flag list.
pub fn pr_points(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += usize::from(f);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

pub fn average_precision(flags: &[bool], n_gt: usize, interp: ApInterp) -> Result<f64, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::ZeroGt);
    }
    let pts = pr_points(flags, n_gt);
    // envelope[i] = best precision at recall >= recall of point i
    let mut envelope: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    Ok(match interp {
        ApInterp::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (i, &(r, _)) in pts.iter().enumerate() {
                if r > prev_r {
                    ap += (r - prev_r) * envelope[i];
                    prev_r = r;
                }
            }
            ap
        }
        ApInterp::Voc11 => {
            (0..=10)
                .map(|t| {
                    let t = f64::from(t) / 10.0;
                    pts.iter()
                        .zip(&envelope)
                        .find(|(p, _)| p.0 >= t - 1e-12)
                        .map_or(0.0, |(_, &e)| e)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class_id: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassResult>,
    /// Mean AP over classes that have ground truth.
    pub map: f64,
    pub config: EvalConfig,
}

impl EvalResult {
    /// Per-class AP and counts followed by the mean.
    pub fn render(&self) -> String {
        let mut s = String::from("class      AP       GT     TP     FP     FN\n");
        for c in &self.per_class {
            let name = CLASS_NAMES.get(c.class_id).copied().unwrap_or("?");
            let ap = c.ap.map_or("   -  ".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(s, "{name:<8} {ap}  {:>6} {:>6} {:>6} {:>6}", c.n_gt, c.tp, c.fp, c.fn_);
        }
        let _ = writeln!(s, "mAP@{:.2}  {:.4}", self.config.iou_thresh, self.map);
        s
    }
}

/// Pools detections over images, matches them per image and computes AP for
/// each class.
pub fn map50(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalResult, EvalError> {
    if dets.len() != gts.len() {
        return Err(EvalError::Mismatch {
            dets: dets.len(),
            gts: gts.len(),
        });
    }
    // (class, confidence, flag) per image, merged in image order
    let matched: Vec<Vec<(usize, f64, bool)>> = dets
        .par_iter()
        .zip(gts.par_iter())
        .map(|(d, g)| {
            let mut d: Vec<Detection> = d.iter().filter(|x| x.confidence >= cfg.conf_thresh).copied().collect();
            d.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let flags = match_detections(&d, g, cfg.iou_thresh);
            d.iter()
                .zip(flags)
                .map(|(x, f)| (x.class_id, x.confidence, f))
                .collect()
        })
        .collect();
    let mut per_class = Vec::with_capacity(classes);
    let mut aps = Vec::new();
    for c in 0..classes {
        let mut pooled: Vec<(f64, bool)> = matched
            .iter()
            .flatten()
            .filter(|m| m.0 == c)
            .map(|m| (m.1, m.2))
            .collect();
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = pooled.iter().map(|p| p.1).collect();
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == c).count();
        let tp = flags.iter().filter(|&&f| f).count();
        let ap = match average_precision(&flags, n_gt, cfg.interp) {
            Ok(ap) => {
                aps.push(ap);
                Some(ap)
            }
            Err(_) => {
                log::warn!("class {c} has no ground truth; left out of mAP");
                None
            }
        };
        per_class.push(ClassResult {
            class_id: c,
            ap,
            n_gt,
            tp,
            fp: flags.len() - tp,
            fn_: n_gt - tp,
        });
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalResult {
        per_class,
        map,
        config: *cfg,
    })
}

/// Letterbox, forward, decode and NMS on one image of any size; boxes are
/// returned in the image's own normalized coordinates.
pub fn detect_image(model: &Model, image: &Tensor, conf: f64, nms_iou: f64) -> Result<Vec<Detection>, EvalError> {
    let [_, h, w] = model.input_shape();
    if image.w() == w && image.h() == h {
        return Ok(detect::detect(model, image, conf, nms_iou)?);
    }
    let (canvas, lb) = letterbox_image(image, w, h);
    let mut dets = detect::detect(model, &canvas, conf, nms_iou)?;
    for d in &mut dets {
        d.bbox = lb.unmap_box(&d.bbox);
    }
    Ok(dets)
}

/// Runs the model over a labelled set and scores it.
pub fn evaluate_model(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalResult, EvalError> {
    let dets: Vec<Vec<Detection>> = samples
        .par_iter()
        .map(|s| detect_image(model, &s.image, cfg.conf_thresh, cfg.nms_iou))
        .collect::<Result<_, _>>()?;
    let gts: Vec<Vec<GroundTruth>> = samples.iter().map(|s| s.gts.clone()).collect();
    let classes = model.net.classes().unwrap_or(CLASS_NAMES.len());
    map50(&dets, &gts, classes, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub images: usize,
    pub warmup: usize,
    pub wall_time_s: f64,
    pub fps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Per timed image, warmup excluded.
    pub latencies_ms: Vec<f64>,
    pub detections: Vec<usize>,
}

impl FpsReport {
    pub fn mean_detections(&self) -> f64 {
        if self.detections.is_empty() {
            0.0
        } else {
            self.detections.iter().sum::<usize>() as f64 / self.detections.len() as f64
        }
    }

    pub fn render(&self) -> String {
        format!(
            "images {} (warmup {}), {:.3} s, {:.2} FPS, p50 {:.2} ms, p95 {:.2} ms, {:.1} detections/image\n",
            self.images,
            self.warmup,
            self.wall_time_s,
            self.fps,
            self.p50_ms,
            self.p95_ms,
            self.mean_detections()
        )
    }
}

/// Nearest-rank percentile of an unsorted slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Times the full pipeline on `n` images (cycling through `images`) after
/// `warmup` untimed runs. Runs serially on the calling thread.
pub fn benchmark_fps(
    model: &Model,
    images: &[Tensor],
    warmup: usize,
    n: usize,
    conf: f64,
    nms_iou: f64,
) -> Result<FpsReport, EvalError> {
    if images.is_empty() || n == 0 {
        return Err(EvalError::NoImages(images.len().min(n)));
    }
    for k in 0..warmup {
        detect_image(model, &images[k % images.len()], conf, nms_iou)?;
    }
    let mut latencies_ms = Vec::with_capacity(n);
    let mut detections = Vec::with_capacity(n);
    let start = Instant::now();
    for k in 0..n {
        let t = Instant::now();
        let d = detect_image(model, &images[(warmup + k) % images.len()], conf, nms_iou)?;
        latencies_ms.push(t.elapsed().as_secs_f64() * 1e3);
        detections.push(d.len());
    }
    let wall = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(FpsReport {
        images: n,
        warmup,
        wall_time_s: wall,
        fps: n as f64 / wall,
        p50_ms: percentile(&latencies_ms, 50.0),
        p95_ms: percentile(&latencies_ms, 95.0),
        latencies_ms,
        detections,
    })
}

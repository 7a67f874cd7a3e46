//! End-to-end checks on the toy network: evaluator against a brute-force
//! scorer, identity pruning, and fine-tuning after an identity prune.

use slimdet::data::{self, Sample};
use slimdet::detect::{BBox, Detection, GroundTruth};
use slimdet::eval::{self, EvalConfig};
use slimdet::model::Model;
use slimdet::netcfg::{self, WeightStore};
use slimdet::prune::{self, Floor};
use slimdet::train::{self, TrainConfig};
use slimdet::zoo;

fn trained() -> (WeightStore, Vec<Sample>) {
    let set = data::synthetic_shapes(12, 32, 21, 0);
    let cfg = TrainConfig {
        epochs: 3,
        base_lr: 0.02,
        seed: 21,
        ..TrainConfig::default()
    };
    (train::train_toy(&cfg, &set).unwrap().0, set)
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Plain loops: per class, rank pooled detections, greedily match in each
/// image, then take the area under the monotone precision envelope.
fn brute_force_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], cfg: &EvalConfig) -> f64 {
    let mut aps = Vec::new();
    for c in 0..3 {
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == c).count();
        if n_gt == 0 {
            continue;
        }
        let mut scored: Vec<(f64, bool)> = Vec::new();
        for (img, ds) in dets.iter().enumerate() {
            let mut ds: Vec<&Detection> = ds.iter().filter(|d| d.confidence >= cfg.conf_thresh).collect();
            ds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let mut used = vec![false; gts[img].len()];
            for d in ds {
                let mut best: Option<(usize, f64)> = None;
                for (k, g) in gts[img].iter().enumerate() {
                    let o = overlap(&d.bbox, &g.bbox);
                    if !used[k] && g.class_id == d.class_id && o >= cfg.iou_thresh && best.is_none_or(|(_, b)| o > b) {
                        best = Some((k, o));
                    }
                }
                if let Some((k, _)) = best {
                    used[k] = true;
                }
                if d.class_id == c {
                    scored.push((d.confidence, best.is_some()));
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut ap = 0.0;
        let mut tp = 0;
        for k in 0..scored.len() {
            if scored[k].1 {
                tp += 1;
                let mut best_p = 0.0f64;
                let mut t = tp;
                for (j, s) in scored.iter().enumerate().skip(k + 1) {
                    t += usize::from(s.1);
                    best_p = best_p.max(t as f64 / (j + 1) as f64);
                }
                best_p = best_p.max(tp as f64 / (k + 1) as f64);
                ap += best_p / n_gt as f64;
            }
        }
        aps.push(ap);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

#[test]
fn toy_map_matches_brute_force() {
    let (w, _) = trained();
    let model = Model::new(zoo::toy(), w).unwrap();
    let test = data::synthetic_shapes(16, 40, 22, 1000);
    let cfg = EvalConfig::default();
    let r = eval::evaluate_model(&model, &test, &cfg).unwrap();
    let dets: Vec<Vec<Detection>> = test
        .iter()
        .map(|s| eval::detect_image(&model, &s.image, cfg.conf_thresh, cfg.nms_iou).unwrap())
        .collect();
    assert!(dets.iter().map(Vec::len).sum::<usize>() > 0);
    let gts: Vec<Vec<GroundTruth>> = test.iter().map(|s| s.gts.clone()).collect();
    assert!((r.map - brute_force_map(&dets, &gts, &cfg)).abs() < 1e-9);
}

#[test]
fn zero_ratio_prune_is_identity() {
    let (w, set) = trained();
    let net = zoo::toy();
    let p = prune::prune(&net, &w, 0.0, Floor::default()).unwrap();
    assert_eq!(p.net, net);
    assert_eq!(p.store.convs, w.convs);
    let cfg = EvalConfig::default();
    let a = eval::evaluate_model(&Model::new(net.clone(), w.clone()).unwrap(), &set, &cfg).unwrap();
    let b = eval::evaluate_model(&Model::new(p.net.clone(), p.store.clone()).unwrap(), &set, &cfg).unwrap();
    assert!((a.map - b.map).abs() < 1e-9);

    // fine-tuning the identity prune is plain continued training
    let cfg = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let (ft, _) = train::fine_tune(&p.net, p.store, &cfg, &set).unwrap();
    let (cont, _) = train::train(&net, w, &cfg, &set).unwrap();
    assert_eq!(
        netcfg::save_weights(&ft, &net).unwrap(),
        netcfg::save_weights(&cont, &net).unwrap()
    );
}

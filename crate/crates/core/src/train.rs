//! CPU-scale training: SGD with momentum over the detection loss, step LR
//! decay, layer freezing, γ sparsity and post-prune fine-tuning.
//!
//! Batch norm runs with fixed statistics throughout, so γ and β are the only
//! normalization parameters that learn.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, AugmentConfig, Sample};
use crate::detect::head_configs;
use crate::graph::{self, GraphError};
use crate::losses::{self, LossBreakdown, LossError, LossWeights, SparsityConfig};
use crate::model::{Gradients, Model, ModelError};
use crate::netcfg::{NetworkDef, WeightStore};
use crate::rng::SplitMix64;
use crate::zoo::FreezeRanges;

/// |γ| below this counts as switched off in the sparsity statistic.
pub const GAMMA_ZERO: f32 = 0.01;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("freeze range ends at layer {end} but the network has {layers} layers")]
    RangeOutOfBounds { end: usize, layers: usize },
    #[error("no freeze ranges known for network {0:?}")]
    NoFreezeRanges(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeMode {
    None,
    Backbone,
    BackboneNeck,
}

impl FreezeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(FreezeMode::None),
            "backbone" => Some(FreezeMode::Backbone),
            "backbone_neck" | "backbone+neck" => Some(FreezeMode::BackboneNeck),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Scratch,
    Weights(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_step_every: usize,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub mosaic: bool,
    pub augment: bool,
    pub freeze: FreezeMode,
    /// Overrides the bundled range table.
    pub freeze_ranges: Option<FreezeRanges>,
    pub sparsity: Option<SparsityConfig>,
    pub init: Init,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 0.01,
            lr_step_every: 200,
            lr_decay: 0.1,
            batch_size: 4,
            momentum: 0.9,
            clip_norm: 10.0,
            seed: 0,
            mosaic: false,
            augment: false,
            freeze: FreezeMode::None,
            freeze_ranges: None,
            sparsity: None,
            init: Init::Scratch,
            loss_weights: LossWeights::default(),
        }
    }
}

fn parse_range(v: &str) -> Option<std::ops::RangeInclusive<usize>> {
    let (a, b) = v.split_once('-')?;
    Some(a.trim().parse().ok()?..=b.trim().parse().ok()?)
}

impl TrainConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = || TrainError::InvalidConfig(format!("{key}={value}"));
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> TrainError) -> Result<T, TrainError> {
            v.parse().map_err(|_| bad())
        }
        let flag = |v: &str| match v {
            "1" | "true" | "on" | "yes" => Ok(true),
            "0" | "false" | "off" | "no" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "epochs" => self.epochs = num(value, bad)?,
            "lr" | "base_lr" => self.base_lr = num(value, bad)?,
            "lr_step_every" => self.lr_step_every = num(value, bad)?,
            "lr_decay" => self.lr_decay = num(value, bad)?,
            "batch" | "batch_size" => self.batch_size = num(value, bad)?,
            "momentum" => self.momentum = num(value, bad)?,
            "clip_norm" => self.clip_norm = num(value, bad)?,
            "seed" => self.seed = num(value, bad)?,
            "mosaic" => self.mosaic = flag(value)?,
            "augment" => self.augment = flag(value)?,
            "freeze" => self.freeze = FreezeMode::parse(value).ok_or_else(bad)?,
            "freeze_backbone" | "freeze_backbone_neck" => {
                let r = parse_range(value).ok_or_else(bad)?;
                let mut ranges = self.freeze_ranges.clone().unwrap_or(FreezeRanges {
                    backbone: r.clone(),
                    backbone_neck: r.clone(),
                });
                if key == "freeze_backbone" {
                    ranges.backbone = r;
                } else {
                    ranges.backbone_neck = r;
                }
                self.freeze_ranges = Some(ranges);
            }
            "lambda" | "sparsity" => {
                let lambda: f64 = num(value, bad)?;
                self.sparsity = (lambda > 0.0).then_some(SparsityConfig { lambda });
            }
            "init" => {
                self.init = if value == "scratch" {
                    Init::Scratch
                } else {
                    Init::Weights(PathBuf::from(value))
                }
            }
            "w_ciou" => self.loss_weights.ciou = num(value, bad)?,
            "w_obj" => self.loss_weights.obj = num(value, bad)?,
            "w_noobj" => self.loss_weights.noobj = num(value, bad)?,
            "w_class" => self.loss_weights.class = num(value, bad)?,
            _ => return Err(TrainError::InvalidConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines (`#` comments allowed) over the defaults.
    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::InvalidConfig(line.to_string()))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.lr_step_every == 0 {
            return bad("batch and lr_step_every must be positive");
        }
        if self.sparsity.is_some_and(|s| s.lambda < 0.0) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

/// `base_lr · decay^⌊epoch / step_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.lr_step_every.max(1)) as i32;
    cfg.base_lr * cfg.lr_decay.powi(steps)
}

/// Per-layer trainability. Frozen layers keep every parameter, including the
/// batch-norm statistics, untouched.
pub fn trainable_mask(
    net: &NetworkDef,
    mode: FreezeMode,
    ranges: Option<&FreezeRanges>,
) -> Result<Vec<bool>, TrainError> {
    let n = net.layers.len();
    let owned;
    let ranges = match (mode, ranges) {
        (FreezeMode::None, _) => return Ok(vec![true; n]),
        (_, Some(r)) => r,
        (_, None) => {
            owned = crate::zoo::freeze_ranges(&net.source_name)
                .ok_or_else(|| TrainError::NoFreezeRanges(net.source_name.clone()))?;
            &owned
        }
    };
    let r = match mode {
        FreezeMode::Backbone => &ranges.backbone,
        _ => &ranges.backbone_neck,
    };
    if *r.end() >= n {
        return Err(TrainError::RangeOutOfBounds {
            end: *r.end(),
            layers: n,
        });
    }
    Ok((0..n).map(|i| !r.contains(&i)).collect())
}

/// Fresh weights: He-uniform kernels, zero shifts, identity batch norm. Head
/// convolutions start with a low objectness bias so early training is not
/// swamped by background.
pub fn init_weights(net: &NetworkDef, seed: u64) -> Result<WeightStore, TrainError> {
    let shapes = graph::infer_shapes(net)?;
    let mut store = WeightStore::zeros(net)?;
    let mut g = SplitMix64::new(seed);
    let head_inputs: Vec<usize> = net
        .yolo_layers()
        .filter(|(i, _)| *i > 0)
        .map(|(i, y)| (i - 1, y))
        .filter(|(p, _)| net.layers[*p].kind.as_conv().is_some())
        .map(|(p, _)| p)
        .collect();
    for (i, layer) in net.layers.iter().enumerate() {
        let Some(c) = layer.kind.as_conv() else { continue };
        let fan_in = shapes.input_of(net, i).c * c.size * c.size;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let w = store.conv_mut(i).expect("conv has weights");
        for v in &mut w.kernel {
            *v = g.uniform_f32(-bound, bound);
        }
        if head_inputs.contains(&i) {
            let yolo = net.layers[i + 1].kind.as_yolo().expect("yolo follows head");
            let per = yolo.classes + 5;
            for a in 0..yolo.mask.len() {
                w.biases[a * per + 4] = -4.0;
            }
            // small kernels keep the initial head output near the prior
            for v in &mut w.kernel {
                *v *= 0.1;
            }
        }
    }
    Ok(store)
}

/// Fraction of prunable-layer γ with magnitude below [`GAMMA_ZERO`].
pub fn gamma_sparsity(net: &NetworkDef, store: &WeightStore) -> f64 {
    let Ok(deps) = graph::dependency_groups(net) else {
        return 0.0;
    };
    let (mut zero, mut total) = (0usize, 0usize);
    for (i, w) in store.convs.iter().enumerate() {
        if let (true, Some(bn)) = (
            deps.prunable.get(i).copied().unwrap_or(false),
            w.as_ref().and_then(|w| w.bn.as_ref()),
        ) {
            zero += bn.gamma.iter().filter(|g| g.abs() < GAMMA_ZERO).count();
            total += bn.gamma.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        zero as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub gamma_sparsity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss.total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss.total)
    }
}

/// Builds the training image for slot `k` of an epoch: a mosaic with three
/// random partners when enabled, else the sample itself, optionally augmented.
fn training_sample(data: &[Sample], idx: usize, cfg: &TrainConfig, net_w: usize, net_h: usize, seed: u64) -> Sample {
    let mut g = SplitMix64::new(seed);
    let base = if cfg.mosaic {
        let four: [Sample; 4] = std::array::from_fn(|k| {
            let j = if k == 0 { idx } else { g.below(data.len()) };
            data[j].clone()
        });
        data::mosaic(&four, net_w, net_h, g.next_u64())
    } else if data[idx].width() == net_w && data[idx].height() == net_h {
        data[idx].clone()
    } else {
        data::letterbox(&data[idx], net_w, net_h).0
    };
    if cfg.augment {
        data::basic_transforms(&base, &AugmentConfig::default(), g.next_u64())
    } else {
        base
    }
}

fn sgd_step(
    store: &mut WeightStore,
    velocity: &mut [Option<Vec<f32>>],
    grads: &Gradients,
    trainable: &[bool],
    lr: f32,
    momentum: f32,
) {
    for (i, g) in grads.convs.iter().enumerate() {
        let (Some(g), true) = (g, trainable[i]) else { continue };
        let w = store.conv_mut(i).expect("aligned");
        let n = g.kernel.len() + g.biases.len() + g.gamma.as_ref().map_or(0, Vec::len);
        let vel = velocity[i].get_or_insert_with(|| vec![0.0; n]);
        let mut params: Vec<&mut f32> = w.kernel.iter_mut().chain(w.biases.iter_mut()).collect();
        let mut gv: Vec<f32> = g.kernel.iter().chain(&g.biases).copied().collect();
        if let (Some(bn), Some(gg)) = (w.bn.as_mut(), &g.gamma) {
            params.extend(bn.gamma.iter_mut());
            gv.extend(gg);
        }
        for ((p, v), d) in params.into_iter().zip(vel.iter_mut()).zip(gv) {
            *v = momentum * *v + d;
            *p -= lr * *v;
        }
    }
}

fn grad_norm(grads: &Gradients, trainable: &[bool]) -> f64 {
    grads
        .convs
        .iter()
        .enumerate()
        .filter(|(i, _)| trainable[*i])
        .filter_map(|(_, g)| g.as_ref())
        .flat_map(|g| g.kernel.iter().chain(&g.biases).chain(g.gamma.iter().flatten()))
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Trains `store` on `data` for `cfg.epochs` epochs.
pub fn train(
    net: &NetworkDef,
    store: WeightStore,
    cfg: &TrainConfig,
    data: &[Sample],
) -> Result<(WeightStore, TrainHistory), TrainError> {
    cfg.check()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let trainable = trainable_mask(net, cfg.freeze, cfg.freeze_ranges.as_ref())?;
    let prunable = graph::dependency_groups(net)?.prunable;
    let mut model = Model::new(net.clone(), store)?;
    let heads = head_configs(&model);
    let (net_w, net_h) = (net.input_width, net.input_height);
    let mut velocity: Vec<Option<Vec<f32>>> = vec![None; net.layers.len()];
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffler = SplitMix64::derive(cfg.seed, 0x5348_5546);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        shuffler.shuffle(&mut order);
        let mut epoch_loss = LossBreakdown::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let per_image: Vec<Result<(LossBreakdown, Gradients), TrainError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let sid = ((epoch as u64) << 32) | ((b * cfg.batch_size + k) as u64);
                    let s = training_sample(
                        data,
                        idx,
                        cfg,
                        net_w,
                        net_h,
                        SplitMix64::derive(cfg.seed, sid).next_u64(),
                    );
                    let cache = model.forward_cached(&s.image)?;
                    let (loss, head_grads) =
                        losses::image_loss(&heads, &cache.heads(&model), &s.gts, &cfg.loss_weights)?;
                    Ok((loss, model.backward(&cache, &head_grads, false)?))
                })
                .collect();
            let mut batch_loss = LossBreakdown::default();
            let mut grads: Option<Gradients> = None;
            for r in per_image {
                let (l, g) = r?;
                batch_loss.add(&l);
                match &mut grads {
                    Some(acc) => acc.accumulate(&g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / chunk.len() as f32;
            grads.scale(inv);
            let mut batch_loss = batch_loss.scaled(f64::from(inv));

            if let Some(sp) = cfg.sparsity {
                let mut pen = 0.0;
                for (i, g) in grads.convs.iter_mut().enumerate() {
                    if !prunable[i] {
                        continue;
                    }
                    let (Some(g), Some(bn)) = (g.as_mut(), model.weights.conv(i).and_then(|w| w.bn.as_ref())) else {
                        continue;
                    };
                    pen += losses::sparsity_penalty(&bn.gamma, sp.lambda);
                    if let Some(gg) = &mut g.gamma {
                        for (d, &gamma) in gg.iter_mut().zip(&bn.gamma) {
                            *d += losses::sparsity_grad(gamma, sp.lambda) as f32;
                        }
                    }
                }
                batch_loss.sparsity = pen;
                batch_loss.total += pen;
            }
            if !batch_loss.total.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch });
            }
            if cfg.clip_norm > 0.0 {
                let norm = grad_norm(&grads, &trainable);
                if norm > cfg.clip_norm {
                    grads.scale((cfg.clip_norm / norm) as f32);
                }
            }
            sgd_step(
                &mut model.weights,
                &mut velocity,
                &grads,
                &trainable,
                lr as f32,
                cfg.momentum as f32,
            );
            epoch_loss.add(&batch_loss);
            batches += 1;
        }
        let mut loss = epoch_loss.scaled(1.0 / batches as f64);
        loss.epoch = epoch;
        if !loss.total.is_finite() {
            return Err(TrainError::DivergenceDetected { epoch });
        }
        history.records.push(EpochRecord {
            epoch,
            lr,
            loss,
            gamma_sparsity: gamma_sparsity(net, &model.weights),
        });
    }
    Ok((model.weights, history))
}

/// Loads or creates the starting weights named by `cfg.init`.
pub fn initial_weights(net: &NetworkDef, cfg: &TrainConfig) -> Result<WeightStore, TrainError> {
    match &cfg.init {
        Init::Scratch => init_weights(net, cfg.seed),
        Init::Weights(p) => {
            let bytes = std::fs::read(p).map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", p.display())))?;
            Ok(crate::netcfg::load_weights(&bytes, net).map_err(ModelError::from)?)
        }
    }
}

/// Trains the bundled toy detector from the configured initialization.
pub fn train_toy(cfg: &TrainConfig, data: &[Sample]) -> Result<(WeightStore, TrainHistory), TrainError> {
    let net = crate::zoo::toy();
    let store = initial_weights(&net, cfg)?;
    train(&net, store, cfg, data)
}

/// Continues training a (pruned) model; the sparsity penalty is switched off.
pub fn fine_tune(
    net: &NetworkDef,
    store: WeightStore,
    cfg: &TrainConfig,
    data: &[Sample],
) -> Result<(WeightStore, TrainHistory), TrainError> {
    let cfg = TrainConfig {
        sparsity: None,
        ..cfg.clone()
    };
    train(net, store, &cfg, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn lr_steps() {
        let cfg = TrainConfig {
            base_lr: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.1);
        assert!((lr_schedule(199, &cfg) - 0.1).abs() < 1e-15);
        assert!((lr_schedule(200, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(399, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(400, &cfg) - 0.001).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for e in 0..1000 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= last);
            if lr < last && e > 0 {
                assert_eq!(e % 200, 0);
            }
            last = lr;
        }
    }

    #[test]
    fn config_parsing() {
        let cfg =
            TrainConfig::from_kv("epochs=5\nlr=0.02 # comment\nfreeze=backbone\nlambda=1e-2\nmosaic=1\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.base_lr, 0.02);
        assert_eq!(cfg.freeze, FreezeMode::Backbone);
        assert_eq!(cfg.sparsity, Some(SparsityConfig { lambda: 1e-2 }));
        assert!(cfg.mosaic);
        assert!(TrainConfig::from_kv("epochs=0").is_err());
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("lr=-1").is_err());
    }

    #[test]
    fn freeze_masks() {
        let net = zoo::yolov4();
        assert!(trainable_mask(&net, FreezeMode::None, None).unwrap().iter().all(|&t| t));
        let m = trainable_mask(&net, FreezeMode::Backbone, None).unwrap();
        assert!(m[..=104].iter().all(|&t| !t) && m[105..].iter().all(|&t| t));
        // frozen parameter count equals the backbone subtotal
        let counts = graph::count_parameters(&net).unwrap();
        let frozen: usize = (0..net.layers.len())
            .filter(|&i| !m[i])
            .map(|i| counts.per_layer[i])
            .sum();
        let backbone: usize = counts.per_layer[..=104].iter().sum();
        assert_eq!(frozen, backbone);
        let bad = FreezeRanges {
            backbone: 0..=500,
            backbone_neck: 0..=500,
        };
        assert!(matches!(
            trainable_mask(&net, FreezeMode::Backbone, Some(&bad)),
            Err(TrainError::RangeOutOfBounds { .. })
        ));
    }

    fn small_run(cfg: &TrainConfig, n: usize) -> (WeightStore, TrainHistory) {
        let data = data::synthetic_shapes(n, 32, 3, 0);
        train_toy(cfg, &data).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 15,
            base_lr: 0.02,
            ..TrainConfig::default()
        };
        let (w1, h1) = small_run(&cfg, 16);
        let (w2, h2) = small_run(&cfg, 16);
        assert_eq!(w1, w2);
        assert_eq!(h1, h2);
        assert_eq!(h1.records.len(), 15);
        assert!(h1.last_loss().unwrap() < h1.first_loss().unwrap());
    }

    #[test]
    fn frozen_layers_bitwise_unchanged() {
        let net = zoo::toy();
        let init = init_weights(&net, 1).unwrap();
        let data = data::synthetic_shapes(8, 32, 1, 0);
        for mode in [FreezeMode::Backbone, FreezeMode::BackboneNeck] {
            let cfg = TrainConfig {
                epochs: 2,
                freeze: mode,
                ..TrainConfig::default()
            };
            let (w, _) = train(&net, init.clone(), &cfg, &data).unwrap();
            let mask = trainable_mask(&net, mode, None).unwrap();
            for (i, t) in mask.iter().enumerate() {
                if init.conv(i).is_some() {
                    assert_eq!(!t, init.conv(i) == w.conv(i), "layer {i}");
                }
            }
        }
    }

    #[test]
    fn history_serializes() {
        let cfg = TrainConfig {
            epochs: 1,
            sparsity: Some(SparsityConfig { lambda: 1e-3 }),
            ..TrainConfig::default()
        };
        let (_, h) = small_run(&cfg, 4);
        let line = h.to_json_lines();
        for key in [
            "\"epoch\"",
            "\"ciou\"",
            "\"obj\"",
            "\"noobj\"",
            "\"class\"",
            "\"sparsity\"",
            "\"total\"",
            "\"lr\"",
        ] {
            assert!(line.contains(key), "{key} in {line}");
        }
        assert!(h.records[0].loss.sparsity > 0.0);
    }
}

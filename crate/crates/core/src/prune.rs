//! Batch-norm γ channel slimming: score channels, pick a global threshold,
//! rewire kernels and emit a smaller network.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{self, GraphError};
use crate::netcfg::{BnStats, ConvWeights, LayerKind, NetworkDef, WeightStore};

/// Pruned channels whose shift exceeds this lose information.
pub const BETA_WARN: f32 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("prune ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),
    #[error("inconsistent mask at layer {layer}: {reason}")]
    InconsistentMask { layer: usize, reason: String },
    #[error("layer {0} has no weights")]
    MissingWeights(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn inconsistent(layer: usize, reason: impl Into<String>) -> PruneError {
    PruneError::InconsistentMask {
        layer,
        reason: reason.into(),
    }
}

/// Importance of one output channel of a prune unit. `layer` is the unit's
/// first member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScore {
    pub layer: usize,
    pub channel: usize,
    pub score: f32,
}

/// Per-layer minimum kept channels: `max(min_channels, ceil(fraction * filters))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Floor {
    pub min_channels: usize,
    pub fraction: f64,
}

impl Default for Floor {
    fn default() -> Self {
        Floor {
            min_channels: 1,
            fraction: 0.05,
        }
    }
}

impl Floor {
    pub fn for_filters(&self, filters: usize) -> usize {
        let frac = (self.fraction * filters as f64).ceil() as usize;
        self.min_channels.max(frac).max(1).min(filters)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    /// Kept output channels (ascending) for every prunable conv, group
    /// members included.
    pub kept: BTreeMap<usize, Vec<usize>>,
    pub ratio: f64,
    pub threshold: f32,
    /// Fraction of scored channels actually removed.
    pub achieved: f64,
}

fn filters_of(net: &NetworkDef, layer: usize) -> usize {
    net.layers[layer].kind.as_conv().map_or(0, |c| c.filters)
}

/// One score per output channel of every prune unit: the largest |γ| among
/// the unit's members.
pub fn collect_gammas(net: &NetworkDef, store: &WeightStore) -> Result<Vec<ChannelScore>, PruneError> {
    let deps = graph::dependency_groups(net)?;
    let mut out = Vec::new();
    for unit in deps.prune_units() {
        let filters = filters_of(net, unit[0]);
        let mut best = vec![0.0f32; filters];
        for &m in &unit {
            let bn = store
                .conv(m)
                .and_then(|w| w.bn.as_ref())
                .ok_or(PruneError::MissingWeights(m))?;
            for (b, g) in best.iter_mut().zip(&bn.gamma) {
                *b = b.max(g.abs());
            }
        }
        out.extend(best.into_iter().enumerate().map(|(channel, score)| ChannelScore {
            layer: unit[0],
            channel,
            score,
        }));
    }
    Ok(out)
}

/// Global threshold at the `ratio` quantile of all scores; channels strictly
/// below it are pruned, subject to the per-layer floor.
pub fn select_mask(
    net: &NetworkDef,
    scores: &[ChannelScore],
    ratio: f64,
    floor: Floor,
) -> Result<PruneMask, PruneError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PruneError::RatioOutOfRange(ratio));
    }
    let deps = graph::dependency_groups(net)?;
    let mut sorted: Vec<f32> = scores.iter().map(|s| s.score).collect();
    sorted.sort_by(f32::total_cmp);
    let threshold = if sorted.is_empty() {
        0.0
    } else {
        sorted[((ratio * sorted.len() as f64) as usize).min(sorted.len() - 1)]
    };

    let mut by_unit: BTreeMap<usize, Vec<(usize, f32)>> = BTreeMap::new();
    for s in scores {
        by_unit.entry(s.layer).or_default().push((s.channel, s.score));
    }
    let mut kept = BTreeMap::new();
    let mut removed = 0usize;
    for unit in deps.prune_units() {
        let rep = unit[0];
        let filters = filters_of(net, rep);
        let mut chans = by_unit.remove(&rep).unwrap_or_default();
        if chans.len() != filters {
            return Err(inconsistent(
                rep,
                format!("{} scores for {filters} filters", chans.len()),
            ));
        }
        // highest first; among equals the lower index wins
        chans.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let above = chans.iter().filter(|c| c.1 >= threshold).count();
        let keep_n = above.max(floor.for_filters(filters));
        let mut keep: Vec<usize> = chans[..keep_n].iter().map(|c| c.0).collect();
        keep.sort_unstable();
        removed += filters - keep.len();
        for &m in &unit {
            kept.insert(m, keep.clone());
        }
    }
    if let Some((&layer, _)) = by_unit.iter().next() {
        return Err(inconsistent(layer, "score for a layer that is not prunable"));
    }
    Ok(PruneMask {
        kept,
        ratio,
        threshold,
        achieved: if scores.is_empty() {
            0.0
        } else {
            removed as f64 / scores.len() as f64
        },
    })
}

fn check_mask(net: &NetworkDef, mask: &PruneMask) -> Result<(), PruneError> {
    let deps = graph::dependency_groups(net)?;
    for (&layer, keep) in &mask.kept {
        let filters = filters_of(net, layer);
        if layer >= net.layers.len() || net.layers[layer].kind.as_conv().is_none() {
            return Err(inconsistent(layer, "not a convolution"));
        }
        if keep.is_empty() {
            return Err(inconsistent(layer, "no channels kept"));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep[keep.len() - 1] >= filters {
            return Err(inconsistent(layer, "kept channels must be ascending and in range"));
        }
        if keep.len() < filters && !deps.prunable[layer] {
            return Err(inconsistent(layer, "layer is not prunable"));
        }
    }
    for g in &deps.groups {
        let first = mask.kept.get(&g.members[0]);
        for &m in &g.members[1..] {
            if mask.kept.get(&m) != first {
                return Err(inconsistent(m, "group members disagree"));
            }
        }
    }
    Ok(())
}

fn gather<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Builds the pruned network and its weights. Each layer output is tracked as
/// the list of original channels that survive, so consumers can slice their
/// kernels and route offsets follow automatically.
pub fn apply_mask(
    net: &NetworkDef,
    store: &WeightStore,
    mask: &PruneMask,
) -> Result<(NetworkDef, WeightStore), PruneError> {
    check_mask(net, mask)?;
    let shapes = graph::infer_shapes(net)?;
    let mut out_net = net.clone();
    let mut out_store = WeightStore {
        header: store.header,
        convs: vec![None; net.layers.len()],
    };
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let input_kept = all(net.input_channels);
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(net.layers.len());

    for (i, layer) in net.layers.iter().enumerate() {
        let prev = if i == 0 { &input_kept } else { &kept[i - 1] };
        let this = match &layer.kind {
            LayerKind::Convolutional(c) => {
                let w = store.conv(i).ok_or(PruneError::MissingWeights(i))?;
                let in_c = shapes.input_of(net, i).c;
                let keep_out = mask.kept.get(&i).cloned().unwrap_or_else(|| all(c.filters));
                let k2 = c.size * c.size;
                let mut kernel = Vec::with_capacity(keep_out.len() * prev.len() * k2);
                for &o in &keep_out {
                    for &ci in prev {
                        let base = (o * in_c + ci) * k2;
                        kernel.extend_from_slice(&w.kernel[base..base + k2]);
                    }
                }
                out_store.convs[i] = Some(ConvWeights {
                    biases: gather(&w.biases, &keep_out),
                    bn: w.bn.as_ref().map(|bn| BnStats {
                        gamma: gather(&bn.gamma, &keep_out),
                        mean: gather(&bn.mean, &keep_out),
                        var: gather(&bn.var, &keep_out),
                    }),
                    kernel,
                });
                if let LayerKind::Convolutional(oc) = &mut out_net.layers[i].kind {
                    oc.filters = keep_out.len();
                }
                keep_out
            }
            LayerKind::Maxpool(_) | LayerKind::Upsample { .. } => prev.clone(),
            LayerKind::Yolo(_) => {
                if prev.len() != shapes.input_of(net, i).c {
                    return Err(inconsistent(i, "yolo input lost channels"));
                }
                prev.clone()
            }
            LayerKind::Route(r) if r.groups > 1 => {
                let src = r.layers[0];
                let full = shapes.shapes[src].c;
                if kept[src].len() != full {
                    return Err(inconsistent(i, "grouped route source was pruned"));
                }
                all(full / r.groups)
            }
            LayerKind::Route(r) => {
                let mut offset = 0;
                let mut list = Vec::new();
                for &l in &r.layers {
                    list.extend(kept[l].iter().map(|&c| c + offset));
                    offset += shapes.shapes[l].c;
                }
                list
            }
            LayerKind::Shortcut(s) => {
                if *prev != kept[s.from] {
                    return Err(inconsistent(i, "shortcut operands keep different channels"));
                }
                prev.clone()
            }
        };
        kept.push(this);
    }
    let errs = graph::validate(&out_net);
    if let Some(e) = errs.into_iter().next() {
        return Err(e.into());
    }
    Ok((out_net, out_store))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerChange {
    pub layer: usize,
    pub filters_before: usize,
    pub filters_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub params_before: usize,
    pub params_after: usize,
    pub layers: Vec<LayerChange>,
    pub ratio_requested: f64,
    pub ratio_achieved: f64,
    /// Pruned channels with |β| above [`BETA_WARN`]: (layer, channel, β).
    pub beta_warnings: Vec<(usize, usize, f32)>,
}

impl PruneReport {
    pub fn param_fraction(&self) -> f64 {
        if self.params_before == 0 {
            1.0
        } else {
            self.params_after as f64 / self.params_before as f64
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ratio requested {:.3}, achieved {:.3}",
            self.ratio_requested, self.ratio_achieved
        );
        let _ = writeln!(
            s,
            "params {} -> {} ({:.2}%)",
            self.params_before,
            self.params_after,
            100.0 * self.param_fraction()
        );
        for l in self.layers.iter().filter(|l| l.filters_before != l.filters_after) {
            let _ = writeln!(
                s,
                "  layer {:>3}: {:>5} -> {:>5}",
                l.layer, l.filters_before, l.filters_after
            );
        }
        if !self.beta_warnings.is_empty() {
            let _ = writeln!(
                s,
                "warning: {} pruned channels had |beta| > {BETA_WARN}",
                self.beta_warnings.len()
            );
        }
        s
    }
}

pub fn prune_report(
    before: &NetworkDef,
    after: &NetworkDef,
    store: &WeightStore,
    mask: &PruneMask,
) -> Result<PruneReport, PruneError> {
    let layers = before
        .conv_layers()
        .map(|(i, c)| LayerChange {
            layer: i,
            filters_before: c.filters,
            filters_after: filters_of(after, i),
        })
        .collect();
    let mut beta_warnings = Vec::new();
    for (&layer, keep) in &mask.kept {
        if let Some(w) = store.conv(layer) {
            for (ch, &b) in w.biases.iter().enumerate() {
                if b.abs() > BETA_WARN && keep.binary_search(&ch).is_err() {
                    beta_warnings.push((layer, ch, b));
                }
            }
        }
    }
    Ok(PruneReport {
        params_before: graph::count_parameters(before)?.total,
        params_after: graph::count_parameters(after)?.total,
        layers,
        ratio_requested: mask.ratio,
        ratio_achieved: mask.achieved,
        beta_warnings,
    })
}

pub struct Pruned {
    pub net: NetworkDef,
    pub store: WeightStore,
    pub mask: PruneMask,
    pub report: PruneReport,
}

/// Scores, selects and applies in one go.
pub fn prune(net: &NetworkDef, store: &WeightStore, ratio: f64, floor: Floor) -> Result<Pruned, PruneError> {
    let scores = collect_gammas(net, store)?;
    let mask = select_mask(net, &scores, ratio, floor)?;
    let (pnet, pstore) = apply_mask(net, store, &mask)?;
    let report = prune_report(net, &pnet, store, &mask)?;
    Ok(Pruned {
        net: pnet,
        store: pstore,
        mask,
        report,
    })
}

/// One row of a ratio sweep. `map50` is in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub params: usize,
    pub map50: Option<f64>,
    pub fps: Option<f64>,
}

/// Accuracy loss (mAP points, i.e. 0.02 = 2 points) tolerated when picking the
/// most efficient row.
pub const EFFICIENCY_MAP_SLACK: f64 = 0.02;

/// Fastest row whose mAP is within [`EFFICIENCY_MAP_SLACK`] of the best row.
pub fn most_efficient(rows: &[SweepRow]) -> Option<usize> {
    let best = rows.iter().filter_map(|r| r.map50).fold(f64::NEG_INFINITY, f64::max);
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| match (r.map50, r.fps) {
            (Some(m), Some(f)) if m >= best - EFFICIENCY_MAP_SLACK => Some((i, f)),
            _ => None,
        })
        .fold(None, |acc: Option<(usize, f64)>, (i, f)| match acc {
            Some((_, bf)) if bf >= f => acc,
            _ => Some((i, f)),
        })
        .map(|(i, _)| i)
}

/// Row with the highest mAP; the earlier row wins ties.
pub fn best_map(rows: &[SweepRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| r.map50.map(|m| (i, m)))
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((i, m)),
        })
        .map(|(i, _)| i)
}

/// Ratio / parameters / mAP / FPS table. The most efficient row is marked
/// `*`, the best-mAP row `+`.
pub fn render_sweep(rows: &[SweepRow]) -> String {
    let (eff, top) = (most_efficient(rows), best_map(rows));
    let mut s = String::from("ratio      params  mAP@0.5      FPS\n");
    for (i, r) in rows.iter().enumerate() {
        let map = r.map50.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m));
        let fps = r.fps.map_or("-".to_string(), |f| format!("{f:.1}"));
        let mut marks = String::new();
        if eff == Some(i) {
            marks.push_str(" *");
        }
        if top == Some(i) {
            marks.push_str(" +");
        }
        let _ = writeln!(
            s,
            "{:>4.0}%  {:>10}  {:>7}  {:>7}{marks}",
            100.0 * r.ratio,
            r.params,
            map,
            fps
        );
    }
    if eff.is_some() || top.is_some() {
        s.push_str("* most efficient, + best mAP\n");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::netcfg::parse_cfg;
    use crate::nnops::Tensor;
    use crate::rng::SplitMix64;
    use crate::zoo;

    fn random_store(net: &NetworkDef, seed: u64) -> WeightStore {
        let mut g = SplitMix64::new(seed);
        let mut store = WeightStore::zeros(net).unwrap();
        for w in store.convs.iter_mut().flatten() {
            for v in w.kernel.iter_mut().chain(w.biases.iter_mut()) {
                *v = g.uniform_f32(-0.3, 0.3);
            }
            if let Some(bn) = &mut w.bn {
                for v in &mut bn.gamma {
                    *v = g.uniform_f32(-1.0, 1.0);
                }
                for v in &mut bn.mean {
                    *v = g.uniform_f32(-0.1, 0.1);
                }
                for v in &mut bn.var {
                    *v = g.uniform_f32(0.5, 1.5);
                }
            }
        }
        store
    }

    /// Zeroes γ and β of every channel `mask` removes.
    fn zero_pruned(store: &mut WeightStore, mask: &PruneMask) {
        for (&l, keep) in &mask.kept {
            let w = store.conv_mut(l).unwrap();
            for ch in 0..w.biases.len() {
                if keep.binary_search(&ch).is_err() {
                    w.biases[ch] = 0.0;
                    w.bn.as_mut().unwrap().gamma[ch] = 0.0;
                }
            }
        }
    }

    const ONE: &str = "[net]\nwidth=4\nheight=4\nchannels=2\n\
        [convolutional]\nbatch_normalize=1\nfilters=3\nsize=3\npad=1\nactivation=leaky\n\
        [convolutional]\nfilters=2\nsize=1\nactivation=linear\n";

    #[test]
    fn gamma_scores_are_absolute() {
        let net = parse_cfg(ONE).unwrap();
        let mut store = WeightStore::zeros(&net).unwrap();
        store.conv_mut(0).unwrap().bn.as_mut().unwrap().gamma = vec![0.5, -0.01, 0.3];
        let s: Vec<f32> = collect_gammas(&net, &store).unwrap().iter().map(|c| c.score).collect();
        assert_eq!(s, vec![0.5, 0.01, 0.3]);
    }

    const GROUPED: &str = "[net]\nwidth=4\nheight=4\nchannels=2\n\
        [convolutional]\nbatch_normalize=1\nfilters=2\nsize=1\nactivation=leaky\n\
        [convolutional]\nbatch_normalize=1\nfilters=2\nsize=3\npad=1\nactivation=leaky\n\
        [shortcut]\nfrom=-2\nactivation=linear\n\
        [convolutional]\nfilters=1\nsize=1\nactivation=linear\n";

    #[test]
    fn group_score_is_member_max() {
        let net = parse_cfg(GROUPED).unwrap();
        let mut store = WeightStore::zeros(&net).unwrap();
        store.conv_mut(0).unwrap().bn.as_mut().unwrap().gamma = vec![0.9, 0.0];
        store.conv_mut(1).unwrap().bn.as_mut().unwrap().gamma = vec![0.0, 0.8];
        let s = collect_gammas(&net, &store).unwrap();
        assert_eq!(s.iter().map(|c| c.score).collect::<Vec<_>>(), vec![0.9, 0.8]);
        assert!(s.iter().all(|c| c.layer == 0));
    }

    #[test]
    fn quantile_threshold() {
        let net = parse_cfg(
            "[net]\nwidth=4\nheight=4\nchannels=1\n\
             [convolutional]\nbatch_normalize=1\nfilters=4\nsize=1\nactivation=leaky\n\
             [convolutional]\nfilters=1\nsize=1\nactivation=linear\n",
        )
        .unwrap();
        let scores: Vec<ChannelScore> = [0.9, 0.01, 0.5, 0.02]
            .iter()
            .enumerate()
            .map(|(channel, &score)| ChannelScore {
                layer: 0,
                channel,
                score,
            })
            .collect();
        let m = select_mask(&net, &scores, 0.5, Floor::default()).unwrap();
        assert_eq!(m.kept[&0], vec![0, 2]);
        assert_eq!(m.achieved, 0.5);
        let id = select_mask(&net, &scores, 0.0, Floor::default()).unwrap();
        assert_eq!(id.kept[&0], vec![0, 1, 2, 3]);
        assert_eq!(
            select_mask(&net, &scores, 1.0, Floor::default()),
            Err(PruneError::RatioOutOfRange(1.0))
        );
        let floored = select_mask(
            &net,
            &scores,
            0.75,
            Floor {
                min_channels: 3,
                fraction: 0.0,
            },
        )
        .unwrap();
        assert_eq!(floored.kept[&0], vec![0, 2, 3]);
    }

    #[test]
    fn slicing_arithmetic() {
        let net = parse_cfg(
            "[net]\nwidth=4\nheight=4\nchannels=3\n\
             [convolutional]\nbatch_normalize=1\nfilters=4\nsize=3\npad=1\nactivation=leaky\n\
             [convolutional]\nbatch_normalize=1\nfilters=3\nsize=1\nactivation=leaky\n\
             [convolutional]\nfilters=2\nsize=3\npad=1\nactivation=linear\n",
        )
        .unwrap();
        let store = random_store(&net, 1);
        let mask = PruneMask {
            kept: BTreeMap::from([(0, vec![1, 3]), (1, vec![0, 2])]),
            ratio: 0.5,
            threshold: 0.0,
            achieved: 0.0,
        };
        let (pn, ps) = apply_mask(&net, &store, &mask).unwrap();
        let w0 = ps.conv(0).unwrap();
        assert_eq!(w0.kernel.len(), 2 * 3 * 9);
        assert_eq!(w0.biases.len() + 3 * w0.bn.as_ref().unwrap().gamma.len(), 8);
        // layer 1 keeps rows {0, 2} and input slices {1, 3}
        let w1 = ps.conv(1).unwrap();
        let orig = &store.conv(1).unwrap().kernel;
        assert_eq!(w1.kernel, vec![orig[1], orig[3], orig[2 * 4 + 1], orig[2 * 4 + 3]]);
        // layer 2 keeps every row, input slices {0, 2}
        let w2 = ps.conv(2).unwrap();
        assert_eq!(w2.kernel.len(), 2 * 2 * 9);
        assert_eq!(&w2.kernel[9..18], &store.conv(2).unwrap().kernel[18..27]);
        assert!(graph::validate(&pn).is_empty());
    }

    #[test]
    fn inconsistent_masks_rejected() {
        let net = parse_cfg(GROUPED).unwrap();
        let store = random_store(&net, 2);
        let bad_group = PruneMask {
            kept: BTreeMap::from([(0, vec![0]), (1, vec![1])]),
            ratio: 0.5,
            threshold: 0.0,
            achieved: 0.0,
        };
        assert!(matches!(
            apply_mask(&net, &store, &bad_group),
            Err(PruneError::InconsistentMask { .. })
        ));
        let head = PruneMask {
            kept: BTreeMap::from([(3, vec![])]),
            ..bad_group.clone()
        };
        assert!(apply_mask(&net, &store, &head).is_err());
        let one = parse_cfg(ONE).unwrap();
        let unprunable = PruneMask {
            kept: BTreeMap::from([(1, vec![0])]),
            ratio: 0.5,
            threshold: 0.0,
            achieved: 0.0,
        };
        assert!(matches!(
            apply_mask(&one, &random_store(&one, 3), &unprunable),
            Err(PruneError::InconsistentMask { layer: 1, .. })
        ));
    }

    fn check_zero_gamma_equivalence(net: &NetworkDef, ratio: f64, seed: u64, inputs: usize) {
        let mut store = random_store(net, seed);
        let mask = select_mask(net, &collect_gammas(net, &store).unwrap(), ratio, Floor::default()).unwrap();
        zero_pruned(&mut store, &mask);
        let (pn, ps) = apply_mask(net, &store, &mask).unwrap();
        let full = Model::new(net.clone(), store).unwrap();
        let small = Model::new(pn, ps).unwrap();
        let mut g = SplitMix64::new(seed + 100);
        let [c, h, w] = full.input_shape();
        for _ in 0..inputs {
            let x = Tensor::chw(c, h, w, (0..c * h * w).map(|_| g.uniform_f32(0.0, 1.0)).collect()).unwrap();
            let a = full.forward(&x).unwrap();
            let b = small.forward(&x).unwrap();
            for (ta, tb) in a.iter().zip(&b) {
                assert!(ta.max_abs_diff(tb) <= 1e-5, "diff {}", ta.max_abs_diff(tb));
            }
        }
    }

    #[test]
    fn zero_gamma_equivalence_toy_and_tiny() {
        check_zero_gamma_equivalence(&zoo::toy(), 0.5, 3, 3);
        check_zero_gamma_equivalence(&zoo::resized(zoo::yolov4_tiny(), 64, 64), 0.5, 4, 1);
    }

    #[test]
    fn monotone_params_and_group_coherence() {
        let net = zoo::yolov4();
        let store = random_store(&net, 5);
        let scores = collect_gammas(&net, &store).unwrap();
        let deps = graph::dependency_groups(&net).unwrap();
        let expected: usize = deps.prune_units().iter().map(|u| filters_of(&net, u[0])).sum();
        assert_eq!(scores.len(), expected);
        let mut last = usize::MAX;
        for k in 0..=9 {
            let r = f64::from(k) / 10.0;
            let mask = select_mask(&net, &scores, r, Floor::default()).unwrap();
            for g in &deps.groups {
                let first = mask.kept.get(&g.members[0]);
                assert!(g.members.iter().all(|m| mask.kept.get(m) == first));
            }
            for (&l, keep) in &mask.kept {
                assert!(keep.len() >= Floor::default().for_filters(filters_of(&net, l)));
            }
            let (pn, _) = apply_mask(&net, &store, &mask).unwrap();
            for (i, y) in pn.yolo_layers() {
                assert_eq!(graph::infer_shapes(&pn).unwrap().shapes[i - 1].c, y.expected_channels());
            }
            let p = graph::count_parameters(&pn).unwrap().total;
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn efficiency_pick() {
        let row = |ratio, map50, fps| SweepRow {
            ratio,
            params: 1,
            map50: Some(map50),
            fps: Some(fps),
        };
        let rows = [row(0.1, 0.80, 10.0), row(0.5, 0.79, 20.0), row(0.9, 0.60, 50.0)];
        assert_eq!(most_efficient(&rows), Some(1));
        assert_eq!(best_map(&rows), Some(0));
        let table = render_sweep(&rows);
        assert!(table.lines().nth(1).unwrap().ends_with(" +"));
        assert!(table.lines().nth(2).unwrap().ends_with(" *"));
    }
}

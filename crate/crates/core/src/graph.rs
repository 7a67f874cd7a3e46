//! Static analysis over a [`NetworkDef`]: shapes, parameter counts, validation
//! and the channel-coupling structure that pruning must respect.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::netcfg::{Activation, LayerKind, NetworkDef};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GraphError {
    #[error("layer {layer}: input shapes conflict")]
    ShapeConflict { layer: usize },
    #[error("layer {layer} references invalid layer {index}")]
    BadReference { layer: usize, index: usize },
    #[error("layer {layer}: yolo head expects {expected} channels, found {actual}")]
    YoloFilterMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("layer {layer}: conv feeding a yolo head without batch norm must be linear")]
    HeadActivation { layer: usize },
    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTable {
    /// Output shape of every layer.
    pub shapes: Vec<Shape>,
    /// Layers whose outputs are the network outputs: every yolo layer, or the
    /// last layer when there is none.
    pub outputs: Vec<usize>,
    pub input: Shape,
}

impl ShapeTable {
    /// Shape of the tensor a single-input layer consumes.
    pub fn input_of(&self, _net: &NetworkDef, layer: usize) -> Shape {
        if layer == 0 {
            self.input
        } else {
            self.shapes[layer - 1]
        }
    }
}

fn walk(net: &NetworkDef, errors: &mut Vec<GraphError>) -> ShapeTable {
    let input = Shape::new(net.input_channels, net.input_height, net.input_width);
    let mut shapes: Vec<Shape> = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let prev = shapes.last().copied().unwrap_or(input);
        let fetch = |idx: usize, shapes: &[Shape], errors: &mut Vec<GraphError>| {
            if idx >= i {
                errors.push(GraphError::BadReference { layer: i, index: idx });
                prev
            } else {
                shapes[idx]
            }
        };
        let out = match &layer.kind {
            LayerKind::Convolutional(c) => {
                let p = c.padding();
                if prev.h + 2 * p < c.size || prev.w + 2 * p < c.size {
                    errors.push(GraphError::InvalidLayer {
                        layer: i,
                        reason: format!("kernel {} larger than padded input {prev}", c.size),
                    });
                    Shape::new(c.filters, 1, 1)
                } else {
                    Shape::new(
                        c.filters,
                        (prev.h + 2 * p - c.size) / c.stride + 1,
                        (prev.w + 2 * p - c.size) / c.stride + 1,
                    )
                }
            }
            LayerKind::Maxpool(m) => {
                let pad = m.size - 1;
                Shape::new(
                    prev.c,
                    (prev.h + pad - m.size) / m.stride + 1,
                    (prev.w + pad - m.size) / m.stride + 1,
                )
            }
            LayerKind::Upsample { stride } => Shape::new(prev.c, prev.h * stride, prev.w * stride),
            LayerKind::Route(r) => {
                let mut c = 0;
                let mut hw = None;
                for &src in &r.layers {
                    let s = fetch(src, &shapes, errors);
                    match hw {
                        None => hw = Some((s.h, s.w)),
                        Some(d) if d != (s.h, s.w) => errors.push(GraphError::ShapeConflict { layer: i }),
                        _ => {}
                    }
                    c += s.c;
                }
                if c % r.groups != 0 {
                    errors.push(GraphError::InvalidLayer {
                        layer: i,
                        reason: format!("{c} channels do not split into {} groups", r.groups),
                    });
                }
                let (h, w) = hw.unwrap_or((prev.h, prev.w));
                Shape::new(c / r.groups, h, w)
            }
            LayerKind::Shortcut(s) => {
                let other = fetch(s.from, &shapes, errors);
                if i > 0 && other != prev {
                    errors.push(GraphError::ShapeConflict { layer: i });
                }
                prev
            }
            LayerKind::Yolo(y) => {
                if prev.c != y.expected_channels() {
                    errors.push(GraphError::YoloFilterMismatch {
                        layer: i,
                        expected: y.expected_channels(),
                        actual: prev.c,
                    });
                }
                prev
            }
        };
        shapes.push(out);
    }
    let mut outputs: Vec<usize> = net.yolo_layers().map(|(i, _)| i).collect();
    if outputs.is_empty() && !net.layers.is_empty() {
        outputs.push(net.layers.len() - 1);
    }
    ShapeTable { shapes, outputs, input }
}

pub fn infer_shapes(net: &NetworkDef) -> Result<ShapeTable, GraphError> {
    let mut errors = Vec::new();
    let table = walk(net, &mut errors);
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(table),
    }
}

/// Every structural problem in `net`; an empty list means the network is valid.
pub fn validate(net: &NetworkDef) -> Vec<GraphError> {
    let mut errors = Vec::new();
    if net.layers.is_empty() {
        errors.push(GraphError::InvalidLayer {
            layer: 0,
            reason: "network has no layers".into(),
        });
        return errors;
    }
    walk(net, &mut errors);
    for (i, y) in net.yolo_layers() {
        if let Some(c) = i.checked_sub(1).and_then(|p| net.layers[p].kind.as_conv()) {
            if !c.batch_normalize && c.activation != Activation::Linear {
                errors.push(GraphError::HeadActivation { layer: i - 1 });
            }
        }
        if y.mask.iter().any(|&m| m >= y.anchors.len()) {
            errors.push(GraphError::InvalidLayer {
                layer: i,
                reason: "mask index outside anchor list".into(),
            });
        }
    }
    errors
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCounts {
    pub per_layer: Vec<usize>,
    pub total: usize,
}

/// Floats stored per layer: `n·c·k·k` kernel plus `4n` (batch norm) or `n` (bias).
pub fn count_parameters(net: &NetworkDef) -> Result<ParamCounts, GraphError> {
    let shapes = infer_shapes(net)?;
    let per_layer: Vec<usize> = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.kind.as_conv() {
            Some(c) => {
                let n = c.filters;
                let cin = shapes.input_of(net, i).c;
                n * cin * c.size * c.size + if c.batch_normalize { 4 * n } else { n }
            }
            None => 0,
        })
        .collect();
    let total = per_layer.iter().sum();
    Ok(ParamCounts { per_layer, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupReason {
    ShortcutAdd,
    /// The add reaches at least one member through a pass-through route.
    SharedRouteConstraint,
}

/// Conv layers whose output channels are summed together and must therefore
/// keep identical channel sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGroup {
    pub members: Vec<usize>,
    pub reason: GroupReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyAnalysis {
    pub groups: Vec<DependencyGroup>,
    /// Per layer: true for convolutional layers whose output channels may be removed.
    pub prunable: Vec<bool>,
    /// Per layer: index into `groups`.
    pub group_of: Vec<Option<usize>>,
}

impl DependencyAnalysis {
    /// Prunable layers grouped into units that share one channel mask, ordered
    /// by their first layer.
    pub fn prune_units(&self) -> Vec<Vec<usize>> {
        let mut units = Vec::new();
        for (i, &p) in self.prunable.iter().enumerate() {
            if !p {
                continue;
            }
            match self.group_of[i] {
                Some(g) if self.groups[g].members[0] != i => {}
                Some(g) => units.push(self.groups[g].members.clone()),
                None => units.push(vec![i]),
            }
        }
        units
    }
}

#[derive(Clone)]
struct Source {
    producers: BTreeSet<usize>,
    /// Output channel `k` is channel `k` of every producer.
    aligned: bool,
    via_route: bool,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let next = self.0[x];
            self.0[x] = r;
            x = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

pub fn dependency_groups(net: &NetworkDef) -> Result<DependencyAnalysis, GraphError> {
    infer_shapes(net)?;
    let n = net.layers.len();
    let mut blocked = vec![false; n];
    let mut uf = UnionFind((0..n).collect());
    let mut via_route = vec![false; n];
    let mut sources: Vec<Source> = Vec::with_capacity(n);
    let input = Source {
        producers: BTreeSet::new(),
        aligned: true,
        via_route: false,
    };

    for (i, layer) in net.layers.iter().enumerate() {
        let prev = sources.last().cloned().unwrap_or_else(|| input.clone());
        let src = match &layer.kind {
            LayerKind::Convolutional(c) => {
                if !c.batch_normalize {
                    blocked[i] = true;
                }
                Source {
                    producers: BTreeSet::from([i]),
                    aligned: true,
                    via_route: false,
                }
            }
            LayerKind::Maxpool(_) | LayerKind::Upsample { .. } | LayerKind::Yolo(_) => prev,
            LayerKind::Route(r) => {
                if r.layers.len() == 1 && r.groups == 1 {
                    let mut s = sources[r.layers[0]].clone();
                    s.via_route = true;
                    s
                } else {
                    let mut producers = BTreeSet::new();
                    for &l in &r.layers {
                        producers.extend(sources[l].producers.iter().copied());
                    }
                    if r.groups > 1 {
                        for &p in &producers {
                            blocked[p] = true;
                        }
                    }
                    Source {
                        producers,
                        aligned: false,
                        via_route: true,
                    }
                }
            }
            LayerKind::Shortcut(s) => {
                let other = &sources[s.from];
                let mut producers = prev.producers.clone();
                producers.extend(other.producers.iter().copied());
                // An operand coming straight from the network input can never
                // lose channels, so neither can anything added to it.
                let fixed = prev.producers.is_empty() || other.producers.is_empty();
                let aligned = prev.aligned && other.aligned && !fixed;
                if aligned {
                    let mut it = producers.iter().copied();
                    if let Some(first) = it.next() {
                        for p in it {
                            uf.union(first, p);
                        }
                    }
                    if prev.via_route || other.via_route {
                        for &p in &producers {
                            via_route[p] = true;
                        }
                    }
                } else {
                    for &p in &producers {
                        blocked[p] = true;
                    }
                }
                Source {
                    producers,
                    aligned,
                    via_route: false,
                }
            }
        };
        sources.push(src);
    }

    let table = infer_shapes(net)?;
    for &o in &table.outputs {
        for &p in &sources[o].producers {
            blocked[p] = true;
        }
    }

    // Collect components of size >= 2; a blocked member blocks the group.
    let mut members_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.kind.as_conv().is_some() {
            let root = uf.find(i);
            members_of[root].push(i);
        }
    }
    let mut groups = Vec::new();
    let mut group_of = vec![None; n];
    for members in members_of.into_iter().filter(|m| m.len() >= 2) {
        if members.iter().any(|&m| blocked[m]) {
            for &m in &members {
                blocked[m] = true;
            }
        }
        let reason = if members.iter().any(|&m| via_route[m]) {
            GroupReason::SharedRouteConstraint
        } else {
            GroupReason::ShortcutAdd
        };
        for &m in &members {
            group_of[m] = Some(groups.len());
        }
        groups.push(DependencyGroup { members, reason });
    }
    let prunable = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.kind.as_conv().is_some() && !blocked[i])
        .collect();
    Ok(DependencyAnalysis {
        groups,
        prunable,
        group_of,
    })
}

/// Per-layer table used by the `inspect` command.
pub fn render_layer_table(net: &NetworkDef) -> Result<String, GraphError> {
    let shapes = infer_shapes(net)?;
    let counts = count_parameters(net)?;
    let deps = dependency_groups(net)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:<14} {:>14} {:>12}  {:<8} {:>5}",
        "layer", "kind", "output", "params", "prunable", "group"
    );
    for (i, layer) in net.layers.iter().enumerate() {
        let group = deps.group_of[i].map_or_else(|| "-".to_string(), |g| g.to_string());
        let _ = writeln!(
            out,
            "{:>5}  {:<14} {:>14} {:>12}  {:<8} {:>5}",
            i,
            layer.kind.name(),
            shapes.shapes[i].to_string(),
            counts.per_layer[i],
            if deps.prunable[i] { "yes" } else { "no" },
            group
        );
    }
    let _ = writeln!(
        out,
        "total parameters: {} ({:.2} M)",
        counts.total,
        counts.total as f64 / 1e6
    );
    Ok(out)
}

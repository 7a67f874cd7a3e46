//! Darknet-style network description (`.cfg`) and weights (`.weights`) formats.
//!
//! The description format is a sequence of `[section]` headers each followed by
//! `key=value` lines. The first section must be `[net]` and carries the input
//! geometry; every following section is one layer.

mod cfg;
mod weights;

pub use cfg::{parse_cfg, parse_cfg_with_warnings, serialize_cfg, CfgError, CfgWarning};
pub use weights::{load_weights, save_weights, BnStats, ConvWeights, WeightError, WeightHeader, WeightStore};

use std::fmt;

/// Activation applied after a convolution (or a shortcut add).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Mish,
    Leaky,
    Linear,
    Sigmoid,
}

impl Activation {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "mish" => Some(Activation::Mish),
            "leaky" => Some(Activation::Leaky),
            "linear" => Some(Activation::Linear),
            "logistic" | "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Mish => "mish",
            Activation::Leaky => "leaky",
            Activation::Linear => "linear",
            Activation::Sigmoid => "logistic",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    /// Darknet `pad=1`: padding of `size / 2` on every side.
    pub pad: bool,
    pub batch_normalize: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        if self.pad {
            self.size / 2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxpoolSpec {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSpec {
    /// Absolute indices of the source layers, in concatenation order.
    pub layers: Vec<usize>,
    pub groups: usize,
    pub group_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutSpec {
    /// Absolute index of the layer added to the previous layer's output.
    pub from: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YoloSpec {
    /// Anchor sizes in input pixels.
    pub anchors: Vec<(f32, f32)>,
    /// Indices into `anchors` predicted by this head.
    pub mask: Vec<usize>,
    pub classes: usize,
    pub scale_xy: f32,
}

impl YoloSpec {
    /// Channel count the preceding conv must produce.
    pub fn expected_channels(&self) -> usize {
        (self.classes + 5) * self.mask.len()
    }

    pub fn masked_anchors(&self) -> Vec<(f32, f32)> {
        self.mask.iter().map(|&m| self.anchors[m]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Convolutional(ConvSpec),
    Maxpool(MaxpoolSpec),
    Upsample { stride: usize },
    Route(RouteSpec),
    Shortcut(ShortcutSpec),
    Yolo(YoloSpec),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Convolutional(_) => "convolutional",
            LayerKind::Maxpool(_) => "maxpool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Route(_) => "route",
            LayerKind::Shortcut(_) => "shortcut",
            LayerKind::Yolo(_) => "yolo",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvSpec> {
        match self {
            LayerKind::Convolutional(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_yolo(&self) -> Option<&YoloSpec> {
        match self {
            LayerKind::Yolo(y) => Some(y),
            _ => None,
        }
    }
}

/// One layer: its modelled attributes plus any keys this toolkit does not
/// interpret, kept verbatim so they survive a parse/serialize round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub extra: Vec<(String, String)>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub source_name: String,
    /// Uninterpreted `[net]` keys (training hyper-parameters and the like).
    pub net_extra: Vec<(String, String)>,
}

impl NetworkDef {
    pub fn yolo_layers(&self) -> impl Iterator<Item = (usize, &YoloSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.kind.as_yolo().map(|y| (i, y)))
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.kind.as_conv().map(|c| (i, c)))
    }

    /// Class count of the first yolo head, if any.
    pub fn classes(&self) -> Option<usize> {
        self.yolo_layers().next().map(|(_, y)| y.classes)
    }

    /// Layer indices a layer reads from, in order. Layer inputs that come from
    /// the network input are not listed.
    pub fn inputs_of(&self, index: usize) -> Vec<usize> {
        let prev = index.checked_sub(1);
        match &self.layers[index].kind {
            LayerKind::Route(r) => r.layers.clone(),
            LayerKind::Shortcut(s) => prev.into_iter().chain(Some(s.from)).collect(),
            _ => prev.into_iter().collect(),
        }
    }
}

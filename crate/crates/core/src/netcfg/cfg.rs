use std::fmt::Write as _;

use thiserror::Error;

use super::{Activation, ConvSpec, LayerKind, LayerSpec, MaxpoolSpec, NetworkDef, RouteSpec, ShortcutSpec, YoloSpec};

#[derive(Debug, Error, PartialEq)]
pub enum CfgError {
    #[error("malformed section at line {0}")]
    MalformedSection(usize),
    #[error("first section must be [net]")]
    MissingNetSection,
    #[error("unknown layer kind [{0}]")]
    UnknownLayerKind(String),
    #[error("layer {layer} references invalid layer index {index}")]
    BadReference { layer: usize, index: i64 },
    #[error("section [{section}] is missing required key `{key}`")]
    MissingRequiredKey { section: String, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("input geometry {width}x{height}x{channels} is invalid")]
    InvalidGeometry {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("network has no layers")]
    EmptyNetwork,
}

/// A key the parser kept but does not interpret.
#[derive(Debug, Clone, PartialEq)]
pub struct CfgWarning {
    pub line: usize,
    pub section: String,
    pub key: String,
}

// Darknet keys that are legitimately present in published cfg files but have
// no effect on inference or on the formats handled here.
const NET_KNOWN: &[&str] = &[
    "batch",
    "subdivisions",
    "momentum",
    "decay",
    "angle",
    "saturation",
    "exposure",
    "hue",
    "learning_rate",
    "burn_in",
    "max_batches",
    "policy",
    "steps",
    "scales",
    "mosaic",
    "cutmix",
    "flip",
    "blur",
    "letter_box",
    "max_chart_loss",
    "aspect",
];
const YOLO_KNOWN: &[&str] = &[
    "num",
    "jitter",
    "ignore_thresh",
    "truth_thresh",
    "random",
    "resize",
    "iou_thresh",
    "cls_normalizer",
    "iou_normalizer",
    "obj_normalizer",
    "iou_loss",
    "nms_kind",
    "beta_nms",
    "max_delta",
    "counters_per_class",
    "label_smooth_eps",
    "new_coords",
];
const CONV_KNOWN: &[&str] = &["groups", "dilation", "antialiasing", "padding"];

struct Section {
    name: String,
    line: usize,
    entries: Vec<(usize, String, String)>,
}

impl Section {
    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries
            .iter()
            .rev()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
    }

    fn required(&self, key: &str) -> Result<(usize, &str), CfgError> {
        self.get(key).ok_or_else(|| CfgError::MissingRequiredKey {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, CfgError> {
        match self.get(key) {
            Some((line, v)) => parse_num(line, key, v),
            None => Ok(default),
        }
    }

    fn required_usize(&self, key: &str) -> Result<usize, CfgError> {
        let (line, v) = self.required(key)?;
        parse_num(line, key, v)
    }

    fn activation(&self, default: Activation) -> Result<Activation, CfgError> {
        match self.get("activation") {
            Some((line, v)) => Activation::parse(v).ok_or_else(|| invalid(line, "activation", v)),
            None => Ok(default),
        }
    }

    /// Entries not in `modelled`, warning on those not in `known` either.
    fn leftovers(&self, modelled: &[&str], known: &[&str], warnings: &mut Vec<CfgWarning>) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (line, k, v) in &self.entries {
            if modelled.contains(&k.as_str()) {
                continue;
            }
            if !known.contains(&k.as_str()) {
                warnings.push(CfgWarning {
                    line: *line,
                    section: self.name.clone(),
                    key: k.clone(),
                });
            }
            out.push((k.clone(), v.clone()));
        }
        out
    }
}

fn invalid(line: usize, key: &str, value: &str) -> CfgError {
    CfgError::InvalidValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, CfgError> {
    v.trim().parse().map_err(|_| invalid(line, key, v))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, CfgError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(line, key, s))
        .collect()
}

fn split_sections(text: &str) -> Result<Vec<Section>, CfgError> {
    let mut sections: Vec<Section> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or(CfgError::MalformedSection(line_no))?
                .trim();
            if name.is_empty() {
                return Err(CfgError::MalformedSection(line_no));
            }
            sections.push(Section {
                name: name.to_string(),
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(CfgError::MalformedSection(line_no))?;
        let section = sections.last_mut().ok_or(CfgError::MalformedSection(line_no))?;
        section
            .entries
            .push((line_no, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(sections)
}

fn resolve(layer: usize, offset: i64) -> Result<usize, CfgError> {
    let abs = if offset < 0 { layer as i64 + offset } else { offset };
    if abs < 0 || abs >= layer as i64 {
        return Err(CfgError::BadReference { layer, index: offset });
    }
    Ok(abs as usize)
}

fn parse_layer(index: usize, s: &Section, warnings: &mut Vec<CfgWarning>) -> Result<LayerSpec, CfgError> {
    let (kind, extra) = match s.name.as_str() {
        "convolutional" | "conv" => {
            let filters = s.required_usize("filters")?;
            let size = s.usize_or("size", 1)?;
            let stride = s.usize_or("stride", 1)?;
            let pad = s.usize_or("pad", 0)? != 0;
            let batch_normalize = s.usize_or("batch_normalize", 0)? != 0;
            let activation = s.activation(Activation::Sigmoid)?;
            if filters == 0 {
                let (l, v) = s.required("filters")?;
                return Err(invalid(l, "filters", v));
            }
            if size % 2 == 0 {
                let (l, v) = s.get("size").unwrap_or((s.line, "?"));
                return Err(invalid(l, "size", v));
            }
            if stride == 0 {
                let (l, v) = s.get("stride").unwrap_or((s.line, "?"));
                return Err(invalid(l, "stride", v));
            }
            let modelled = ["filters", "size", "stride", "pad", "batch_normalize", "activation"];
            (
                LayerKind::Convolutional(ConvSpec {
                    filters,
                    size,
                    stride,
                    pad,
                    batch_normalize,
                    activation,
                }),
                s.leftovers(&modelled, CONV_KNOWN, warnings),
            )
        }
        "maxpool" | "max" => {
            let stride = s.usize_or("stride", 1)?;
            let size = s.usize_or("size", stride)?;
            if size == 0 || stride == 0 {
                return Err(invalid(s.line, "size", &size.to_string()));
            }
            (
                LayerKind::Maxpool(MaxpoolSpec { size, stride }),
                s.leftovers(&["size", "stride"], &[], warnings),
            )
        }
        "upsample" => {
            let stride = s.usize_or("stride", 2)?;
            if stride == 0 {
                return Err(invalid(s.line, "stride", "0"));
            }
            (LayerKind::Upsample { stride }, s.leftovers(&["stride"], &[], warnings))
        }
        "route" => {
            let (line, v) = s.required("layers")?;
            let offsets: Vec<i64> = parse_list(line, "layers", v)?;
            if offsets.is_empty() {
                return Err(invalid(line, "layers", v));
            }
            let layers = offsets
                .into_iter()
                .map(|o| resolve(index, o))
                .collect::<Result<Vec<_>, _>>()?;
            let groups = s.usize_or("groups", 1)?;
            let group_id = s.usize_or("group_id", 0)?;
            if groups == 0 || group_id >= groups {
                return Err(invalid(s.line, "group_id", &group_id.to_string()));
            }
            (
                LayerKind::Route(RouteSpec {
                    layers,
                    groups,
                    group_id,
                }),
                s.leftovers(&["layers", "groups", "group_id"], &[], warnings),
            )
        }
        "shortcut" => {
            let (line, v) = s.required("from")?;
            let offset: i64 = parse_num(line, "from", v)?;
            let from = resolve(index, offset)?;
            if index == 0 {
                return Err(CfgError::BadReference { layer: 0, index: -1 });
            }
            let activation = s.activation(Activation::Linear)?;
            (
                LayerKind::Shortcut(ShortcutSpec { from, activation }),
                s.leftovers(&["from", "activation"], &[], warnings),
            )
        }
        "yolo" => {
            let (line, v) = s.required("anchors")?;
            let flat: Vec<f32> = parse_list(line, "anchors", v)?;
            if flat.is_empty() || !flat.len().is_multiple_of(2) {
                return Err(invalid(line, "anchors", v));
            }
            let anchors: Vec<(f32, f32)> = flat.chunks(2).map(|p| (p[0], p[1])).collect();
            let mask = match s.get("mask") {
                Some((line, v)) => {
                    let m: Vec<usize> = parse_list(line, "mask", v)?;
                    if m.is_empty() || m.iter().any(|&i| i >= anchors.len()) {
                        return Err(invalid(line, "mask", v));
                    }
                    m
                }
                None => (0..anchors.len()).collect(),
            };
            let classes = s.required_usize("classes")?;
            if classes == 0 {
                return Err(invalid(s.required("classes")?.0, "classes", "0"));
            }
            let scale_xy = match s.get("scale_x_y") {
                Some((line, v)) => parse_num(line, "scale_x_y", v)?,
                None => 1.0,
            };
            (
                LayerKind::Yolo(YoloSpec {
                    anchors,
                    mask,
                    classes,
                    scale_xy,
                }),
                s.leftovers(&["anchors", "mask", "classes", "scale_x_y"], YOLO_KNOWN, warnings),
            )
        }
        other => return Err(CfgError::UnknownLayerKind(other.to_string())),
    };
    Ok(LayerSpec { kind, extra })
}

/// Parses a network description, discarding warnings about unknown keys.
pub fn parse_cfg(text: &str) -> Result<NetworkDef, CfgError> {
    parse_cfg_with_warnings(text).map(|(net, _)| net)
}

pub fn parse_cfg_with_warnings(text: &str) -> Result<(NetworkDef, Vec<CfgWarning>), CfgError> {
    let sections = split_sections(text)?;
    let (head, rest) = sections.split_first().ok_or(CfgError::MissingNetSection)?;
    if head.name != "net" && head.name != "network" {
        return Err(CfgError::MissingNetSection);
    }
    let mut warnings = Vec::new();
    let input_width = head.required_usize("width")?;
    let input_height = head.required_usize("height")?;
    let input_channels = head.required_usize("channels")?;
    let net_extra = head.leftovers(&["width", "height", "channels"], NET_KNOWN, &mut warnings);

    let layers = rest
        .iter()
        .enumerate()
        .map(|(i, s)| parse_layer(i, s, &mut warnings))
        .collect::<Result<Vec<_>, _>>()?;
    if layers.is_empty() {
        return Err(CfgError::EmptyNetwork);
    }

    let net = NetworkDef {
        input_width,
        input_height,
        input_channels,
        layers,
        source_name: String::new(),
        net_extra,
    };
    check_geometry(&net)?;
    for w in &warnings {
        log::warn!("line {}: unknown key `{}` in [{}]", w.line, w.key, w.section);
    }
    Ok((net, warnings))
}

fn check_geometry(net: &NetworkDef) -> Result<(), CfgError> {
    let has_yolo = net.yolo_layers().next().is_some();
    let bad = net.input_width == 0
        || net.input_height == 0
        || net.input_channels == 0
        || (has_yolo && (!net.input_width.is_multiple_of(32) || !net.input_height.is_multiple_of(32)));
    if bad {
        return Err(CfgError::InvalidGeometry {
            width: net.input_width,
            height: net.input_height,
            channels: net.input_channels,
        });
    }
    Ok(())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Emits the description text. Route and shortcut references are written as
/// absolute indices.
pub fn serialize_cfg(net: &NetworkDef) -> Result<String, CfgError> {
    if net.layers.is_empty() {
        return Err(CfgError::EmptyNetwork);
    }
    let mut out = String::new();
    let _ = writeln!(out, "[net]");
    let _ = writeln!(out, "width={}", net.input_width);
    let _ = writeln!(out, "height={}", net.input_height);
    let _ = writeln!(out, "channels={}", net.input_channels);
    for (k, v) in &net.net_extra {
        let _ = writeln!(out, "{k}={v}");
    }
    for layer in &net.layers {
        out.push('\n');
        let _ = writeln!(out, "[{}]", layer.kind.name());
        match &layer.kind {
            LayerKind::Convolutional(c) => {
                if c.batch_normalize {
                    let _ = writeln!(out, "batch_normalize=1");
                }
                let _ = writeln!(out, "filters={}", c.filters);
                let _ = writeln!(out, "size={}", c.size);
                let _ = writeln!(out, "stride={}", c.stride);
                let _ = writeln!(out, "pad={}", u8::from(c.pad));
                let _ = writeln!(out, "activation={}", c.activation);
            }
            LayerKind::Maxpool(m) => {
                let _ = writeln!(out, "size={}", m.size);
                let _ = writeln!(out, "stride={}", m.stride);
            }
            LayerKind::Upsample { stride } => {
                let _ = writeln!(out, "stride={stride}");
            }
            LayerKind::Route(r) => {
                let _ = writeln!(out, "layers={}", join(&r.layers));
                if r.groups != 1 {
                    let _ = writeln!(out, "groups={}", r.groups);
                    let _ = writeln!(out, "group_id={}", r.group_id);
                }
            }
            LayerKind::Shortcut(s) => {
                let _ = writeln!(out, "from={}", s.from);
                let _ = writeln!(out, "activation={}", s.activation);
            }
            LayerKind::Yolo(y) => {
                let _ = writeln!(out, "mask={}", join(&y.mask));
                let anchors: Vec<String> = y.anchors.iter().map(|(w, h)| format!("{w},{h}")).collect();
                let _ = writeln!(out, "anchors={}", anchors.join(", "));
                let _ = writeln!(out, "classes={}", y.classes);
                let _ = writeln!(out, "scale_x_y={}", y.scale_xy);
            }
        }
        for (k, v) in &layer.extra {
            let _ = writeln!(out, "{k}={v}");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        "[net]\nwidth=32\nheight=32\nchannels=3\n\n[convolutional]\nfilters=8\nsize=3\nstride=1\npad=1\n";

    #[test]
    fn minimal_network() {
        let net = parse_cfg(MINIMAL).unwrap();
        assert_eq!(net.layers.len(), 1);
        assert_eq!((net.input_width, net.input_height, net.input_channels), (32, 32, 3));
        let conv = net.layers[0].kind.as_conv().unwrap();
        assert_eq!(conv.filters, 8);
        assert_eq!(conv.padding(), 1);
    }

    #[test]
    fn route_offsets_resolve_relative_to_current_layer() {
        let mut text = String::from("[net]\nwidth=32\nheight=32\nchannels=3\n");
        for _ in 0..10 {
            text.push_str("[convolutional]\nfilters=4\nsize=1\n");
        }
        text.push_str("[route]\nlayers=-1,-7\n");
        let net = parse_cfg(&text).unwrap();
        match &net.layers[10].kind {
            LayerKind::Route(r) => assert_eq!(r.layers, vec![9, 3]),
            other => panic!("expected route, got {other:?}"),
        }
    }

    #[test]
    fn forward_reference_is_rejected() {
        let text = "[net]\nwidth=32\nheight=32\nchannels=3\n[convolutional]\nfilters=4\nsize=1\n[route]\nlayers=1\n";
        assert_eq!(parse_cfg(text), Err(CfgError::BadReference { layer: 1, index: 1 }));
        let text = "[net]\nwidth=32\nheight=32\nchannels=3\n[convolutional]\nfilters=4\nsize=1\n[shortcut]\nfrom=-5\n";
        assert!(matches!(parse_cfg(text), Err(CfgError::BadReference { layer: 1, .. })));
    }

    #[test]
    fn unknown_section_is_an_error_unknown_key_a_warning() {
        let text = format!("{MINIMAL}[dropout]\nprobability=.5\n");
        assert_eq!(parse_cfg(&text), Err(CfgError::UnknownLayerKind("dropout".into())));

        let text = format!("{MINIMAL}vendor_knob=7\n");
        let (net, warnings) = parse_cfg_with_warnings(&text).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].key, "vendor_knob");
        assert_eq!(net.layers[0].extra, vec![("vendor_knob".to_string(), "7".to_string())]);
    }

    #[test]
    fn malformed_lines() {
        assert_eq!(parse_cfg("[net\nwidth=1\n"), Err(CfgError::MalformedSection(1)));
        assert_eq!(parse_cfg("width=1\n[net]\n"), Err(CfgError::MalformedSection(1)));
        assert_eq!(parse_cfg("[net]\nwidth 32\n"), Err(CfgError::MalformedSection(2)));
        assert_eq!(
            parse_cfg("[convolutional]\nfilters=1\n"),
            Err(CfgError::MissingNetSection)
        );
    }

    #[test]
    fn missing_required_keys() {
        let text = "[net]\nwidth=32\nheight=32\nchannels=3\n[convolutional]\nsize=3\n";
        assert_eq!(
            parse_cfg(text),
            Err(CfgError::MissingRequiredKey {
                section: "convolutional".into(),
                key: "filters".into()
            })
        );
        assert!(matches!(
            parse_cfg("[net]\nwidth=32\n[maxpool]\nsize=2\n"),
            Err(CfgError::MissingRequiredKey { .. })
        ));
    }

    #[test]
    fn invalid_values() {
        let even = "[net]\nwidth=32\nheight=32\nchannels=3\n[convolutional]\nfilters=4\nsize=2\n";
        assert!(matches!(parse_cfg(even), Err(CfgError::InvalidValue { .. })));
        let yolo = "[net]\nwidth=30\nheight=32\nchannels=3\n[convolutional]\nfilters=8\nsize=1\n[yolo]\nmask=0\nanchors=1,2\nclasses=3\n";
        assert!(matches!(parse_cfg(yolo), Err(CfgError::InvalidGeometry { .. })));
        let mask = "[net]\nwidth=32\nheight=32\nchannels=3\n[convolutional]\nfilters=8\nsize=1\n[yolo]\nmask=0,3\nanchors=1,2\nclasses=3\n";
        assert!(matches!(parse_cfg(mask), Err(CfgError::InvalidValue { .. })));
    }

    #[test]
    fn comments_and_whitespace() {
        let text =
            "# leading comment\n[net]\n width = 64 \nheight=32 # trailing\nchannels=1\n\n[maxpool]\nsize=2\nstride=2\n";
        let net = parse_cfg(text).unwrap();
        assert_eq!(net.input_width, 64);
        assert_eq!(
            net.layers[0].kind,
            LayerKind::Maxpool(MaxpoolSpec { size: 2, stride: 2 })
        );
    }

    #[test]
    fn serialize_round_trip_and_empty_refusal() {
        let net = parse_cfg(MINIMAL).unwrap();
        let text = serialize_cfg(&net).unwrap();
        assert_eq!(parse_cfg(&text).unwrap(), net);

        let mut empty = net;
        empty.layers.clear();
        assert_eq!(serialize_cfg(&empty), Err(CfgError::EmptyNetwork));
    }
}

//! Bundled network descriptions and their freeze-range table.

use std::ops::RangeInclusive;

use crate::netcfg::{parse_cfg, NetworkDef};

pub const YOLOV4_CFG: &str = include_str!("../cfg/yolov4.cfg");
pub const YOLOV4_TINY_CFG: &str = include_str!("../cfg/yolov4-tiny.cfg");
pub const TOY_CFG: &str = include_str!("../cfg/toy.cfg");
const FREEZE_TABLE: &str = include_str!("../cfg/freeze.ranges");

fn load(text: &str, name: &str) -> NetworkDef {
    let mut net = parse_cfg(text).expect("bundled cfg parses");
    net.source_name = name.to_string();
    net
}

/// Standard YOLOv4 (CSPDarknet53, SPP, PANet, three heads) with 3 classes.
pub fn yolov4() -> NetworkDef {
    load(YOLOV4_CFG, "yolov4")
}

pub fn yolov4_tiny() -> NetworkDef {
    load(YOLOV4_TINY_CFG, "yolov4-tiny")
}

/// 32×32 single-head detector used for CPU-scale training.
pub fn toy() -> NetworkDef {
    load(TOY_CFG, "toy")
}

pub fn by_name(name: &str) -> Option<NetworkDef> {
    match name {
        "yolov4" => Some(yolov4()),
        "yolov4-tiny" => Some(yolov4_tiny()),
        "toy" => Some(toy()),
        _ => None,
    }
}

/// Same network at another input size. Parameter counts do not depend on it.
pub fn resized(mut net: NetworkDef, width: usize, height: usize) -> NetworkDef {
    net.input_width = width;
    net.input_height = height;
    net
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeRanges {
    pub backbone: RangeInclusive<usize>,
    pub backbone_neck: RangeInclusive<usize>,
}

fn parse_range(s: &str) -> Option<RangeInclusive<usize>> {
    let (a, b) = s.split_once('-')?;
    Some(a.trim().parse().ok()?..=b.trim().parse().ok()?)
}

/// Parses lines of `name backbone=a-b backbone_neck=c-d`.
pub fn parse_freeze_table(text: &str) -> Vec<(String, FreezeRanges)> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let name = parts.next()?.to_string();
            let (mut bb, mut bn) = (None, None);
            for p in parts {
                match p.split_once('=') {
                    Some(("backbone", r)) => bb = parse_range(r),
                    Some(("backbone_neck", r)) => bn = parse_range(r),
                    _ => {}
                }
            }
            Some((
                name,
                FreezeRanges {
                    backbone: bb?,
                    backbone_neck: bn?,
                },
            ))
        })
        .collect()
}

/// Default freeze ranges for a bundled network name.
pub fn freeze_ranges(name: &str) -> Option<FreezeRanges> {
    parse_freeze_table(FREEZE_TABLE)
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph;

    #[test]
    fn bundled_networks_validate() {
        for net in [yolov4(), yolov4_tiny(), toy()] {
            assert!(graph::validate(&net).is_empty(), "{}", net.source_name);
        }
        assert_eq!(yolov4().layers.len(), 162);
        assert_eq!(yolov4_tiny().layers.len(), 38);
    }

    #[test]
    fn freeze_table_covers_bundled_networks() {
        for name in ["yolov4", "yolov4-tiny", "toy"] {
            let r = freeze_ranges(name).unwrap();
            let n = by_name(name).unwrap().layers.len();
            assert!(*r.backbone_neck.end() < n);
            assert!(r.backbone.end() <= r.backbone_neck.end());
        }
        assert_eq!(freeze_ranges("yolov4").unwrap().backbone, 0..=104);
    }
}

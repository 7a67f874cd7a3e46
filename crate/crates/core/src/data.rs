//! Datasets, letterboxing and seeded augmentation.
//!
//! Images are `3×H×W` tensors with values in `[0, 1]`. Labels follow the
//! usual one-file-per-image convention: lines of `class cx cy w h`, all
//! normalized. Every augmentation is a pure function of its inputs and seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::detect::{BBox, GroundTruth, CLASS_NAMES};
use crate::nnops::Tensor;
use crate::rng::SplitMix64;

/// Padding value for letterbox borders and affine fill.
pub const PAD_GRAY: f32 = 0.5;
/// Boxes keeping less than this fraction of their area after a crop are dropped.
pub const MIN_VISIBLE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no label file for {0}")]
    MissingLabel(PathBuf),
    #[error("{file}:{line}: malformed label line")]
    MalformedLine { file: PathBuf, line: usize },
    #[error("{file}:{line}: box outside the image")]
    BoxOutOfRange { file: PathBuf, line: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
    pub id: String,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.w()
    }

    pub fn height(&self) -> usize {
        self.image.h()
    }
}

/// Parses a label file body. Boxes must have their center inside the image
/// and a size in `(0, 1]`; the extent is then clipped to the image.
pub fn parse_labels(text: &str, file: &Path) -> Result<Vec<GroundTruth>, DataError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = || DataError::MalformedLine {
            file: file.to_path_buf(),
            line: n + 1,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(malformed());
        }
        let class_id: usize = fields[0].parse().map_err(|_| malformed())?;
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| malformed())?;
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(malformed());
        }
        let [cx, cy, w, h] = v;
        let inside =
            (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy) && w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0;
        if !inside {
            return Err(DataError::BoxOutOfRange {
                file: file.to_path_buf(),
                line: n + 1,
            });
        }
        let mut bbox = BBox::new(cx, cy, w, h);
        let (x1, y1, x2, y2) = bbox.corners();
        if x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0 {
            bbox = bbox.clipped();
        }
        out.push(GroundTruth { class_id, bbox });
    }
    Ok(out)
}

pub fn format_labels(gts: &[GroundTruth]) -> String {
    gts.iter()
        .map(|g| {
            format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                g.class_id, g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h
            )
        })
        .collect()
}

pub fn image_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f32::from(p[c]) / 255.0;
        }
    }
    Tensor::chw(3, h, w, data).expect("consistent dims")
}

pub fn tensor_to_image(t: &Tensor) -> image::RgbImage {
    let (h, w) = (t.h(), t.w());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_image(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        e => DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    })?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<(), DataError> {
    tensor_to_image(t).save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads an image list (one path per line, relative to the list file) and the
/// label for each image from `label_dir/<stem>.txt`.
pub fn load_dataset(list: &Path, label_dir: &Path) -> Result<Vec<Sample>, DataError> {
    let text = fs::read_to_string(list).map_err(io_err(list))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    paths
        .par_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let label = label_dir.join(format!("{stem}.txt"));
            if !label.is_file() {
                return Err(DataError::MissingLabel(p.clone()));
            }
            let body = fs::read_to_string(&label).map_err(io_err(&label))?;
            let gts = parse_labels(&body, &label)?;
            Ok(Sample {
                image: load_image(p)?,
                gts,
                id: stem,
            })
        })
        .collect()
}

/// Bilinear sample at continuous pixel coordinates (pixel centers at
/// integers), clamping to the edge.
fn bilinear(t: &Tensor, c: usize, y: f64, x: f64) -> f32 {
    let (h, w) = (t.h(), t.w());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let p = t.plane(c);
    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Fills `dst[.., oy..oy+rh, ox..ox+rw]` from `src` through the map
/// `src_coord = (dst_coord - origin + offset + 0.5) / scale - 0.5`.
fn resample_into(
    src: &Tensor,
    dst: &mut Tensor,
    (ox, oy): (usize, usize),
    (rw, rh): (usize, usize),
    (off_x, off_y): (f64, f64),
    (sx, sy): (f64, f64),
) {
    let (dh, dw) = (dst.h(), dst.w());
    let data = dst.data_mut();
    for c in 0..3 {
        for y in oy..oy + rh {
            let src_y = ((y - oy) as f64 + off_y + 0.5) / sy - 0.5;
            for x in ox..ox + rw {
                let src_x = ((x - ox) as f64 + off_x + 0.5) / sx - 0.5;
                data[(c * dh + y) * dw + x] = bilinear(src, c, src_y, src_x);
            }
        }
    }
}

pub fn resize(src: &Tensor, w: usize, h: usize) -> Tensor {
    if src.w() == w && src.h() == h {
        return src.clone();
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    resample_into(
        src,
        &mut out,
        (0, 0),
        (w, h),
        (0.0, 0.0),
        (w as f64 / src.w() as f64, h as f64 / src.h() as f64),
    );
    out
}

/// How an image was placed inside the network canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub src_w: usize,
    pub src_h: usize,
    pub net_w: usize,
    pub net_h: usize,
    /// Resized image size inside the canvas.
    pub new_w: usize,
    pub new_h: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, net_w: usize, net_h: usize) -> Self {
        let scale = (net_w as f64 / src_w as f64).min(net_h as f64 / src_h as f64);
        let new_w = ((src_w as f64 * scale).round() as usize).clamp(1, net_w);
        let new_h = ((src_h as f64 * scale).round() as usize).clamp(1, net_h);
        Letterbox {
            src_w,
            src_h,
            net_w,
            net_h,
            new_w,
            new_h,
            pad_x: (net_w - new_w) / 2,
            pad_y: (net_h - new_h) / 2,
        }
    }

    /// Source-normalized box to canvas-normalized box.
    pub fn map_box(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx * self.new_w as f64 + self.pad_x as f64) / self.net_w as f64,
            (b.cy * self.new_h as f64 + self.pad_y as f64) / self.net_h as f64,
            b.w * self.new_w as f64 / self.net_w as f64,
            b.h * self.new_h as f64 / self.net_h as f64,
        )
    }

    /// Inverse of [`Letterbox::map_box`].
    pub fn unmap_box(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx * self.net_w as f64 - self.pad_x as f64) / self.new_w as f64,
            (b.cy * self.net_h as f64 - self.pad_y as f64) / self.new_h as f64,
            b.w * self.net_w as f64 / self.new_w as f64,
            b.h * self.net_h as f64 / self.new_h as f64,
        )
    }
}

/// Aspect-preserving resize onto a gray canvas.
pub fn letterbox_image(img: &Tensor, net_w: usize, net_h: usize) -> (Tensor, Letterbox) {
    let lb = Letterbox::new(img.w(), img.h(), net_w, net_h);
    if lb.new_w == net_w && lb.new_h == net_h {
        return (resize(img, net_w, net_h), lb);
    }
    let mut out = Tensor::full(&[3, net_h, net_w], PAD_GRAY);
    resample_into(
        img,
        &mut out,
        (lb.pad_x, lb.pad_y),
        (lb.new_w, lb.new_h),
        (0.0, 0.0),
        (lb.new_w as f64 / img.w() as f64, lb.new_h as f64 / img.h() as f64),
    );
    (out, lb)
}

pub fn letterbox(sample: &Sample, net_w: usize, net_h: usize) -> (Sample, Letterbox) {
    let (image, lb) = letterbox_image(&sample.image, net_w, net_h);
    let gts = sample
        .gts
        .iter()
        .map(|g| GroundTruth {
            class_id: g.class_id,
            bbox: lb.map_box(&g.bbox),
        })
        .collect();
    (
        Sample {
            image,
            gts,
            id: sample.id.clone(),
        },
        lb,
    )
}

/// Clips `b` to `[x0, x1] × [y0, y1]`; `None` when less than [`MIN_VISIBLE`]
/// of its area survives.
fn clip_keep(b: &BBox, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<BBox> {
    let (bx1, by1, bx2, by2) = b.corners();
    let c = BBox::from_corners(bx1.max(x0), by1.max(y0), bx2.min(x1), by2.min(y1));
    if c.w <= 0.0 || c.h <= 0.0 || c.area() < MIN_VISIBLE * b.area() {
        None
    } else {
        Some(c)
    }
}

/// Where one mosaic input landed: pixel quadrant, cover scale and crop offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosaicTile {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub scale: f64,
    pub crop_x: f64,
    pub crop_y: f64,
}

impl MosaicTile {
    /// Maps a source-normalized box into the mosaic canvas (not clipped).
    pub fn map_box(&self, b: &BBox, src_w: usize, src_h: usize, net_w: usize, net_h: usize) -> BBox {
        let px = |v: f64, n: usize| v * n as f64 * self.scale;
        BBox::new(
            (px(b.cx, src_w) - self.crop_x + self.x as f64) / net_w as f64,
            (px(b.cy, src_h) - self.crop_y + self.y as f64) / net_h as f64,
            px(b.w, src_w) / net_w as f64,
            px(b.h, src_h) / net_h as f64,
        )
    }
}

/// Split point for a mosaic, uniform in `[0.3, 0.7]²` of the canvas.
pub fn mosaic_split(net_w: usize, net_h: usize, seed: u64) -> (usize, usize) {
    let mut g = SplitMix64::new(seed);
    let px = g.uniform(0.3, 0.7);
    let py = g.uniform(0.3, 0.7);
    (
        ((px * net_w as f64).round() as usize).clamp(1, net_w - 1),
        ((py * net_h as f64).round() as usize).clamp(1, net_h - 1),
    )
}

/// Quadrant layout for four inputs of the given sizes.
pub fn mosaic_tiles(sizes: [(usize, usize); 4], net_w: usize, net_h: usize, seed: u64) -> [MosaicTile; 4] {
    let (sx, sy) = mosaic_split(net_w, net_h, seed);
    let quads = [
        (0, 0, sx, sy),
        (sx, 0, net_w - sx, sy),
        (0, sy, sx, net_h - sy),
        (sx, sy, net_w - sx, net_h - sy),
    ];
    std::array::from_fn(|k| {
        let (x, y, w, h) = quads[k];
        let (iw, ih) = sizes[k];
        let scale = (w as f64 / iw as f64).max(h as f64 / ih as f64);
        MosaicTile {
            x,
            y,
            w,
            h,
            scale,
            crop_x: (iw as f64 * scale - w as f64) / 2.0,
            crop_y: (ih as f64 * scale - h as f64) / 2.0,
        }
    })
}

/// Four-image mosaic: each input is scaled to cover its quadrant and center
/// cropped; boxes are remapped, clipped to the quadrant and dropped when less
/// than a quarter of them remains.
pub fn mosaic(samples: &[Sample; 4], net_w: usize, net_h: usize, seed: u64) -> Sample {
    let sizes = std::array::from_fn(|k| (samples[k].width(), samples[k].height()));
    let tiles = mosaic_tiles(sizes, net_w, net_h, seed);
    let mut image = Tensor::full(&[3, net_h, net_w], PAD_GRAY);
    let mut gts = Vec::new();
    for (s, t) in samples.iter().zip(&tiles) {
        resample_into(
            &s.image,
            &mut image,
            (t.x, t.y),
            (t.w, t.h),
            (t.crop_x, t.crop_y),
            (t.scale, t.scale),
        );
        let (x0, y0) = (t.x as f64 / net_w as f64, t.y as f64 / net_h as f64);
        let (x1, y1) = ((t.x + t.w) as f64 / net_w as f64, (t.y + t.h) as f64 / net_h as f64);
        for g in &s.gts {
            let m = t.map_box(&g.bbox, s.width(), s.height(), net_w, net_h);
            if let Some(bbox) = clip_keep(&m, x0, y0, x1, y1) {
                gts.push(GroundTruth {
                    class_id: g.class_id,
                    bbox,
                });
            }
        }
    }
    Sample {
        image,
        gts,
        id: format!(
            "mosaic-{}",
            samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+")
        ),
    }
}

/// Probabilities and magnitudes of the basic augmentations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip: f64,
    pub crop: f64,
    /// Smallest kept side fraction of a random crop.
    pub crop_min: f64,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub blur: f64,
    pub affine: f64,
    pub max_rotate_deg: f64,
    pub max_scale: f64,
    pub max_translate: f64,
}

impl AugmentConfig {
    /// Leaves every sample untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            flip: 0.0,
            crop: 0.0,
            crop_min: 1.0,
            hue: 0.0,
            saturation: 0.0,
            value: 0.0,
            blur: 0.0,
            affine: 0.0,
            max_rotate_deg: 0.0,
            max_scale: 0.0,
            max_translate: 0.0,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: 0.5,
            crop: 0.3,
            crop_min: 0.7,
            hue: 0.02,
            saturation: 0.3,
            value: 0.3,
            blur: 0.1,
            affine: 0.2,
            max_rotate_deg: 5.0,
            max_scale: 0.1,
            max_translate: 0.05,
        }
    }
}

fn flip_horizontal(s: &mut Sample) {
    let (h, w) = (s.height(), s.width());
    let d = s.image.data_mut();
    for row in d.chunks_mut(w).take(3 * h) {
        row.reverse();
    }
    for g in &mut s.gts {
        g.bbox.cx = 1.0 - g.bbox.cx;
    }
}

fn random_crop(s: &mut Sample, cfg: &AugmentConfig, g: &mut SplitMix64) {
    let (w, h) = (s.width(), s.height());
    let fw = g.uniform(cfg.crop_min.clamp(0.1, 1.0), 1.0);
    let fh = g.uniform(cfg.crop_min.clamp(0.1, 1.0), 1.0);
    let (x0, y0) = (g.uniform(0.0, 1.0 - fw), g.uniform(0.0, 1.0 - fh));
    let mut out = Tensor::zeros(&[3, h, w]);
    resample_into(
        &s.image,
        &mut out,
        (0, 0),
        (w, h),
        (x0 * w as f64 / fw, y0 * h as f64 / fh),
        (1.0 / fw, 1.0 / fh),
    );
    s.image = out;
    s.gts = s
        .gts
        .iter()
        .filter_map(|gt| {
            let b = BBox::new(
                (gt.bbox.cx - x0) / fw,
                (gt.bbox.cy - y0) / fh,
                gt.bbox.w / fw,
                gt.bbox.h / fh,
            );
            clip_keep(&b, 0.0, 0.0, 1.0, 1.0).map(|bbox| GroundTruth { bbox, ..*gt })
        })
        .collect();
}

fn random_affine(s: &mut Sample, cfg: &AugmentConfig, g: &mut SplitMix64) {
    let (w, h) = (s.width(), s.height());
    let theta = g.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg).to_radians();
    let k = g.uniform(1.0 - cfg.max_scale, 1.0 + cfg.max_scale);
    let tx = g.uniform(-cfg.max_translate, cfg.max_translate) * w as f64;
    let ty = g.uniform(-cfg.max_translate, cfg.max_translate) * h as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (cos, sin) = (theta.cos() * k, theta.sin() * k);
    // forward: p' = A (p - c) + c + t; pixels are pulled through the inverse
    let fwd = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        (cos * dx - sin * dy + cx + tx, sin * dx + cos * dy + cy + ty)
    };
    let det = cos * cos + sin * sin;
    let inv = |x: f64, y: f64| {
        let (dx, dy) = (x - cx - tx, y - cy - ty);
        ((cos * dx + sin * dy) / det + cx, (-sin * dx + cos * dy) / det + cy)
    };
    let mut out = Tensor::full(&[3, h, w], PAD_GRAY);
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv(x as f64 + 0.5, y as f64 + 0.5);
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            for c in 0..3 {
                data[(c * h + y) * w + x] = bilinear(&s.image, c, sy - 0.5, sx - 0.5);
            }
        }
    }
    s.image = out;
    s.gts = s
        .gts
        .iter()
        .filter_map(|gt| {
            let (x1, y1, x2, y2) = gt.bbox.corners();
            let pts = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)].map(|(x, y)| fwd(x * w as f64, y * h as f64));
            let minx = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) / w as f64;
            let maxx = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) / w as f64;
            let miny = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) / h as f64;
            let maxy = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) / h as f64;
            clip_keep(&BBox::from_corners(minx, miny, maxx, maxy), 0.0, 0.0, 1.0, 1.0)
                .map(|bbox| GroundTruth { bbox, ..*gt })
        })
        .collect();
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn hsv_jitter(s: &mut Sample, cfg: &AugmentConfig, g: &mut SplitMix64) {
    let dh = g.uniform(-cfg.hue, cfg.hue) as f32;
    let ks = 1.0 + g.uniform(-cfg.saturation, cfg.saturation) as f32;
    let kv = 1.0 + g.uniform(-cfg.value, cfg.value) as f32;
    let n = s.height() * s.width();
    let d = s.image.data_mut();
    for p in 0..n {
        let (h, sat, v) = rgb_to_hsv(d[p], d[n + p], d[2 * n + p]);
        let (r, gg, b) = hsv_to_rgb(h + dh, (sat * ks).clamp(0.0, 1.0), (v * kv).clamp(0.0, 1.0));
        d[p] = r.clamp(0.0, 1.0);
        d[n + p] = gg.clamp(0.0, 1.0);
        d[2 * n + p] = b.clamp(0.0, 1.0);
    }
}

/// 3×3 binomial blur with clamped edges.
fn blur(s: &mut Sample) {
    let (h, w) = (s.height(), s.width());
    let k = [1.0f32, 2.0, 1.0];
    let src = s.image.clone();
    let d = s.image.data_mut();
    for c in 0..3 {
        let p = src.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, ky) in k.iter().enumerate() {
                    let yy = (y + dy).saturating_sub(1).min(h - 1);
                    for (dx, kx) in k.iter().enumerate() {
                        let xx = (x + dx).saturating_sub(1).min(w - 1);
                        acc += ky * kx * p[yy * w + xx];
                    }
                }
                d[(c * h + y) * w + x] = acc / 16.0;
            }
        }
    }
}

/// Flip, crop, affine, color jitter and blur, each applied with its configured
/// probability. Pixel values stay in `[0, 1]` and boxes inside the image.
pub fn basic_transforms(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut g = SplitMix64::new(seed);
    let mut s = sample.clone();
    if g.chance(cfg.flip) {
        flip_horizontal(&mut s);
    }
    if g.chance(cfg.crop) {
        random_crop(&mut s, cfg, &mut g);
    }
    if g.chance(cfg.affine) {
        random_affine(&mut s, cfg, &mut g);
    }
    if cfg.hue > 0.0 || cfg.saturation > 0.0 || cfg.value > 0.0 {
        hsv_jitter(&mut s, cfg, &mut g);
    }
    if g.chance(cfg.blur) {
        blur(&mut s);
    }
    s
}

/// Colored shapes on noise: red rectangles are plastic, green ellipses bio,
/// blue rectangles rov.
pub fn synthetic_sample(size: usize, seed: u64, id: u64) -> Sample {
    let mut g = SplitMix64::derive(seed, id);
    let n = size * size;
    let mut data: Vec<f32> = (0..3 * n).map(|_| g.uniform_f32(0.2, 0.6)).collect();
    let mut gts: Vec<GroundTruth> = Vec::new();
    let objects = 1 + g.below(3);
    let mut attempts = 0;
    while gts.len() < objects && attempts < 50 {
        attempts += 1;
        let class_id = g.below(CLASS_NAMES.len());
        let bw = g.uniform(0.2, 0.45);
        let bh = g.uniform(0.2, 0.45);
        let cx = g.uniform(bw / 2.0, 1.0 - bw / 2.0);
        let cy = g.uniform(bh / 2.0, 1.0 - bh / 2.0);
        let bbox = BBox::new(cx, cy, bw, bh);
        if gts.iter().any(|o| crate::detect::iou(&o.bbox, &bbox) > 0.1) {
            continue;
        }
        let color = match class_id {
            0 => [0.9, 0.15, 0.1],
            1 => [0.1, 0.85, 0.2],
            _ => [0.1, 0.2, 0.9],
        };
        let (x1, y1, x2, y2) = bbox.corners();
        for y in 0..size {
            for x in 0..size {
                let (px, py) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let inside = if class_id == 1 {
                    let (dx, dy) = ((px - cx) / (bw / 2.0), (py - cy) / (bh / 2.0));
                    dx * dx + dy * dy <= 1.0
                } else {
                    px >= x1 && px < x2 && py >= y1 && py < y2
                };
                if inside {
                    for c in 0..3 {
                        data[c * n + y * size + x] = color[c] + g.uniform_f32(-0.05, 0.05);
                    }
                }
            }
        }
        gts.push(GroundTruth { class_id, bbox });
    }
    Sample {
        image: Tensor::chw(3, size, size, data).expect("consistent dims"),
        gts,
        id: format!("shape{id:05}"),
    }
}

/// `count` synthetic samples with ids `first..first + count`.
pub fn synthetic_shapes(count: usize, size: usize, seed: u64, first: u64) -> Vec<Sample> {
    (first..first + count as u64)
        .into_par_iter()
        .map(|id| synthetic_sample(size, seed, id))
        .collect()
}

/// Image lists of a train/test/val split written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: PathBuf,
    pub test: PathBuf,
    pub val: PathBuf,
    pub counts: [usize; 3],
}

/// Writes samples as `images/<id>.png` plus `labels/<id>.txt` and a list file.
pub fn write_dataset(dir: &Path, list_name: &str, samples: &[Sample]) -> Result<PathBuf, DataError> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&labels).map_err(io_err(&labels))?;
    let mut list = String::new();
    for s in samples {
        save_png(&s.image, &images.join(format!("{}.png", s.id)))?;
        let lp = labels.join(format!("{}.txt", s.id));
        fs::write(&lp, format_labels(&s.gts)).map_err(io_err(&lp))?;
        list.push_str(&format!("images/{}.png\n", s.id));
    }
    let path = dir.join(list_name);
    fs::write(&path, list).map_err(io_err(&path))?;
    Ok(path)
}

/// Synthetic train/test/val split with disjoint ids.
pub fn write_synthetic_split(
    dir: &Path,
    counts: [usize; 3],
    size: usize,
    seed: u64,
) -> Result<SplitManifest, DataError> {
    let mut first = 0u64;
    let mut paths = Vec::new();
    for (name, &n) in ["train.txt", "test.txt", "val.txt"].iter().zip(&counts) {
        let samples = synthetic_shapes(n, size, seed, first);
        first += n as u64;
        paths.push(write_dataset(dir, name, &samples)?);
    }
    Ok(SplitManifest {
        train: paths[0].clone(),
        test: paths[1].clone(),
        val: paths[2].clone(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> GroundTruth {
        GroundTruth {
            class_id,
            bbox: BBox::new(cx, cy, w, h),
        }
    }

    #[test]
    fn label_parsing() {
        let p = Path::new("a.txt");
        assert_eq!(
            parse_labels("0 0.5 0.5 0.2 0.3\n", p).unwrap(),
            vec![gt(0, 0.5, 0.5, 0.2, 0.3)]
        );
        assert!(parse_labels("", p).unwrap().is_empty());
        assert!(matches!(
            parse_labels("0 1.2 0.5 0.2 0.3", p),
            Err(DataError::BoxOutOfRange { line: 1, .. })
        ));
        assert!(matches!(
            parse_labels("\n0 0.5 0.5 x 0.3", p),
            Err(DataError::MalformedLine { line: 2, .. })
        ));
        // extent past the border is clipped
        let b = parse_labels("1 0.95 0.5 0.2 0.2", p).unwrap()[0].bbox;
        assert!((b.corners().2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn letterbox_arithmetic() {
        let lb = Letterbox::new(480, 320, 416, 416);
        assert_eq!((lb.new_w, lb.new_h), (416, 277));
        assert_eq!(lb.pad_y, 69);
        assert_eq!(416 - 277 - lb.pad_y, 70);
        let sq = Letterbox::new(100, 100, 64, 64);
        let b = BBox::new(0.3, 0.4, 0.2, 0.1);
        assert_eq!(sq.map_box(&b), b);
    }

    #[test]
    fn letterbox_round_trip_within_a_pixel() {
        let lb = Letterbox::new(480, 320, 416, 416);
        let mut g = SplitMix64::new(2);
        for _ in 0..100 {
            let b = BBox::new(g.next_f64(), g.next_f64(), g.uniform(0.01, 0.5), g.uniform(0.01, 0.5));
            let back = lb.unmap_box(&lb.map_box(&b));
            let (a, c) = (b.corners(), back.corners());
            assert!((a.0 - c.0).abs() * 480.0 < 1.0 && (a.3 - c.3).abs() * 320.0 < 1.0);
        }
    }

    #[test]
    fn letterbox_pads_gray() {
        let img = Tensor::full(&[3, 20, 40], 1.0);
        let (out, lb) = letterbox_image(&img, 32, 32);
        assert_eq!(lb.pad_y, 8);
        assert_eq!(out.at(0, 0, 0), PAD_GRAY);
        assert_eq!(out.at(0, 16, 16), 1.0);
    }

    fn four(seed: u64) -> [Sample; 4] {
        std::array::from_fn(|k| synthetic_sample(32, seed, k as u64))
    }

    #[test]
    fn mosaic_deterministic_and_sized() {
        let s = four(1);
        let a = mosaic(&s, 48, 40, 7);
        let b = mosaic(&s, 48, 40, 7);
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (48, 40));
        let empty: [Sample; 4] = std::array::from_fn(|k| Sample {
            gts: vec![],
            ..s[k].clone()
        });
        assert!(mosaic(&empty, 48, 40, 7).gts.is_empty());
    }

    #[test]
    fn mosaic_box_scale() {
        let mut g = SplitMix64::new(4);
        for seed in 0..50 {
            let s = four(seed);
            let sizes = std::array::from_fn(|k| (s[k].width(), s[k].height()));
            let tiles = mosaic_tiles(sizes, 64, 64, seed);
            let (k, t) = (g.below(4), g.next_f64());
            let tile = tiles[k];
            // a small box at a random spot in the visible part of the source
            let vis_x = tile.crop_x / (32.0 * tile.scale);
            let vis_y = tile.crop_y / (32.0 * tile.scale);
            let b = BBox::new(
                vis_x + (1.0 - 2.0 * vis_x) * (0.3 + 0.4 * t),
                vis_y + (1.0 - 2.0 * vis_y) * 0.5,
                0.01,
                0.01,
            );
            let m = tile.map_box(&b, 32, 32, 64, 64);
            let ratio = (m.area() * 64.0 * 64.0) / (b.area() * 32.0 * 32.0);
            assert!((ratio - tile.scale * tile.scale).abs() < 1e-6);
            // independent corner mapping
            let (x1, y1, x2, y2) = b.corners();
            let corner = |x: f64, y: f64| {
                (
                    (x * 32.0 * tile.scale - tile.crop_x + tile.x as f64) / 64.0,
                    (y * 32.0 * tile.scale - tile.crop_y + tile.y as f64) / 64.0,
                )
            };
            let (a, c) = (corner(x1, y1), corner(x2, y2));
            let mc = m.corners();
            assert!((mc.0 - a.0).abs() < 1e-9 && (mc.3 - c.1).abs() < 1e-9);
        }
    }

    #[test]
    fn flip_reflects_boxes() {
        let s = synthetic_sample(32, 3, 0);
        let cfg = AugmentConfig {
            flip: 1.0,
            ..AugmentConfig::identity()
        };
        let f = basic_transforms(&s, &cfg, 1);
        for (a, b) in s.gts.iter().zip(&f.gts) {
            assert!((b.bbox.cx - (1.0 - a.bbox.cx)).abs() < 1e-12);
            assert_eq!(a.class_id, b.class_id);
        }
        assert_eq!(f.image.at(0, 5, 0), s.image.at(0, 5, 31));
    }

    #[test]
    fn identity_config_is_bitwise_noop() {
        let s = synthetic_sample(32, 3, 1);
        assert_eq!(basic_transforms(&s, &AugmentConfig::identity(), 99), s);
    }

    #[test]
    fn transforms_keep_labels_sound() {
        let cfg = AugmentConfig {
            crop: 0.8,
            affine: 0.8,
            max_rotate_deg: 15.0,
            max_scale: 0.3,
            max_translate: 0.2,
            blur: 0.5,
            ..AugmentConfig::default()
        };
        let base = synthetic_shapes(10, 24, 5, 0);
        for trial in 0..1000u64 {
            let s = &base[trial as usize % base.len()];
            let out = basic_transforms(s, &cfg, trial);
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for g in &out.gts {
                let (x1, y1, x2, y2) = g.bbox.corners();
                let eps = 1e-9;
                assert!(x1 >= -eps && y1 >= -eps && x2 <= 1.0 + eps && y2 <= 1.0 + eps);
                assert!(g.class_id < 3);
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        let mut g = SplitMix64::new(1);
        for _ in 0..1000 {
            let (r, gg, b) = (
                g.uniform_f32(0.0, 1.0),
                g.uniform_f32(0.0, 1.0),
                g.uniform_f32(0.0, 1.0),
            );
            let (h, s, v) = rgb_to_hsv(r, gg, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (gg - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        assert_eq!(synthetic_shapes(4, 32, 9, 0), synthetic_shapes(4, 32, 9, 0));
        assert_ne!(synthetic_sample(32, 9, 0), synthetic_sample(32, 10, 0));
        for s in synthetic_shapes(20, 32, 1, 0) {
            assert!(!s.gts.is_empty());
        }
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic_split(dir.path(), [3, 2, 1], 32, 4).unwrap();
        let train = load_dataset(&m.train, &dir.path().join("labels")).unwrap();
        assert_eq!(train.len(), 3);
        let orig = synthetic_shapes(3, 32, 4, 0);
        for (a, b) in train.iter().zip(&orig) {
            assert_eq!(a.id, b.id);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
            assert_eq!(a.gts.len(), b.gts.len());
        }
        let test = fs::read_to_string(&m.test).unwrap();
        assert!(!test.lines().any(|l| fs::read_to_string(&m.train).unwrap().contains(l)));
        fs::remove_file(dir.path().join("labels").join("shape00000.txt")).unwrap();
        assert!(matches!(
            load_dataset(&m.train, &dir.path().join("labels")),
            Err(DataError::MissingLabel(_))
        ));
    }
}

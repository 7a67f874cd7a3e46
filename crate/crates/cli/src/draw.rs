use image::{Rgb, RgbImage};
use slimdet::detect::Detection;

/// Box colours per class id: plastic blue, bio orange, ROV pink.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[0, 90, 255], [255, 140, 0], [255, 20, 147]];
const OTHER: [u8; 3] = [255, 255, 255];
const THICKNESS: i64 = 2;

pub fn color_for(class_id: usize) -> Rgb<u8> {
    Rgb(CLASS_COLORS.get(class_id).copied().unwrap_or(OTHER))
}

/// Outlines every detection on `img`; boxes are in normalized coordinates.
pub fn draw_detections(img: &mut RgbImage, dets: &[Detection]) {
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    for d in dets {
        let (x1, y1, x2, y2) = d.bbox.clipped().corners();
        let px = |v: f64, n: i64| ((v * n as f64).round() as i64).clamp(0, n - 1);
        let (x1, x2, y1, y2) = (px(x1, w), px(x2, w), px(y1, h), px(y2, h));
        let c = color_for(d.class_id);
        let mut put = |x: i64, y: i64| {
            if (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, c);
            }
        };
        for t in 0..THICKNESS {
            for x in x1..=x2 {
                put(x, y1 + t);
                put(x, y2 - t);
            }
            for y in y1..=y2 {
                put(x1 + t, y);
                put(x2 - t, y);
            }
        }
    }
}

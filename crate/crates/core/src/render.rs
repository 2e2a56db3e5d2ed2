//! Overlay rendering: detection boxes as 2-px colored borders and
//! segmentation maps as 50% alpha class colors over the image.

use crate::boxgeom::Detection;
use crate::data::{image_to_rgb8, LabelMap, STUFF_COLORS};
use crate::tensor::Tensor;

/// Fixed palette indexed by class. The first ten entries follow the
/// stuff vocabulary colors; the rest cycle through saturated hues for
/// object classes.
pub fn class_color(index: usize) -> [u8; 3] {
    const EXTRA: [[u8; 3]; 10] = [
        [237, 28, 36],
        [255, 217, 0],
        [224, 31, 214],
        [0, 222, 222],
        [140, 26, 242],
        [255, 127, 39],
        [34, 177, 76],
        [0, 162, 232],
        [255, 174, 201],
        [185, 122, 87],
    ];
    if index < STUFF_COLORS.len() {
        let c = STUFF_COLORS[index];
        [
            (c[0] * 255.0).round() as u8,
            (c[1] * 255.0).round() as u8,
            (c[2] * 255.0).round() as u8,
        ]
    } else {
        EXTRA[(index - STUFF_COLORS.len()) % EXTRA.len()]
    }
}

/// Color for a detection box of the given object class. Offset past the
/// stuff palette so boxes stand out against band colors.
pub fn detection_color(class: usize) -> [u8; 3] {
    class_color(STUFF_COLORS.len() + class.saturating_sub(1))
}

fn blend(dst: &mut [u8], color: [u8; 3]) {
    for c in 0..3 {
        dst[c] = ((dst[c] as u16 + color[c] as u16) / 2) as u8;
    }
}

fn paint(rgb: &mut [u8], w: usize, h: usize, x: i64, y: i64, color: [u8; 3]) {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        return;
    }
    let o = (y as usize * w + x as usize) * 3;
    rgb[o..o + 3].copy_from_slice(&color);
}

/// Render the image with an optional segmentation overlay and detection
/// borders for detections at or above `score_thresh`. Returns
/// interleaved RGB.
pub fn render_overlay(
    image: &Tensor,
    dets: &[Detection],
    seg: Option<&LabelMap>,
    score_thresh: f64,
) -> (usize, usize, Vec<u8>) {
    let d = image.dims();
    let (h, w) = (d[1], d[2]);
    let mut rgb = image_to_rgb8(image);
    if let Some(seg) = seg {
        for y in 0..h.min(seg.h) {
            for x in 0..w.min(seg.w) {
                let color = class_color(seg.at(x, y) as usize);
                blend(&mut rgb[(y * w + x) * 3..(y * w + x) * 3 + 3], color);
            }
        }
    }
    for det in dets {
        if det.score < score_thresh {
            continue;
        }
        let color = detection_color(det.class);
        let (x0, y0) = (det.rect.x0.round() as i64, det.rect.y0.round() as i64);
        let (x1, y1) = (det.rect.x1.round() as i64, det.rect.y1.round() as i64);
        for t in 0..2i64 {
            for x in x0..x1 {
                paint(&mut rgb, w, h, x, y0 + t, color);
                paint(&mut rgb, w, h, x, y1 - 1 - t, color);
            }
            for y in y0..y1 {
                paint(&mut rgb, w, h, x0 + t, y, color);
                paint(&mut rgb, w, h, x1 - 1 - t, y, color);
            }
        }
    }
    (w, h, rgb)
}

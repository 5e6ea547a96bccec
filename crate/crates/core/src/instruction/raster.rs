use std::collections::BTreeSet;

use font8x8::{UnicodeFonts, BASIC_FONTS, BLOCK_FONTS, BOX_FONTS, GREEK_FONTS, LATIN_FONTS};
use image::{Rgb, RgbImage};

use super::{CrossModalInstruction, InstructionError, Stroke, StrokeKind, TextLabel};

/// Side length of one rendered glyph cell in pixels.
pub const GLYPH_SIZE: u32 = 8;
pub const LABEL_COLOR: [u8; 4] = [255, 220, 0, 255];

const ARROW_HALF_ANGLE: f64 = 25.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

/// Line segments making up a stroke: the polyline, closed for boundaries,
/// with two barbs at the final point for arrows.
pub fn stroke_segments(stroke: &Stroke) -> Vec<Segment> {
    let pts = &stroke.points;
    let mut segs: Vec<Segment> = pts.windows(2).map(|w| Segment { a: w[0], b: w[1] }).collect();
    match stroke.kind {
        StrokeKind::Freehand => {}
        StrokeKind::Boundary => {
            if pts.len() > 2 {
                segs.push(Segment { a: pts[pts.len() - 1], b: pts[0] });
            }
        }
        StrokeKind::Arrow => {
            let tip = pts[pts.len() - 1];
            // Last segment with nonzero length sets the head direction.
            let from = pts.iter().rev().skip(1).find(|p| **p != tip);
            if let Some(from) = from {
                let (dx, dy) = (tip[0] - from[0], tip[1] - from[1]);
                let len = dx.hypot(dy);
                let barb = (3.0 * stroke.style.width).max(6.0);
                let back = (-dx / len, -dy / len);
                for sign in [-1.0, 1.0] {
                    let (s, c) = (sign * ARROW_HALF_ANGLE).sin_cos();
                    let dir = (back.0 * c - back.1 * s, back.0 * s + back.1 * c);
                    segs.push(Segment { a: tip, b: [tip[0] + barb * dir.0, tip[1] + barb * dir.1] });
                }
            }
        }
    }
    segs
}

fn point_segment_distance(p: [f64; 2], seg: &Segment) -> f64 {
    let (ax, ay) = (seg.a[0], seg.a[1]);
    let (dx, dy) = (seg.b[0] - ax, seg.b[1] - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - ax) * dx + (p[1] - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - (ax + t * dx)).hypot(p[1] - (ay + t * dy))
}

/// Pixels whose centers lie within `width / 2` of the segment. Integer
/// coordinates are pixel centers.
fn segment_coverage(seg: &Segment, width: f64, img_w: u32, img_h: u32, out: &mut BTreeSet<(u32, u32)>) {
    let r = width / 2.0;
    let x0 = (seg.a[0].min(seg.b[0]) - r).floor().max(0.0);
    let x1 = (seg.a[0].max(seg.b[0]) + r).ceil().min(img_w as f64 - 1.0);
    let y0 = (seg.a[1].min(seg.b[1]) - r).floor().max(0.0);
    let y1 = (seg.a[1].max(seg.b[1]) + r).ceil().min(img_h as f64 - 1.0);
    if x1 < x0 || y1 < y0 {
        return;
    }
    for y in y0 as u32..=y1 as u32 {
        for x in x0 as u32..=x1 as u32 {
            if point_segment_distance([x as f64, y as f64], seg) <= r + 1e-9 {
                out.insert((x, y));
            }
        }
    }
}

fn blend(dst: &mut Rgb<u8>, rgba: [u8; 4]) {
    let a = rgba[3] as u16;
    for c in 0..3 {
        dst.0[c] = ((rgba[c] as u16 * a + dst.0[c] as u16 * (255 - a) + 127) / 255) as u8;
    }
}

/// Draws a single segment directly onto `img`.
pub fn draw_segment(img: &mut RgbImage, seg: &Segment, width: f64, rgba: [u8; 4]) {
    let mut cov = BTreeSet::new();
    segment_coverage(seg, width, img.width(), img.height(), &mut cov);
    for (x, y) in cov {
        blend(img.get_pixel_mut(x, y), rgba);
    }
}

fn glyph(c: char) -> [u8; 8] {
    BASIC_FONTS
        .get(c)
        .or_else(|| LATIN_FONTS.get(c))
        .or_else(|| GREEK_FONTS.get(c))
        .or_else(|| BOX_FONTS.get(c))
        .or_else(|| BLOCK_FONTS.get(c))
        // hollow box for anything the font lacks
        .unwrap_or([0x7e, 0x42, 0x42, 0x42, 0x42, 0x42, 0x7e, 0x00])
}

/// Pixel box `[x0, x1) × [y0, y1)` covered by a rendered label.
pub fn label_box(label: &TextLabel) -> (i64, i64, i64, i64) {
    let x0 = label.anchor[0].round() as i64;
    let y0 = label.anchor[1].round() as i64;
    let n = label.text.chars().count() as i64;
    (x0, y0, x0 + n * GLYPH_SIZE as i64, y0 + GLYPH_SIZE as i64)
}

pub(crate) fn draw_text(img: &mut RgbImage, x0: i64, y0: i64, text: &str, rgba: [u8; 4]) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (row, bits) in rows.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) == 0 {
                    continue;
                }
                let x = x0 + i as i64 * GLYPH_SIZE as i64 + col;
                let y = y0 + row as i64;
                if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                    blend(img.get_pixel_mut(x as u32, y as u32), rgba);
                }
            }
        }
    }
}

/// Returns a copy of `image` with the instruction's strokes and labels drawn on it.
pub fn rasterize_overlay(image: &RgbImage, instr: &CrossModalInstruction) -> Result<RgbImage, InstructionError> {
    let actual = [image.width(), image.height()];
    if let Some(expected) = instr.image_size {
        if expected != actual {
            return Err(InstructionError::DimensionMismatch { expected, actual });
        }
    }
    instr.validate_bounds(actual[0], actual[1])?;

    let mut out = image.clone();
    for stroke in &instr.strokes {
        // Union per stroke so self-overlapping segments blend once.
        let mut cov = BTreeSet::new();
        for seg in stroke_segments(stroke) {
            segment_coverage(&seg, stroke.style.width, actual[0], actual[1], &mut cov);
        }
        for (x, y) in cov {
            blend(out.get_pixel_mut(x, y), stroke.style.rgba);
        }
    }
    for label in &instr.labels {
        let (x0, y0, _, _) = label_box(label);
        draw_text(&mut out, x0, y0, &label.text, LABEL_COLOR);
    }
    Ok(out)
}

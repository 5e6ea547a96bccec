use image::{Rgb, RgbImage};

use super::CurvePoint;
use crate::instruction::raster::{draw_segment, draw_text, Segment};

const PALETTE: [[u8; 4]; 6] = [
    [31, 119, 180, 255],
    [214, 39, 40, 255],
    [44, 160, 44, 255],
    [148, 103, 189, 255],
    [255, 127, 14, 255],
    [23, 190, 207, 255],
];

fn vec2(x: f64, y: f64) -> [f64; 2] {
    [x, y]
}

const AXIS: [u8; 4] = [40, 40, 40, 255];
const GRID: [u8; 4] = [210, 210, 210, 255];

/// Success rate against environment steps, one line per named series.
pub fn plot_success_curves(series: &[(String, Vec<CurvePoint>)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (48.0, width as f64 - 16.0, 16.0, height as f64 - 32.0);
    let max_step = series.iter().flat_map(|(_, c)| c.iter().map(|p| p.step)).max().unwrap_or(0).max(1) as f64;
    let to_px = |step: usize, y: f64| {
        [left + (right - left) * step as f64 / max_step, bottom - (bottom - top) * y.clamp(0.0, 1.0)]
    };
    let line = |img: &mut RgbImage, a: [f64; 2], b: [f64; 2], w: f64, c: [u8; 4]| {
        draw_segment(img, &Segment { a, b }, w, c)
    };

    for q in 0..=4 {
        let y = q as f64 / 4.0;
        line(&mut img, to_px(0, y), vec2(right, to_px(0, y)[1]), 1.0, GRID);
        draw_text(&mut img, 4, to_px(0, y)[1] as i64 - 4, &format!("{y:.2}"), AXIS);
    }
    line(&mut img, vec2(left, top), vec2(left, bottom), 1.0, AXIS);
    line(&mut img, vec2(left, bottom), vec2(right, bottom), 1.0, AXIS);
    draw_text(&mut img, left as i64, bottom as i64 + 8, "0", AXIS);
    let max_label = format!("{}", max_step as usize);
    draw_text(&mut img, right as i64 - 8 * max_label.len() as i64, bottom as i64 + 8, &max_label, AXIS);
    draw_text(&mut img, (left + right) as i64 / 2 - 20, bottom as i64 + 8, "steps", AXIS);

    for (k, (name, curve)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for w in curve.windows(2) {
            line(&mut img, to_px(w[0].step, w[0].success_rate), to_px(w[1].step, w[1].success_rate), 2.0, color);
        }
        if let [only] = curve.as_slice() {
            let p = to_px(only.step, only.success_rate);
            line(&mut img, p, p, 4.0, color);
        }
        let ly = top as i64 + 4 + 12 * k as i64;
        line(&mut img, vec2(right - 120.0, ly as f64 + 3.0), vec2(right - 104.0, ly as f64 + 3.0), 2.0, color);
        draw_text(&mut img, right as i64 - 98, ly, name, AXIS);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_render_in_series_colors() {
        let curve: Vec<CurvePoint> = (0..5)
            .map(|i| CurvePoint { step: i * 1000, success_rate: i as f64 / 4.0, actor_loss: 0.0, critic_loss: 0.0 })
            .collect();
        let img = plot_success_curves(&[("demo".into(), curve)], 320, 200);
        assert_eq!(img.dimensions(), (320, 200));
        let c = PALETTE[0];
        assert!(img.pixels().any(|p| p.0 == [c[0], c[1], c[2]]));
        let empty = plot_success_curves(&[], 100, 80);
        assert!(empty.pixels().all(|p| p.0 != [c[0], c[1], c[2]]));
    }
}

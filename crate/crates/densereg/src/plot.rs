//! Minimal PNG chart emission for convergence curves and ablation box
//! plots. Hand-rolled on purpose: axes, polylines, boxes and numeric tick
//! labels from a tiny embedded glyph set.

use image::{Rgb, RgbImage};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

const SERIES_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// 3x5 glyphs for numeric tick labels; rows are bit-packed, MSB = left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(g) = glyph(c) {
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        put(img, cx + col as i64, y + row as i64, color);
                    }
                }
            }
        }
        cx += 4;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 1e4 {
        format!("{v:.3}")
    } else {
        format!("{v:.1e}")
    }
}

struct Frame {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    log_y: bool,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn y_px(&self, v: f64) -> i64 {
        let (lo, hi, val) = if self.log_y {
            (self.y_min.log10(), self.y_max.log10(), v.max(self.y_min).log10())
        } else {
            (self.y_min, self.y_max, v)
        };
        let t = if hi > lo { (val - lo) / (hi - lo) } else { 0.5 };
        self.y1 - (t * (self.y1 - self.y0) as f64).round() as i64
    }
}

fn frame(img: &mut RgbImage, y_min: f64, y_max: f64, log_y: bool) -> Frame {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let f = Frame { x0: 44, y0: 8, x1: w - 8, y1: h - 18, log_y, y_min, y_max };
    draw_line(img, f.x0, f.y0, f.x0, f.y1, AXIS);
    draw_line(img, f.x0, f.y1, f.x1, f.y1, AXIS);
    for k in 0..=4 {
        let v = if log_y {
            10f64.powf(y_min.log10() + (y_max.log10() - y_min.log10()) * k as f64 / 4.0)
        } else {
            y_min + (y_max - y_min) * k as f64 / 4.0
        };
        let y = f.y_px(v);
        draw_line(img, f.x0 + 1, y, f.x1, y, GRID);
        draw_text(img, 2, y - 2, &format_tick(v), AXIS);
    }
    f
}

/// Convergence curve (one value per step). Switches to a log y-axis when
/// the positive values span more than two decades.
pub fn line_plot(values: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BG);
    if values.is_empty() {
        return img;
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let max = finite.iter().cloned().fold(f64::MIN, f64::max);
    let min = finite.iter().cloned().fold(f64::MAX, f64::min);
    let log_y = min > 0.0 && max / min > 100.0;
    let (y_min, y_max) = if log_y {
        (min, max)
    } else {
        let pad = ((max - min).abs()).max(1e-12) * 0.05;
        (min - pad, max + pad)
    };
    let f = frame(&mut img, y_min, y_max, log_y);

    let n = values.len();
    let x_px = |i: usize| -> i64 {
        if n <= 1 {
            (f.x0 + f.x1) / 2
        } else {
            f.x0 + ((f.x1 - f.x0) as f64 * i as f64 / (n - 1) as f64).round() as i64
        }
    };
    let mut last: Option<(i64, i64)> = None;
    let color = Rgb(SERIES_COLORS[0]);
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            last = None;
            continue;
        }
        let p = (x_px(i), f.y_px(v));
        if let Some(q) = last {
            draw_line(&mut img, q.0, q.1, p.0, p.1, color);
        }
        last = Some(p);
    }
    // Step tick labels.
    draw_text(&mut img, f.x0, f.y1 + 6, "0", AXIS);
    draw_text(&mut img, f.x1 - 24, f.y1 + 6, &format!("{}", n.saturating_sub(1)), AXIS);
    img
}

/// Grouped box plot: one box per group with median, quartile box and
/// min/max whiskers. Group labels are omitted (values carry the CSV).
pub fn box_plot(groups: &[(String, Vec<f64>)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BG);
    let all: Vec<f64> = groups
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if all.is_empty() {
        return img;
    }
    let max = all.iter().cloned().fold(f64::MIN, f64::max);
    let min = all.iter().cloned().fold(f64::MAX, f64::min);
    let pad = ((max - min).abs()).max(1e-12) * 0.08;
    let f = frame(&mut img, min - pad, max + pad, false);

    let n = groups.len() as i64;
    let slot = (f.x1 - f.x0) / n.max(1);
    for (gi, (_, values)) in groups.iter().enumerate() {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            continue;
        }
        sorted.sort_by(f64::total_cmp);
        let q = |t: f64| -> f64 {
            let pos = t * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        let (w_lo, q1, med, q3, w_hi) = (sorted[0], q(0.25), q(0.5), q(0.75), sorted[sorted.len() - 1]);

        let cx = f.x0 + slot * gi as i64 + slot / 2;
        let half = (slot / 4).clamp(3, 24);
        let color = Rgb(SERIES_COLORS[gi % SERIES_COLORS.len()]);
        let (y_lo, y_q1, y_med, y_q3, y_hi) =
            (f.y_px(w_lo), f.y_px(q1), f.y_px(med), f.y_px(q3), f.y_px(w_hi));
        draw_line(&mut img, cx, y_hi, cx, y_q3, color);
        draw_line(&mut img, cx, y_q1, cx, y_lo, color);
        draw_line(&mut img, cx - half / 2, y_hi, cx + half / 2, y_hi, color);
        draw_line(&mut img, cx - half / 2, y_lo, cx + half / 2, y_lo, color);
        draw_line(&mut img, cx - half, y_q3, cx + half, y_q3, color);
        draw_line(&mut img, cx - half, y_q1, cx + half, y_q1, color);
        draw_line(&mut img, cx - half, y_q3, cx - half, y_q1, color);
        draw_line(&mut img, cx + half, y_q3, cx + half, y_q1, color);
        draw_line(&mut img, cx - half, y_med, cx + half, y_med, AXIS);
        draw_text(&mut img, cx - 4, f.y1 + 6, &format!("{gi}"), AXIS);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_draws_something() {
        let values: Vec<f64> = (0..100).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let img = line_plot(&values, 320, 200);
        let non_bg = img.pixels().filter(|p| **p != BG).count();
        assert!(non_bg > 300, "only {non_bg} non-background pixels");
    }

    #[test]
    fn line_plot_handles_empty_and_constant() {
        let img = line_plot(&[], 100, 80);
        assert_eq!(img.width(), 100);
        let img = line_plot(&[2.5; 10], 100, 80);
        assert!(img.pixels().any(|p| *p != BG));
    }

    #[test]
    fn box_plot_draws_groups() {
        let groups = vec![
            ("a".to_string(), vec![1.0, 2.0, 3.0, 4.0, 10.0]),
            ("b".to_string(), vec![2.0, 2.5, 3.5]),
        ];
        let img = box_plot(&groups, 320, 200);
        let non_bg = img.pixels().filter(|p| **p != BG).count();
        assert!(non_bg > 200, "only {non_bg} non-background pixels");
    }
}

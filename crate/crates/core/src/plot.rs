//! Minimal PNG line plots: axes, ticks, numeric labels in a built-in 5x7
//! bitmap font, one colored polyline per series, legend swatches.

use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

/// Fixed palette cycled by series index.
pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],   // red
    [31, 119, 180],  // blue
    [44, 160, 44],   // green
    [255, 159, 28],  // orange
    [148, 103, 189], // purple
    [23, 190, 187],  // teal
];

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub width: u32,
    pub height: u32,
}

impl LinePlot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        LinePlot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            width: 560,
            height: 360,
        }
    }

    pub fn add_series(&mut self, label: impl Into<String>, points: Vec<(f64, f64)>) {
        let color = PALETTE[self.series.len() % PALETTE.len()];
        self.series.push(Series { label: label.into(), color, points });
    }

    pub fn render_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut img = vec![255u8; w * h * 3];
        let (ml, mr, mt, mb) = (56usize, 14usize, 26usize, 40usize);
        let plot_w = w - ml - mr;
        let plot_h = h - mt - mb;

        // Data range with a small pad.
        let (mut x0, mut x1, mut y0, mut y1) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        if !x0.is_finite() {
            x0 = 0.0;
            x1 = 1.0;
            y0 = 0.0;
            y1 = 1.0;
        }
        if (x1 - x0).abs() < 1e-12 {
            x1 = x0 + 1.0;
        }
        if (y1 - y0).abs() < 1e-12 {
            y1 = y0 + 1.0;
        }
        let ypad = (y1 - y0) * 0.06;
        y0 -= ypad;
        y1 += ypad;

        let to_px = |x: f64, y: f64| -> (i64, i64) {
            let px = ml as f64 + (x - x0) / (x1 - x0) * plot_w as f64;
            let py = mt as f64 + (1.0 - (y - y0) / (y1 - y0)) * plot_h as f64;
            (px.round() as i64, py.round() as i64)
        };
        let mut put = |img: &mut [u8], x: i64, y: i64, c: [u8; 3]| {
            if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
                let i = (y as usize * w + x as usize) * 3;
                img[i] = c[0];
                img[i + 1] = c[1];
                img[i + 2] = c[2];
            }
        };

        let grid = [225u8, 225, 225];
        let axis = [40u8, 40, 40];
        // Gridlines + ticks + labels.
        for t in 0..=4 {
            let fx = x0 + (x1 - x0) * t as f64 / 4.0;
            let (px, _) = to_px(fx, y0);
            for y in mt..mt + plot_h {
                put(&mut img, px, y as i64, grid);
            }
            draw_text(&mut img, w, h, &fmt_tick(fx), px - 10, (mt + plot_h + 6) as i64, axis);
            let fy = y0 + (y1 - y0) * t as f64 / 4.0;
            let (_, py) = to_px(x0, fy);
            for x in ml..ml + plot_w {
                put(&mut img, x as i64, py, grid);
            }
            let label = fmt_tick(fy);
            draw_text(&mut img, w, h, &label, ml as i64 - 6 * label.len() as i64 - 6, py - 3, axis);
        }
        // Axes.
        for x in ml..ml + plot_w {
            put(&mut img, x as i64, (mt + plot_h) as i64, axis);
        }
        for y in mt..mt + plot_h {
            put(&mut img, ml as i64, y as i64, axis);
        }

        // Series.
        for s in &self.series {
            let mut prev: Option<(i64, i64)> = None;
            for &(x, y) in &s.points {
                let p = to_px(x, y);
                if let Some(q) = prev {
                    draw_line(&mut img, w, h, q, p, s.color);
                }
                prev = Some(p);
            }
        }

        // Title, axis labels, legend.
        draw_text(&mut img, w, h, &self.title.to_uppercase(), ml as i64, 8, axis);
        draw_text(
            &mut img,
            w,
            h,
            &self.x_label.to_uppercase(),
            (ml + plot_w / 2) as i64 - 3 * self.x_label.len() as i64,
            (h - 14) as i64,
            axis,
        );
        draw_text(&mut img, w, h, &self.y_label.to_uppercase(), 4, (mt - 12) as i64, axis);
        let mut ly = mt as i64 + 6;
        for s in &self.series {
            for dx in 0..14 {
                for dy in 0..3 {
                    put(&mut img, (ml + plot_w - 90) as i64 + dx, ly + 2 + dy, s.color);
                }
            }
            draw_text(&mut img, w, h, &s.label.to_uppercase(), (ml + plot_w - 72) as i64, ly, axis);
            ly += 12;
        }

        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        image::save_buffer(path, &img, w as u32, h as u32, image::ColorType::Rgb8)
            .map_err(|e| crate::CoreError::parse("png", e.to_string()))?;
        Ok(())
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn draw_line(img: &mut [u8], w: usize, h: usize, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    // Bresenham with a 2px-thick stroke.
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x0 + ox, y0 + oy);
            if px >= 0 && (px as usize) < w && py >= 0 && (py as usize) < h {
                let i = (py as usize * w + px as usize) * 3;
                img[i] = c[0];
                img[i + 1] = c[1];
                img[i + 2] = c[2];
            }
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// 5x7 column-major glyphs (LSB = top row) for the characters the reports
/// need; anything else renders as a blank.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0x3E, 0x51, 0x49, 0x45, 0x3E],
        '1' => [0x00, 0x42, 0x7F, 0x40, 0x00],
        '2' => [0x42, 0x61, 0x51, 0x49, 0x46],
        '3' => [0x21, 0x41, 0x45, 0x4B, 0x31],
        '4' => [0x18, 0x14, 0x12, 0x7F, 0x10],
        '5' => [0x27, 0x45, 0x45, 0x45, 0x39],
        '6' => [0x3C, 0x4A, 0x49, 0x49, 0x30],
        '7' => [0x01, 0x71, 0x09, 0x05, 0x03],
        '8' => [0x36, 0x49, 0x49, 0x49, 0x36],
        '9' => [0x06, 0x49, 0x49, 0x29, 0x1E],
        'A' => [0x7E, 0x11, 0x11, 0x11, 0x7E],
        'B' => [0x7F, 0x49, 0x49, 0x49, 0x36],
        'C' => [0x3E, 0x41, 0x41, 0x41, 0x22],
        'D' => [0x7F, 0x41, 0x41, 0x22, 0x1C],
        'E' => [0x7F, 0x49, 0x49, 0x49, 0x41],
        'F' => [0x7F, 0x09, 0x09, 0x09, 0x01],
        'G' => [0x3E, 0x41, 0x49, 0x49, 0x3A],
        'H' => [0x7F, 0x08, 0x08, 0x08, 0x7F],
        'I' => [0x00, 0x41, 0x7F, 0x41, 0x00],
        'J' => [0x20, 0x40, 0x41, 0x3F, 0x01],
        'K' => [0x7F, 0x08, 0x14, 0x22, 0x41],
        'L' => [0x7F, 0x40, 0x40, 0x40, 0x40],
        'M' => [0x7F, 0x02, 0x0C, 0x02, 0x7F],
        'N' => [0x7F, 0x04, 0x08, 0x10, 0x7F],
        'O' => [0x3E, 0x41, 0x41, 0x41, 0x3E],
        'P' => [0x7F, 0x09, 0x09, 0x09, 0x06],
        'Q' => [0x3E, 0x41, 0x51, 0x21, 0x5E],
        'R' => [0x7F, 0x09, 0x19, 0x29, 0x46],
        'S' => [0x46, 0x49, 0x49, 0x49, 0x31],
        'T' => [0x01, 0x01, 0x7F, 0x01, 0x01],
        'U' => [0x3F, 0x40, 0x40, 0x40, 0x3F],
        'V' => [0x1F, 0x20, 0x40, 0x20, 0x1F],
        'W' => [0x3F, 0x40, 0x38, 0x40, 0x3F],
        'X' => [0x63, 0x14, 0x08, 0x14, 0x63],
        'Y' => [0x07, 0x08, 0x70, 0x08, 0x07],
        'Z' => [0x61, 0x51, 0x49, 0x45, 0x43],
        '-' => [0x08, 0x08, 0x08, 0x08, 0x08],
        '.' => [0x00, 0x60, 0x60, 0x00, 0x00],
        '+' => [0x08, 0x08, 0x3E, 0x08, 0x08],
        '/' => [0x20, 0x10, 0x08, 0x04, 0x02],
        '_' => [0x40, 0x40, 0x40, 0x40, 0x40],
        ':' => [0x00, 0x36, 0x36, 0x00, 0x00],
        '(' => [0x00, 0x1C, 0x22, 0x41, 0x00],
        ')' => [0x00, 0x41, 0x22, 0x1C, 0x00],
        '=' => [0x14, 0x14, 0x14, 0x14, 0x14],
        '%' => [0x62, 0x64, 0x08, 0x13, 0x23],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut [u8], w: usize, h: usize, text: &str, x: i64, y: i64, c: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch.to_ascii_uppercase());
        for (col, bits) in g.iter().enumerate() {
            for row in 0..7 {
                if bits & (1 << row) != 0 {
                    let (px, py) = (cx + col as i64, y + row as i64);
                    if px >= 0 && (px as usize) < w && py >= 0 && (py as usize) < h {
                        let i = (py as usize * w + px as usize) * 3;
                        img[i] = c[0];
                        img[i + 1] = c[1];
                        img[i + 2] = c[2];
                    }
                }
            }
        }
        cx += 6;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plots/test.png");
        let mut p = LinePlot::new("demo", "arc (m)", "value");
        p.add_series("a", (0..50).map(|i| (i as f64, (i as f64 * 0.2).sin())).collect());
        p.add_series("b", (0..50).map(|i| (i as f64, (i as f64 * 0.1).cos())).collect());
        p.render_png(&path).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert!(meta.len() > 500, "png suspiciously small");
        // Decodes back with the right size.
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 560);
        assert_eq!(img.height(), 360);
    }

    #[test]
    fn empty_plot_still_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.png");
        let p = LinePlot::new("empty", "x", "y");
        p.render_png(&path).unwrap();
        assert!(path.exists());
    }
}

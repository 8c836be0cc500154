//! Minimal line-plot rendering for batch reports: PNG via a pixel buffer
//! (polylines, axes, numeric tick labels) and SVG with full text labels.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: &[[u8; 3]] = &[
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

// 3x5 bitmaps for '0'-'9', '-', '.', rows top to bottom
const DIGITS: &[(&char, [u8; 5])] = &[
    (&'0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    (&'1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    (&'2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    (&'3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    (&'4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    (&'5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    (&'6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    (&'7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    (&'8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    (&'9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    (&'-', [0b000, 0b000, 0b111, 0b000, 0b000]),
    (&'.', [0b000, 0b000, 0b000, 0b000, 0b010]),
];

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    ((xmin, xmax), (ymin, ymax))
}

impl LinePlot {
    pub fn render_png(&self, path: &Path, width: usize, height: usize) -> Result<()> {
        let (m_left, m_right, m_top, m_bottom) = (40usize, 12usize, 12usize, 24usize);
        let mut buf = vec![255u8; width * height * 3];
        let mut put = |x: isize, y: isize, c: [u8; 3]| {
            if x >= 0 && (x as usize) < width && y >= 0 && (y as usize) < height {
                let i = (y as usize * width + x as usize) * 3;
                buf[i..i + 3].copy_from_slice(&c);
            }
        };
        let ((xmin, xmax), (ymin, ymax)) = bounds(&self.series);
        let px = |x: f64| -> isize {
            (m_left as f64 + (x - xmin) / (xmax - xmin) * (width - m_left - m_right) as f64)
                as isize
        };
        let py = |y: f64| -> isize {
            (height as f64
                - m_bottom as f64
                - (y - ymin) / (ymax - ymin) * (height - m_top - m_bottom) as f64)
                as isize
        };
        let axis = [60u8, 60, 60];
        for x in m_left..(width - m_right) {
            put(x as isize, (height - m_bottom) as isize, axis);
        }
        for y in m_top..(height - m_bottom) {
            put(m_left as isize, y as isize, axis);
        }
        // numeric labels at the axis extremes
        let mut draw_text = |text: &str, x0: isize, y0: isize| {
            let mut cx = x0;
            for ch in text.chars() {
                if let Some((_, rows)) = DIGITS.iter().find(|(c, _)| **c == ch) {
                    for (ry, row) in rows.iter().enumerate() {
                        for rx in 0..3 {
                            if row & (0b100 >> rx) != 0 {
                                put(cx + rx as isize, y0 + ry as isize, axis);
                            }
                        }
                    }
                }
                cx += 4;
            }
        };
        let fmt = |v: f64| -> String {
            if v.abs() >= 100.0 || v == v.trunc() {
                format!("{v:.0}")
            } else {
                format!("{v:.2}")
            }
        };
        draw_text(&fmt(ymax), 2, m_top as isize);
        draw_text(&fmt(ymin), 2, (height - m_bottom) as isize - 5);
        draw_text(
            &fmt(xmin),
            m_left as isize,
            (height - m_bottom + 6) as isize,
        );
        draw_text(
            &fmt(xmax),
            (width - m_right) as isize - 20,
            (height - m_bottom + 6) as isize,
        );

        for (si, s) in self.series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            for w in s.points.windows(2) {
                let (x0, y0) = (px(w[0].0), py(w[0].1));
                let (x1, y1) = (px(w[1].0), py(w[1].1));
                // Bresenham
                let (mut x, mut y) = (x0, y0);
                let dx = (x1 - x0).abs();
                let dy = -(y1 - y0).abs();
                let sx = if x0 < x1 { 1 } else { -1 };
                let sy = if y0 < y1 { 1 } else { -1 };
                let mut err = dx + dy;
                loop {
                    put(x, y, color);
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
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(width as u32, height as u32, buf).expect("buffer");
        img.save(path).map_err(|e| Error::image(path, e))
    }

    pub fn render_svg(&self, path: &Path, width: usize, height: usize) -> Result<()> {
        let (m_left, m_right, m_top, m_bottom) = (50.0, 16.0, 28.0, 36.0);
        let ((xmin, xmax), (ymin, ymax)) = bounds(&self.series);
        let px = |x: f64| m_left + (x - xmin) / (xmax - xmin) * (width as f64 - m_left - m_right);
        let py = |y: f64| {
            height as f64
                - m_bottom
                - (y - ymin) / (ymax - ymin) * (height as f64 - m_top - m_bottom)
        };
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{tx}\" y=\"18\" font-size=\"13\" text-anchor=\"middle\">{title}</text>\n",
            tx = width / 2,
            title = self.title,
        );
        svg.push_str(&format!(
            "<line x1=\"{m_left}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"#444\"/>\n\
             <line x1=\"{m_left}\" y1=\"{m_top}\" x2=\"{m_left}\" y2=\"{y0}\" stroke=\"#444\"/>\n",
            y0 = height as f64 - m_bottom,
            x1 = width as f64 - m_right,
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            width / 2,
            height as f64 - 6.0,
            self.x_label
        ));
        svg.push_str(&format!(
            "<text x=\"12\" y=\"{}\" font-size=\"10\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text>\n",
            height / 2,
            height / 2,
            self.y_label
        ));
        for (v, x, y, anchor) in [
            (ymin, m_left - 4.0, height as f64 - m_bottom, "end"),
            (ymax, m_left - 4.0, m_top + 4.0, "end"),
            (xmin, m_left, height as f64 - m_bottom + 12.0, "middle"),
            (
                xmax,
                width as f64 - m_right,
                height as f64 - m_bottom + 12.0,
                "middle",
            ),
        ] {
            svg.push_str(&format!(
                "<text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"9\" text-anchor=\"{anchor}\">{v:.2}</text>\n"
            ));
        }
        for (si, s) in self.series.iter().enumerate() {
            let c = PALETTE[si % PALETTE.len()];
            let color = format!("rgb({},{},{})", c[0], c[1], c[2]);
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{}</text>\n",
                width as f64 - m_right - 120.0,
                m_top + 14.0 * si as f64 + 4.0,
                s.label
            ));
        }
        svg.push_str("</svg>\n");
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, svg).map_err(|e| Error::io(path, e))
    }
}

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::synth::Image;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREY: Rgb = [190, 190, 190];
pub const GREEN: Rgb = [40, 180, 60];
pub const RED: Rgb = [220, 40, 40];
pub const BLUE: Rgb = [40, 90, 220];

/// A small RGB raster for static plots.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        let pixels = fill
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Grayscale image scaled up by an integer factor.
    pub fn from_image(img: &Image, scale: usize) -> Self {
        let (w, h) = (img.dims[0], img.dims[1]);
        let mut c = Self::new(w * scale, h * scale, BLACK);
        for y in 0..h * scale {
            for x in 0..w * scale {
                let v = (img.get2(x / scale, y / scale).clamp(0.0, 1.0) * 160.0) as u8;
                c.set(x as i64, y as i64, [v, v, v]);
            }
        }
        c
    }

    pub fn set(&mut self, x: i64, y: i64, color: Rgb) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), thickness: i64, color: Rgb) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        let r = thickness / 2;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a.0 + t * (b.0 - a.0)).round() as i64;
            let y = (a.1 + t * (b.1 - a.1)).round() as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    self.set(x + dx, y + dy, color);
                }
            }
        }
    }

    pub fn square(&mut self, c: (f64, f64), half: i64, color: Rgb) {
        let (x, y) = (c.0.round() as i64, c.1.round() as i64);
        for dy in -half..=half {
            for dx in -half..=half {
                self.set(x + dx, y + dy, color);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let image_err = |e: png::EncodingError| Error::Image {
            path: path.into(),
            message: e.to_string(),
        };
        let mut w = enc.write_header().map_err(image_err)?;
        w.write_image_data(&self.pixels).map_err(image_err)
    }
}

/// Draws `g` in normalized coordinates onto a canvas of side `size`.
pub fn draw_graph(c: &mut Canvas, g: &SpatialGraph, color: Rgb, node_color: Rgb) {
    let (w, h) = (c.width as f64, c.height as f64);
    let px = |p: &[f64]| (p[0] * w, p[1] * h);
    for (a, b) in g.segments() {
        c.line(px(a), px(b), 1, color);
    }
    for n in &g.nodes {
        c.square(px(&n.center), 2, node_color);
    }
}

/// Precision-recall curve on a square plot with unit axes.
pub fn pr_curve_png(path: &Path, curve: &[(f64, f64)], size: usize) -> Result<()> {
    let mut c = Canvas::new(size, size, WHITE);
    let m = 20.0;
    let span = size as f64 - 2.0 * m;
    let px = |r: f64, p: f64| (m + r * span, m + (1.0 - p) * span);
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        c.line(px(v, 0.0), px(v, 1.0), 0, GREY);
        c.line(px(0.0, v), px(1.0, v), 0, GREY);
    }
    c.line(px(0.0, 0.0), px(1.0, 0.0), 1, BLACK);
    c.line(px(0.0, 0.0), px(0.0, 1.0), 1, BLACK);
    let mut prev: Option<(f64, f64)> = None;
    for &(r, p) in curve {
        let q = px(r, p);
        if let Some(a) = prev {
            c.line(a, q, 1, BLUE);
        }
        prev = Some(q);
    }
    c.save(path)
}

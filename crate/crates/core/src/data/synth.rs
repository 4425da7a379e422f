//! Procedural text images with exact clean backgrounds.
//!
//! Backgrounds are smooth colour gradients with a few soft blobs. Text is a
//! set of axis-aligned boxes filled with high-contrast pseudo-glyph strokes
//! (bars, diagonals and elliptical arcs). Strokes never leave their box, so
//! the rasterized boxes cover every pixel where image and clean differ.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::masks::TextPolygon;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Inclusive range of box widths in pixels.
    pub box_width: (usize, usize),
    pub box_height: (usize, usize),
    /// Upper bound on soft background blobs.
    pub max_shapes: usize,
    pub stroke_width: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            min_boxes: 1,
            max_boxes: 3,
            box_width: (16, 40),
            box_height: (10, 18),
            max_shapes: 3,
            stroke_width: (1, 2),
        }
    }
}

#[derive(Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, gap: usize) -> bool {
        self.x0 < o.x1 + gap && o.x0 < self.x1 + gap && self.y0 < o.y1 + gap && o.y0 < self.y1 + gap
    }
}

enum Stroke {
    Bar { x0: f64, y0: f64, x1: f64, y1: f64 },
    Line { ax: f64, ay: f64, bx: f64, by: f64, half: f64 },
    Arc { cx: f64, cy: f64, rx: f64, ry: f64, half: f64, start: f64, span: f64 },
}

impl Stroke {
    fn covers(&self, px: f64, py: f64) -> bool {
        match *self {
            Stroke::Bar { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Stroke::Line { ax, ay, bx, by, half } => {
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
                };
                let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                qx * qx + qy * qy <= half * half
            }
            Stroke::Arc { cx, cy, rx, ry, half, start, span } => {
                let (u, v) = ((px - cx) / rx, (py - cy) / ry);
                let r = (u * u + v * v).sqrt();
                // first-order distance to the ellipse in pixels
                let grad = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                let radial = if grad == 0.0 { f64::INFINITY } else { (r - 1.0).abs() * r / grad };
                let angle = (v.atan2(u) - start).rem_euclid(TAU);
                radial <= half && angle <= span
            }
        }
    }
}

fn background<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base = rng.gen_range(0.2..0.8);
        let gx = rng.gen_range(-0.3..0.3);
        let gy = rng.gen_range(-0.3..0.3);
        for y in 0..h {
            for x in 0..w {
                let fx = (x as f64 + 0.5) / w as f64 - 0.5;
                let fy = (y as f64 + 0.5) / h as f64 - 0.5;
                img[c * h * w + y * w + x] = base + gx * fx + gy * fy;
            }
        }
    }
    let shapes = rng.gen_range(0..=cfg.max_shapes);
    for _ in 0..shapes {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let sigma = rng.gen_range(0.08..0.22) * w.min(h) as f64;
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let a = 0.7 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                for (c, col) in color.iter().enumerate() {
                    let v = &mut img[c * h * w + y * w + x];
                    *v = *v * (1.0 - a) + col * a;
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn place_boxes<R: Rng + ?Sized>(cfg: &SynthConfig, count: usize, rng: &mut R) -> Result<Vec<Rect>> {
    let capacity_err = || Error::Capacity {
        requested: count,
        width: cfg.width,
        height: cfg.height,
    };
    if count == 0 {
        return Ok(Vec::new());
    }
    if cfg.box_width.0 + 2 > cfg.width || cfg.box_height.0 + 2 > cfg.height {
        return Err(capacity_err());
    }
    let mut boxes: Vec<Rect> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..200 {
            let bw = rng.gen_range(cfg.box_width.0..=cfg.box_width.1.min(cfg.width - 2));
            let bh = rng.gen_range(cfg.box_height.0..=cfg.box_height.1.min(cfg.height - 2));
            let x0 = rng.gen_range(1..=cfg.width - 1 - bw);
            let y0 = rng.gen_range(1..=cfg.height - 1 - bh);
            let r = Rect {
                x0,
                y0,
                x1: x0 + bw,
                y1: y0 + bh,
            };
            if boxes.iter().all(|b| !b.overlaps(&r, 1)) {
                boxes.push(r);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(capacity_err());
        }
    }
    Ok(boxes)
}

fn glyph_strokes<R: Rng + ?Sized>(cfg: &SynthConfig, b: &Rect, rng: &mut R) -> Vec<Stroke> {
    // drawable area keeps a one-pixel margin inside the box
    let (ax0, ay0) = (b.x0 as f64 + 1.0, b.y0 as f64 + 1.0);
    let (ax1, ay1) = (b.x1 as f64 - 1.0, b.y1 as f64 - 1.0);
    let mut strokes = Vec::new();
    let mut x = ax0;
    while x < ax1 - 2.0 {
        let cell_w = rng.gen_range(5.0..9.0f64).min(ax1 - x);
        let (cx0, cx1) = (x, x + cell_w);
        let t = rng.gen_range(cfg.stroke_width.0..=cfg.stroke_width.1) as f64;
        for _ in 0..rng.gen_range(1..=3) {
            let stroke = match rng.gen_range(0..4) {
                0 => {
                    let sx = rng.gen_range(cx0..(cx1 - t).max(cx0 + 0.01));
                    Stroke::Bar { x0: sx, y0: ay0, x1: sx + t, y1: ay1 }
                }
                1 => {
                    let sy = rng.gen_range(ay0..(ay1 - t).max(ay0 + 0.01));
                    Stroke::Bar { x0: cx0, y0: sy, x1: cx1, y1: sy + t }
                }
                2 => {
                    let half = t / 2.0;
                    let flip = rng.gen_bool(0.5);
                    let (ya, yb) = if flip { (ay0 + half, ay1 - half) } else { (ay1 - half, ay0 + half) };
                    Stroke::Line { ax: cx0 + half, ay: ya, bx: cx1 - half, by: yb, half }
                }
                _ => {
                    let half = t / 2.0;
                    Stroke::Arc {
                        cx: (cx0 + cx1) / 2.0,
                        cy: (ay0 + ay1) / 2.0,
                        rx: ((cx1 - cx0) / 2.0 - half).max(0.5),
                        ry: ((ay1 - ay0) / 2.0 - half).max(0.5),
                        half,
                        start: rng.gen_range(0.0..TAU),
                        span: rng.gen_range(TAU / 4.0..TAU),
                    }
                }
            };
            strokes.push(stroke);
        }
        x = cx1 + rng.gen_range(1.0..3.0);
    }
    strokes
}

/// Generates one annotated sample with its clean target.
pub fn synth_generate<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<AnnotatedImage> {
    if cfg.min_boxes > cfg.max_boxes {
        return Err(Error::Config(format!(
            "min_boxes {} exceeds max_boxes {}",
            cfg.min_boxes, cfg.max_boxes
        )));
    }
    let (h, w) = (cfg.height, cfg.width);
    let clean = background(cfg, rng);
    let count = rng.gen_range(cfg.min_boxes..=cfg.max_boxes);
    let boxes = place_boxes(cfg, count, rng)?;
    let mut image = clean.clone();
    for b in &boxes {
        let mut mean = 0.0;
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let i = y * w + x;
                mean += 0.299 * clean[i] + 0.587 * clean[h * w + i] + 0.114 * clean[2 * h * w + i];
            }
        }
        mean /= ((b.x1 - b.x0) * (b.y1 - b.y0)) as f64;
        let color: [f64; 3] = if mean > 0.5 {
            [rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25)]
        } else {
            [rng.gen_range(0.75..1.0), rng.gen_range(0.75..1.0), rng.gen_range(0.75..1.0)]
        };
        let strokes = glyph_strokes(cfg, b, rng);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if strokes.iter().any(|s| s.covers(px, py)) {
                    for (c, col) in color.iter().enumerate() {
                        image[c * h * w + y * w + x] = *col;
                    }
                }
            }
        }
    }
    let polygons = boxes
        .iter()
        .map(|b| TextPolygon::rect(b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64))
        .collect();
    Ok(AnnotatedImage {
        image: Tensor::new(image, &[3, h, w])?,
        polygons,
        clean: Some(Tensor::new(clean, &[3, h, w])?),
    })
}

//! Text-region masks: polygon rasterization, cross-image random masks and
//! masking of images.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A text-detection polygon in source-image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPolygon {
    pub vertices: Vec<(f64, f64)>,
    /// Annotation marked do-not-care (`###`). Still rasterized as text.
    pub ignore: bool,
}

impl TextPolygon {
    pub fn new(vertices: Vec<(f64, f64)>, ignore: bool) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::TooFewVertices(vertices.len()));
        }
        Ok(TextPolygon { vertices, ignore })
    }

    /// Axis-aligned quad with corners `(x0,y0)` and `(x1,y1)`, clockwise in image space.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        TextPolygon {
            vertices: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
            ignore: false,
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        TextPolygon {
            vertices: self.vertices.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
            ignore: self.ignore,
        }
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn flipped_x(&self, width: f64) -> Self {
        TextPolygon {
            vertices: self.vertices.iter().map(|&(x, y)| (width - x, y)).collect(),
            ignore: self.ignore,
        }
    }
}

/// Per-pixel {0,1} mask, row-major; 1 marks text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    /// Fraction of pixels marked 1.
    pub fn coverage(&self) -> f64 {
        self.values.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.values.len() as f64
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a | b).collect(),
        }
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut out = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                    for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                        out.set(yy, xx, true);
                    }
                }
            }
        }
        out
    }

    pub fn flipped_x(&self) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// `[1,1,h,w]` tensor with entries 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.values.iter().map(|&v| v as f64).collect(),
            &[1, 1, self.height, self.width],
        )
        .expect("mask dimensions are positive")
    }

    fn complement_tensor(&self) -> Tensor {
        Tensor::new(
            self.values.iter().map(|&v| 1.0 - v as f64).collect(),
            &[self.height, self.width],
        )
        .expect("mask dimensions are positive")
    }
}

fn fill_polygon(mask: &mut BinaryMask, poly: &TextPolygon, crossings: &mut Vec<f64>) {
    let n = poly.vertices.len();
    let (ymin, ymax) = poly
        .vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    // rows whose centre y+0.5 can fall inside [ymin, ymax]
    let first = (ymin - 0.5).ceil().max(0.0) as usize;
    let last = ((ymax - 0.5).floor()).min(mask.height as f64 - 1.0);
    if last < 0.0 {
        return;
    }
    for row in first..=last as usize {
        let cy = row as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (x0, y0) = poly.vertices[i];
            let (x1, y1) = poly.vertices[(i + 1) % n];
            if (y0 > cy) != (y1 > cy) {
                crossings.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            // centres x+0.5 strictly inside (span[0], span[1])
            let lo = (span[0] - 0.5).floor() + 1.0;
            let hi = (span[1] - 0.5).ceil() - 1.0;
            let lo = lo.max(0.0);
            let hi = hi.min(mask.width as f64 - 1.0);
            if hi < lo {
                continue;
            }
            for x in lo as usize..=hi as usize {
                mask.values[row * mask.width + x] = 1;
            }
        }
    }
}

/// Marks every pixel whose centre lies strictly inside any polygon
/// (even–odd rule per polygon, union across polygons). Coordinates outside
/// the image are clipped.
pub fn rasterize(polys: &[TextPolygon], height: usize, width: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::zeros(height, width);
    let mut crossings = Vec::new();
    for poly in polys {
        if poly.vertices.len() < 3 {
            return Err(Error::TooFewVertices(poly.vertices.len()));
        }
        fill_polygon(&mut mask, poly, &mut crossings);
    }
    Ok(mask)
}

/// One image's annotation inside the random-mask pool.
#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub polygons: Vec<TextPolygon>,
    pub width: usize,
    pub height: usize,
}

/// Polygon sets of a whole dataset, from which `M_rand` is drawn.
#[derive(Clone, Debug, Default)]
pub struct AnnotationPool {
    pub entries: Vec<PoolEntry>,
}

impl AnnotationPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, polygons: Vec<TextPolygon>, width: usize, height: usize) {
        self.entries.push(PoolEntry {
            polygons,
            width,
            height,
        });
    }

    /// Entry `index` rescaled to the target size and rasterized.
    pub fn mask_of(&self, index: usize, target_h: usize, target_w: usize) -> Result<BinaryMask> {
        let e = &self.entries[index];
        let (sx, sy) = (
            target_w as f64 / e.width as f64,
            target_h as f64 / e.height as f64,
        );
        let scaled: Vec<_> = e.polygons.iter().map(|p| p.scaled(sx, sy)).collect();
        rasterize(&scaled, target_h, target_w)
    }

    /// Uniform draw of an entry index, skipping `exclude` unless it is the
    /// only entry.
    pub fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R, exclude: Option<usize>) -> Result<usize> {
        let n = self.entries.len();
        if n == 0 {
            return Err(Error::EmptyPool);
        }
        match exclude {
            Some(skip) if n > 1 && skip < n => {
                let i = rng.gen_range(0..n - 1);
                Ok(if i >= skip { i + 1 } else { i })
            }
            _ => Ok(rng.gen_range(0..n)),
        }
    }

    pub fn sample_mask<R: Rng + ?Sized>(
        &self,
        target_h: usize,
        target_w: usize,
        rng: &mut R,
        exclude: Option<usize>,
    ) -> Result<BinaryMask> {
        let index = self.draw_index(rng, exclude)?;
        self.mask_of(index, target_h, target_w)
    }
}

/// Draws `M_rand`: one pool entry chosen uniformly, rescaled to the target size.
pub fn sample_rand_mask<R: Rng + ?Sized>(
    pool: &AnnotationPool,
    target_h: usize,
    target_w: usize,
    rng: &mut R,
) -> Result<BinaryMask> {
    pool.sample_mask(target_h, target_w, rng, None)
}

/// `image ⊙ (1 − mask)`, broadcast over leading (batch, channel) dimensions.
pub fn mask_complement_apply(image: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let s = image.shape();
    if s.len() < 2 || s[s.len() - 2] != mask.height || s[s.len() - 1] != mask.width {
        return Err(Error::shape("mask_complement_apply", s, &[mask.height, mask.width]));
    }
    image.mul(&mask.complement_tensor())
}

//! Deliberately naive reference implementations used to cross-check the
//! optimized code paths. Nothing in here calls into the modules it validates,
//! apart from building input tensors.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disagreement between a computed buffer and its oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleReport {
    pub max_abs: f64,
    /// `max_abs` divided by the largest oracle magnitude (floored at 1e-12).
    pub max_rel: f64,
    /// Flat index of the largest absolute disagreement.
    pub worst: usize,
}

pub fn compare(actual: &[f64], expected: &[f64]) -> OracleReport {
    assert_eq!(actual.len(), expected.len(), "oracle length mismatch");
    let mut max_abs = 0.0;
    let mut worst = 0;
    let mut scale: f64 = 0.0;
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        let d = (a - e).abs();
        if d > max_abs || d.is_nan() {
            max_abs = d;
            worst = i;
        }
        scale = scale.max(e.abs());
    }
    OracleReport {
        max_abs,
        max_rel: max_abs / scale.max(1e-12),
        worst,
    }
}

/// Textbook DFT of one `[h,w]` plane. Returns (real, imaginary) planes.
pub fn oracle_dft2(plane: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if h > 16 || w > 16 {
        return Err(Error::Oracle(format!("oracle_dft2 limited to 16x16, got {h}x{w}")));
    }
    assert_eq!(plane.len(), h * w);
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let angle = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    sr += plane[y * w + x] * angle.cos();
                    si += plane[y * w + x] * angle.sin();
                }
            }
            re[u * w + v] = sr;
            im[u * w + v] = si;
        }
    }
    Ok((re, im))
}

/// Even–odd ray-crossing test. Zero-area polygons contain nothing.
pub fn oracle_point_in_polygon(point: (f64, f64), polygon: &[(f64, f64)]) -> bool {
    assert!(polygon.len() >= 3, "polygon needs at least 3 vertices");
    let mut twice_area = 0.0;
    for i in 0..polygon.len() {
        let (a, b) = (polygon[i], polygon[(i + 1) % polygon.len()]);
        twice_area += a.0 * b.1 - b.0 * a.1;
    }
    if twice_area == 0.0 {
        return false;
    }
    let (px, py) = point;
    let mut inside = false;
    let mut j = polygon.len() - 1;
    for i in 0..polygon.len() {
        let (xi, yi) = polygon[i];
        let (xj, yj) = polygon[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Central differences `(f(x+εe_i) − f(x−εe_i)) / 2ε` for every element of `x`.
pub fn oracle_finite_diff(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    oracle_finite_diff_at(f, x, eps, &(0..x.numel()).collect::<Vec<_>>())
}

/// Central differences restricted to the listed flat indices.
pub fn oracle_finite_diff_at(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::Oracle("finite-difference step must be positive".into()));
    }
    let base = x.to_vec();
    let mut probe = |i: usize, delta: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] += delta;
        let value = f(&Tensor::new(v, x.shape())?)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("finite-difference probe at index {i}")));
        }
        Ok(value)
    };
    indices
        .iter()
        .map(|&i| Ok((probe(i, eps)? - probe(i, -eps)?) / (2.0 * eps)))
        .collect()
}

/// Hyperparameters for the scalar AdamW reimplementation.
#[derive(Clone, Copy, Debug)]
pub struct ScalarAdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Runs AdamW on one scalar; `grad(p)` supplies the gradient at the current
/// point. Returns the parameter after every step.
pub fn oracle_adamw_trajectory(
    cfg: ScalarAdamW,
    mut p: f64,
    steps: usize,
    grad: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(p);
        p -= cfg.lr * cfg.weight_decay * p;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
        let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
        p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        out.push(p);
    }
    out
}

/// Mean squared error over two flat buffers.
pub fn oracle_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        total += d * d;
    }
    total / a.len() as f64
}

pub fn oracle_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = oracle_mse(a, b);
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

/// AGE, pEPs and pCEPs for `[3,h,w]` images in [0,1], walking pixels by
/// coordinates and testing neighbours explicitly.
pub fn oracle_age_peps_pceps(a: &[f64], b: &[f64], h: usize, w: usize, threshold: f64) -> (f64, f64, f64) {
    let gray = |img: &[f64], y: usize, x: usize| {
        let px = |c: usize| img[c * h * w + y * w + x];
        255.0 * (0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2))
    };
    let diff = |y: usize, x: usize| (gray(a, y, x) - gray(b, y, x)).abs();
    let is_err = |y: usize, x: usize| diff(y, x) > threshold;
    let (mut age, mut eps, mut ceps) = (0.0, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            age += diff(y, x);
            if !is_err(y, x) {
                continue;
            }
            eps += 1;
            let up = y == 0 || is_err(y - 1, x);
            let down = y + 1 == h || is_err(y + 1, x);
            let left = x == 0 || is_err(y, x - 1);
            let right = x + 1 == w || is_err(y, x + 1);
            if up && down && left && right {
                ceps += 1;
            }
        }
    }
    let n = (h * w) as f64;
    (age / n, eps as f64 / n, ceps as f64 / n)
}

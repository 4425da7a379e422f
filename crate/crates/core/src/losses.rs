//! Reconstruction objective: L1 + focal frequency loss, SSIM loss and a
//! perceptual/Gram feature loss on a frozen random feature network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Seed of the frozen feature extractor.
pub const FEATURE_SEED: u64 = 0x7E57;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// L1
    pub lambda1: f64,
    /// focal frequency
    pub lambda2: f64,
    /// 1 - SSIM
    pub alpha: f64,
    /// perceptual + Gram
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 15.0,
            lambda2: 15.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.alpha, self.beta];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, o: &Tensor, y: &Tensor) -> Result<()> {
    if o.shape() != y.shape() {
        return Err(Error::shape(op, o.shape(), y.shape()));
    }
    Ok(())
}

fn image_shape(op: &'static str, o: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *o.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape(format!("{op} expects [n,c,h,w], got {:?}", o.shape()))),
    }
}

pub fn l1_loss(o: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("l1_loss", o, y)?;
    Ok(o.sub(y)?.abs().mean())
}

/// Squared spectral error `|F(o) - F(y)|²` as `[n,c,h,w]`.
fn spectrum_error(o: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = image_shape("ffl_loss", o)?;
    let f = o.sub(y)?.dft2()?;
    f.square().sum_axes(&[2])?.reshape(&[n, c, h, w])
}

fn focal_weights(d: &[f64], planes: usize, plane: usize) -> Vec<f64> {
    let mut w = vec![0.0; d.len()];
    for (dst, src) in w.chunks_exact_mut(plane).zip(d.chunks_exact(plane)).take(planes) {
        let max = src.iter().fold(0.0f64, |m, &v| m.max(v.sqrt()));
        if max > 0.0 {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = b.sqrt() / max;
            }
        }
    }
    w
}

/// Spectrum weight matrix of the focal frequency loss: `|F(o) - F(y)|`
/// normalized by its maximum per image and channel. Constant.
pub fn ffl_weights(o: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("ffl_loss", o, y)?;
    let (n, c, h, w) = image_shape("ffl_loss", o)?;
    let d = {
        let _guard = crate::tensor::no_grad();
        spectrum_error(o, y)?
    };
    let weights = focal_weights(&d.data(), n * c, h * w);
    Tensor::new(weights, &[n, c, h, w])
}

/// Focal frequency loss with a caller-supplied weight matrix.
pub fn ffl_loss_weighted(o: &Tensor, y: &Tensor, weights: &Tensor) -> Result<Tensor> {
    same_shape("ffl_loss", o, y)?;
    let d = spectrum_error(o, y)?;
    if weights.shape() != d.shape() {
        return Err(Error::shape("ffl_loss weights", d.shape(), weights.shape()));
    }
    Ok(d.mul(weights)?.mean())
}

/// Mean over images, channels and frequencies of `w·|F(o) - F(y)|²`, using the
/// unnormalized transform.
pub fn ffl_loss(o: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("ffl_loss", o, y)?;
    let (n, c, h, w) = image_shape("ffl_loss", o)?;
    let d = spectrum_error(o, y)?;
    let weights = Tensor::new(focal_weights(&d.data(), n * c, h * w), d.shape())?;
    Ok(d.mul(&weights)?.mean())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of `[m,1,h,w]` with reflect padding.
fn blur(x: &Tensor) -> Result<Tensor> {
    x.pad_reflect(SSIM_WINDOW / 2)?
        .separable_filter(&gaussian_taps(SSIM_WINDOW, SSIM_SIGMA))
}

/// Per-pixel SSIM of `[n,c,h,w]` images, computed channel by channel.
pub fn ssim_map(o: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("ssim_map", o, y)?;
    let (n, c, h, w) = image_shape("ssim_map", o)?;
    let m = n * c;
    let a = o.reshape(&[m, 1, h, w])?;
    let b = y.reshape(&[m, 1, h, w])?;
    // blur all five moment maps in one pass
    let stacked = Tensor::concat(&[&a, &b, &a.square(), &b.square(), &a.mul(&b)?], 0)?;
    let blurred = blur(&stacked)?;
    let part = |i: usize| blurred.narrow(0, i * m, m);
    let (mu_a, mu_b, aa, bb, ab) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = aa.sub(&mu_aa)?;
    let var_b = bb.sub(&mu_bb)?;
    let cov = ab.sub(&mu_ab)?;
    let num = mu_ab
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .mul(&cov.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mu_aa
        .add(&mu_bb)?
        .add_scalar(SSIM_C1)
        .mul(&var_a.add(&var_b)?.add_scalar(SSIM_C2))?;
    num.div(&den)?.reshape(&[n, c, h, w])
}

pub fn ssim_loss(o: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(ssim_map(o, y)?.mean().neg().add_scalar(1.0))
}

/// Three frozen stride-2 conv + relu blocks (3→8→16→32) standing in for a
/// pretrained perceptual network.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    blocks: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    pub fn new() -> Self {
        Self::with_seed(FEATURE_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = [(3, 8), (8, 16), (16, 32)]
            .into_iter()
            .map(|(cin, cout)| {
                let fan_in = cin * 9;
                let bound = (6.0f64 / fan_in as f64).sqrt();
                let w = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
                (
                    Tensor::new(w, &[cout, cin, 3, 3]).expect("positive shape"),
                    Tensor::zeros(&[cout]),
                )
            })
            .collect();
        FeatureExtractor { blocks }
    }

    pub fn weights(&self) -> Vec<Tensor> {
        self.blocks.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    /// Output of every block.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for (w, b) in &self.blocks {
            h = h.conv2d(w, Some(b), 2, 1)?.relu();
            out.push(h.clone());
        }
        Ok(out)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// `f·fᵀ / (C·H·W)` per batch item, `[n,c,c]`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = image_shape("gram", f)?;
    let flat = f.reshape(&[n, c, h * w])?;
    Ok(flat.matmul(&flat.transpose_last()?)?.mul_scalar(1.0 / (c * h * w) as f64))
}

pub fn feature_loss(o: &Tensor, y: &Tensor, fx: &FeatureExtractor) -> Result<Tensor> {
    same_shape("feature_loss", o, y)?;
    let fo = fx.features(o)?;
    let fy = fx.features(y)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fo.iter().zip(&fy) {
        let term = l1_loss(a, b)?.add(&l1_loss(&gram(a)?, &gram(b)?)?)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has blocks"))
}

/// Weighted terms of the combined loss; `total` carries the graph.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub l1: f64,
    pub ffl: f64,
    pub ssim: f64,
    pub feature: f64,
}

impl LossBreakdown {
    pub fn value(&self) -> f64 {
        self.total.item()
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l1", self.l1),
            ("ffl", self.ffl),
            ("ssim", self.ssim),
            ("feature", self.feature),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `λ1·L1 + λ2·FFL + α·(1 − SSIM) + β·feature`. Zero-weighted terms are skipped.
pub fn combined_loss_parts(o: &Tensor, y: &Tensor, w: &LossWeights, fx: &FeatureExtractor) -> Result<LossBreakdown> {
    same_shape("combined_loss", o, y)?;
    let mut total: Option<Tensor> = None;
    let mut values = [0.0; 4];
    let terms: [(f64, &dyn Fn() -> Result<Tensor>); 4] = [
        (w.lambda1, &|| l1_loss(o, y)),
        (w.lambda2, &|| ffl_loss(o, y)),
        (w.alpha, &|| ssim_loss(o, y)),
        (w.beta, &|| feature_loss(o, y, fx)),
    ];
    for (slot, (weight, term)) in values.iter_mut().zip(terms) {
        if weight == 0.0 {
            continue;
        }
        let t = term()?;
        let t = if weight == 1.0 { t } else { t.mul_scalar(weight) };
        *slot = t.item();
        total = Some(match total {
            Some(acc) => acc.add(&t)?,
            None => t,
        });
    }
    let [l1, ffl, ssim, feature] = values;
    Ok(LossBreakdown {
        total: total.unwrap_or_else(|| Tensor::scalar(0.0)),
        l1,
        ffl,
        ssim,
        feature,
    })
}

pub fn combined_loss(o: &Tensor, y: &Tensor, w: &LossWeights, fx: &FeatureExtractor) -> Result<Tensor> {
    Ok(combined_loss_parts(o, y, w, fx)?.total)
}

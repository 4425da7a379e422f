//! Full-reference image metrics: PSNR, MSSIM, MSE, AGE, pEPs and pCEPs, plus
//! evaluation restricted to text regions.

use crate::error::{Error, Result};
use crate::losses::ssim_map;
use crate::masks::BinaryMask;
use crate::tensor::{no_grad, Tensor};

pub const PSNR_CAP: f64 = 99.0;
/// Gray-level difference above which a pixel counts as an error pixel.
pub const ERROR_THRESHOLD: f64 = 20.0;

fn image_dims(op: &'static str, o: &Tensor, y: &Tensor) -> Result<(usize, usize)> {
    if o.shape() != y.shape() {
        return Err(Error::shape(op, o.shape(), y.shape()));
    }
    match *o.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::InvalidShape(format!("{op} expects [3,h,w], got {:?}", o.shape()))),
    }
}

fn mse(o: &Tensor, y: &Tensor) -> f64 {
    let (a, b) = (o.data(), y.data());
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

/// `10·log10(1/mse)`, capped at 99 dB.
pub fn psnr(o: &Tensor, y: &Tensor) -> Result<f64> {
    image_dims("psnr", o, y)?;
    let m = mse(o, y);
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// 100 × mean SSIM.
pub fn mssim(o: &Tensor, y: &Tensor) -> Result<f64> {
    let (h, w) = image_dims("mssim", o, y)?;
    let _guard = no_grad();
    let map = ssim_map(&o.reshape(&[1, 3, h, w])?, &y.reshape(&[1, 3, h, w])?)?;
    Ok(100.0 * map.mean().item())
}

/// 100 × mean squared error.
pub fn mse100(o: &Tensor, y: &Tensor) -> Result<f64> {
    image_dims("mse100", o, y)?;
    Ok(100.0 * mse(o, y))
}

fn gray(img: &[f64], plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|i| 255.0 * (0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]))
        .collect()
}

/// AGE, pEPs and pCEPs with the default error threshold.
pub fn age_peps_pceps(o: &Tensor, y: &Tensor) -> Result<(f64, f64, f64)> {
    age_peps_pceps_with(o, y, ERROR_THRESHOLD)
}

/// Mean absolute gray difference, fraction of pixels whose difference
/// exceeds `threshold`, and fraction of error pixels whose existing
/// 4-neighbours are all error pixels too.
pub fn age_peps_pceps_with(o: &Tensor, y: &Tensor, threshold: f64) -> Result<(f64, f64, f64)> {
    let (h, w) = image_dims("age_peps_pceps", o, y)?;
    let n = h * w;
    let diff: Vec<f64> = {
        let (go, gy) = (gray(&o.data(), n), gray(&y.data(), n));
        go.iter().zip(&gy).map(|(a, b)| (a - b).abs()).collect()
    };
    let err: Vec<bool> = diff.iter().map(|&d| d > threshold).collect();
    let mut clustered = 0usize;
    for yy in 0..h {
        for xx in 0..w {
            let i = yy * w + xx;
            if !err[i] {
                continue;
            }
            let neighbours_bad = (yy == 0 || err[i - w])
                && (yy + 1 == h || err[i + w])
                && (xx == 0 || err[i - 1])
                && (xx + 1 == w || err[i + 1]);
            clustered += neighbours_bad as usize;
        }
    }
    let errors = err.iter().filter(|&&e| e).count();
    Ok((
        diff.iter().sum::<f64>() / n as f64,
        errors as f64 / n as f64,
        clustered as f64 / n as f64,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// dB
    pub psnr: f64,
    /// percent
    pub mssim: f64,
    /// percent
    pub mse: f64,
    /// gray levels on the 0–255 scale
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
    pub n_images: usize,
}

pub const REPORT_CSV_HEADER: &str = "n_images,psnr,mssim,mse,age,peps,pceps";

impl EvalReport {
    /// All metrics for one `[3,h,w]` pair.
    pub fn of_pair(o: &Tensor, y: &Tensor) -> Result<EvalReport> {
        let (age, peps, pceps) = age_peps_pceps(o, y)?;
        Ok(EvalReport {
            psnr: psnr(o, y)?,
            mssim: mssim(o, y)?,
            mse: mse100(o, y)?,
            age,
            peps,
            pceps,
            n_images: 1,
        })
    }

    /// Unweighted mean of per-image reports.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len();
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        Some(EvalReport {
            psnr: avg(|r| r.psnr),
            mssim: avg(|r| r.mssim),
            mse: avg(|r| r.mse),
            age: avg(|r| r.age),
            peps: avg(|r| r.peps),
            pceps: avg(|r| r.pceps),
            n_images: reports.iter().map(|r| r.n_images).sum(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n_images, self.psnr, self.mssim, self.mse, self.age, self.peps, self.pceps
        )
    }

    /// Header plus one aligned row per labelled report.
    pub fn table(rows: &[(&str, EvalReport)]) -> String {
        let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<label_w$} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
            "method", "PSNR", "MSSIM", "MSE", "AGE", "pEPs", "pCEPs", "n"
        );
        for (label, r) in rows {
            out.push_str(&format!(
                "{:<label_w$} {:>8.2} {:>8.2} {:>8.4} {:>8.3} {:>8.4} {:>8.4} {:>6}\n",
                label, r.psnr, r.mssim, r.mse, r.age, r.peps, r.pceps, r.n_images
            ));
        }
        out
    }
}

/// `y⊙(1−M⁺) + o⊙M⁺` with `M⁺` the mask dilated by `pad`.
pub fn region_composite(o: &Tensor, y: &Tensor, mask: &BinaryMask, pad: usize) -> Result<Tensor> {
    let (h, w) = image_dims("region_restricted_eval", o, y)?;
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::shape("region_restricted_eval", &[h, w], &[mask.height, mask.width]));
    }
    let grown = mask.dilate(pad);
    let (od, yd) = (o.data(), y.data());
    let data = (0..3 * h * w)
        .map(|i| if grown.values[i % (h * w)] == 1 { od[i] } else { yd[i] })
        .collect();
    Tensor::new(data, &[3, h, w])
}

/// Scores `o` on the (dilated) text region only; the background is taken
/// from `y` and is therefore perfect.
pub fn region_restricted_eval(o: &Tensor, y: &Tensor, mask: &BinaryMask, pad: usize) -> Result<EvalReport> {
    EvalReport::of_pair(&region_composite(o, y, mask, pad)?, y)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..3 * h * w).map(|_| rng.gen()).collect(), &[3, h, w]).unwrap()
    }

    #[test]
    fn identical_images_are_perfect() {
        let y = random(0, 16, 16);
        let r = EvalReport::of_pair(&y, &y).unwrap();
        assert_eq!(r.psnr, 99.0);
        assert!((r.mssim - 100.0).abs() < 1e-6);
        assert_eq!((r.mse, r.age, r.peps, r.pceps), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_offsets() {
        let y = Tensor::full(&[3, 8, 8], 0.2);
        let o = Tensor::full(&[3, 8, 8], 0.3);
        assert!((psnr(&o, &y).unwrap() - 20.0).abs() < 1e-9);
        assert!((mse100(&o, &y).unwrap() - 1.0).abs() < 1e-12);
        let o = y.add_scalar(30.0 / 255.0);
        let (age, peps, pceps) = age_peps_pceps(&o, &y).unwrap();
        assert!((age - 30.0).abs() < 1e-9);
        assert_eq!((peps, pceps), (1.0, 1.0));
    }

    #[test]
    fn isolated_error_pixel_is_not_clustered() {
        let y = Tensor::zeros(&[3, 8, 8]);
        let mut d = vec![0.0; 3 * 64];
        for c in 0..3 {
            d[c * 64 + 3 * 8 + 4] = 1.0;
        }
        let o = Tensor::new(d, &[3, 8, 8]).unwrap();
        let (_, peps, pceps) = age_peps_pceps(&o, &y).unwrap();
        assert_eq!(peps, 1.0 / 64.0);
        assert_eq!(pceps, 0.0);
    }

    #[test]
    fn region_eval_limits() {
        let (o, y) = (random(1, 16, 16), random(2, 16, 16));
        let zero = region_restricted_eval(&o, &y, &BinaryMask::zeros(16, 16), 0).unwrap();
        assert_eq!(zero.psnr, 99.0);
        let full = region_restricted_eval(&o, &y, &BinaryMask::ones(16, 16), 0).unwrap();
        assert_eq!(full, EvalReport::of_pair(&o, &y).unwrap());
    }

    #[test]
    fn mean_is_order_invariant() {
        let rs: Vec<_> = (0..4)
            .map(|i| EvalReport::of_pair(&random(i, 8, 8), &random(i + 10, 8, 8)).unwrap())
            .collect();
        let mut rev = rs.clone();
        rev.reverse();
        let (a, b) = (EvalReport::mean(&rs).unwrap(), EvalReport::mean(&rev).unwrap());
        assert!((a.psnr - b.psnr).abs() < 1e-12);
        assert_eq!(a.n_images, 4);
    }
}

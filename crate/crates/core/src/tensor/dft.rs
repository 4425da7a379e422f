use std::f64::consts::TAU;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Cosine and sine tables `[n×n]` for the unnormalized forward transform.
fn twiddles(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![0.0; n * n];
    let mut s = vec![0.0; n * n];
    for u in 0..n {
        for k in 0..n {
            let phase = TAU * ((u * k) % n) as f64 / n as f64;
            c[u * n + k] = phase.cos();
            s[u * n + k] = phase.sin();
        }
    }
    (c, s)
}

impl Tensor {
    /// Unnormalized 2-D DFT of every `[h,w]` plane of `[n,c,h,w]`.
    ///
    /// Returns `[n,c,2,h,w]` holding the real then the imaginary plane.
    /// Evaluated directly as `E_h · x · E_w` with `E = C - iS`; no FFT.
    pub fn dft2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape(format!("dft2 expects [n,c,h,w], got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ch, sh) = twiddles(h);
        let (cw, sw) = twiddles(w);
        let hw = h * w;
        let mut out = vec![0.0; n * c * 2 * hw];
        {
            let x = self.data();
            let mut xc = vec![0.0; hw];
            let mut xs = vec![0.0; hw];
            let mut tmp = vec![0.0; hw];
            for plane in 0..n * c {
                let src = &x[plane * hw..(plane + 1) * hw];
                gemm(h, w, w, src, false, &cw, false, 0.0, &mut xc);
                gemm(h, w, w, src, false, &sw, false, 0.0, &mut xs);
                let (re, im) = out[plane * 2 * hw..(plane + 1) * 2 * hw].split_at_mut(hw);
                // re = C_h x C_w - S_h x S_w
                gemm(h, h, w, &ch, false, &xc, false, 0.0, re);
                gemm(h, h, w, &sh, false, &xs, false, 0.0, &mut tmp);
                re.iter_mut().zip(&tmp).for_each(|(r, t)| *r -= t);
                // im = -(C_h x S_w + S_h x C_w)
                gemm(h, h, w, &ch, false, &xs, false, 0.0, im);
                gemm(h, h, w, &sh, false, &xc, false, 1.0, im);
                im.iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, 2, h, w],
            out,
            vec![self.clone()],
            move |_, g, _| {
                // dx = C_h (G_r C_w - G_i S_w) - S_h (G_r S_w + G_i C_w)
                let mut dx = vec![0.0; n * c * hw];
                let mut scratch = vec![0.0; hw];
                let mut a = vec![0.0; hw];
                let mut b = vec![0.0; hw];
                for plane in 0..n * c {
                    let (gr, gi) = g[plane * 2 * hw..(plane + 1) * 2 * hw].split_at(hw);
                    gemm(h, w, w, gr, false, &cw, false, 0.0, &mut a);
                    gemm(h, w, w, gi, false, &sw, false, 0.0, &mut scratch);
                    a.iter_mut().zip(&scratch).for_each(|(x, y)| *x -= y);
                    gemm(h, w, w, gr, false, &sw, false, 0.0, &mut b);
                    gemm(h, w, w, gi, false, &cw, false, 1.0, &mut b);
                    let dst = &mut dx[plane * hw..(plane + 1) * hw];
                    gemm(h, h, w, &ch, false, &a, false, 0.0, dst);
                    gemm(h, h, w, &sh, false, &b, false, 0.0, &mut scratch);
                    dst.iter_mut().zip(&scratch).for_each(|(x, y)| *x -= y);
                }
                vec![Some(dx)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let c = 0.37;
        let y = Tensor::full(&[1, 1, 4, 4], c).dft2().unwrap().to_vec();
        let (re, im) = y.split_at(16);
        assert!((re[0] - 16.0 * c).abs() < 1e-12);
        assert!(re[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(im.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rectangular_planes() {
        let x = Tensor::full(&[2, 3, 3, 5], 1.0);
        let y = x.dft2().unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3, 5]);
        assert!((y.to_vec()[0] - 15.0).abs() < 1e-12);
    }
}

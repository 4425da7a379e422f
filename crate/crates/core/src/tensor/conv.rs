use super::gemm::{gemm_view, View};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output row/col and kernel tap, `None` inside the zero pad.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Row length of the zero-padded input.
    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    /// Padded plane plus slack so every shifted window stays in bounds.
    fn plane(&self) -> usize {
        (self.h + 2 * self.pad) * self.wp() + self.kw - 1
    }

    /// Output positions computed at padded row length (stride 1 only).
    fn wide(&self) -> usize {
        self.ho * self.wp()
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the row.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one sample `[cin,h,w]` into a `[cin·kh·kw, ho·wo]` column matrix.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let Some(sy) = g.source(oy, ky, g.h) else {
                        dst.fill(0.0);
                        continue;
                    };
                    let src = &plane[sy * g.w..(sy + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters column gradients back onto the sample.
fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let Some(sy) = g.source(oy, ky, g.h) else { continue };
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    let dst = &mut plane[sy * g.w..(sy + 1) * g.w];
                    for (i, v) in src.iter().enumerate() {
                        dst[first + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Inner-dimension block for the unfolded product; longer blocks fall off
/// the fast path of the gemm kernel.
const K_BLOCK: usize = 64;

/// Per-sample work buffers. Stride 1 runs one product per kernel tap over
/// shifted windows of the padded input; other strides unfold with `im2col`.
struct Scratch {
    cols: Vec<f64>,
    padded: Vec<f64>,
    dpadded: Vec<f64>,
    wide: Vec<f64>,
}

impl Scratch {
    fn new(g: &Geometry, cout: usize) -> Scratch {
        if g.stride == 1 {
            Scratch {
                cols: Vec::new(),
                padded: vec![0.0; g.cin * g.plane()],
                dpadded: Vec::new(),
                wide: vec![0.0; cout * g.wide()],
            }
        } else {
            Scratch {
                cols: vec![0.0; g.patch() * g.positions()],
                padded: Vec::new(),
                dpadded: Vec::new(),
                wide: Vec::new(),
            }
        }
    }

    /// Copies the sample into the interior of `padded`; the border stays zero.
    fn pad_input(&mut self, g: &Geometry, x: &[f64]) {
        let (wp, plane) = (g.wp(), g.plane());
        for c in 0..g.cin {
            for y in 0..g.h {
                let dst = c * plane + (y + g.pad) * wp + g.pad;
                self.padded[dst..dst + g.w].copy_from_slice(&x[(c * g.h + y) * g.w..][..g.w]);
            }
        }
    }

    fn forward(&mut self, g: &Geometry, cout: usize, x: &[f64], wt: &[f64], dst: &mut [f64]) {
        let p = g.positions();
        if g.stride != 1 {
            im2col(x, g, &mut self.cols);
            let k = g.patch();
            for s in (0..k).step_by(K_BLOCK) {
                let len = K_BLOCK.min(k - s);
                let beta = if s == 0 { 0.0 } else { 1.0 };
                let wv = View { offset: s, rs: k, cs: 1 };
                gemm_view(cout, len, p, wt, wv, &self.cols, View::row_major(s * p, p), beta, dst, View::row_major(0, p));
            }
            return;
        }
        self.pad_input(g, x);
        let (wp, plane, q, taps) = (g.wp(), g.plane(), g.wide(), g.taps());
        for t in 0..taps {
            let off = (t / g.kw) * wp + t % g.kw;
            let wv = View { offset: t, rs: g.cin * taps, cs: taps };
            let xv = View { offset: off, rs: plane, cs: 1 };
            let beta = if t == 0 { 0.0 } else { 1.0 };
            gemm_view(cout, g.cin, q, wt, wv, &self.padded, xv, beta, &mut self.wide, View::row_major(0, q));
        }
        for co in 0..cout {
            for oy in 0..g.ho {
                dst[co * p + oy * g.wo..][..g.wo].copy_from_slice(&self.wide[co * q + oy * wp..][..g.wo]);
            }
        }
    }

    /// Accumulates the weight gradient into `dw` and writes the input gradient to `dx`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &mut self,
        g: &Geometry,
        cout: usize,
        x: &[f64],
        wt: &[f64],
        gs: &[f64],
        dw: Option<&mut [f64]>,
        dx: Option<&mut [f64]>,
    ) {
        let (p, k) = (g.positions(), g.patch());
        if g.stride != 1 {
            if let Some(dw) = dw {
                im2col(x, g, &mut self.cols);
                let cv = View { offset: 0, rs: 1, cs: p };
                gemm_view(cout, p, k, gs, View::row_major(0, p), &self.cols, cv, 1.0, dw, View::row_major(0, k));
            }
            if let Some(dx) = dx {
                let wv = View { offset: 0, rs: 1, cs: k };
                gemm_view(k, cout, p, wt, wv, gs, View::row_major(0, p), 0.0, &mut self.cols, View::row_major(0, p));
                col2im(&self.cols, g, dx);
            }
            return;
        }
        let (wp, plane, q, taps) = (g.wp(), g.plane(), g.wide(), g.taps());
        // gradient laid out at padded row length; the extra columns stay zero
        for co in 0..cout {
            for oy in 0..g.ho {
                self.wide[co * q + oy * wp..][..g.wo].copy_from_slice(&gs[co * p + oy * g.wo..][..g.wo]);
            }
        }
        if let Some(dw) = dw {
            self.pad_input(g, x);
            for t in 0..taps {
                let off = (t / g.kw) * wp + t % g.kw;
                let xv = View { offset: off, rs: 1, cs: plane };
                let dv = View { offset: t, rs: g.cin * taps, cs: taps };
                gemm_view(cout, q, g.cin, &self.wide, View::row_major(0, q), &self.padded, xv, 1.0, dw, dv);
            }
        }
        if let Some(dx) = dx {
            self.dpadded.clear();
            self.dpadded.resize(g.cin * plane, 0.0);
            for t in 0..taps {
                let off = (t / g.kw) * wp + t % g.kw;
                let wv = View { offset: t, rs: taps, cs: g.cin * taps };
                let dv = View { offset: off, rs: plane, cs: 1 };
                gemm_view(g.cin, cout, q, wt, wv, &self.wide, View::row_major(0, q), 1.0, &mut self.dpadded, dv);
            }
            for c in 0..g.cin {
                for y in 0..g.h {
                    let src = c * plane + (y + g.pad) * wp + g.pad;
                    dx[(c * g.h + y) * g.w..][..g.w].copy_from_slice(&self.dpadded[src..src + g.w]);
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self` is `[n,cin,h,w]`, `weight` is `[cout,cin,kh,kw]`, `bias` is `[cout]`.
    /// Samples are processed one at a time through an unfolded column matrix,
    /// so results are independent of batch composition.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
            }
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if kh > hp || kw > wp {
            return Err(Error::SpatialUnderflow {
                kernel: (kh, kw),
                padded: (hp, wp),
            });
        }
        let geo = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        };
        let mut out = vec![0.0; n * cout * geo.positions()];
        {
            let x = self.data();
            let wt = weight.data();
            let mut scratch = Scratch::new(&geo, cout);
            for s in 0..n {
                let dst = &mut out[s * cout * geo.positions()..(s + 1) * cout * geo.positions()];
                scratch.forward(&geo, cout, &x[s * cin * h * w..(s + 1) * cin * h * w], &wt, dst);
            }
            if let Some(b) = bias {
                let b = b.data();
                for (i, chunk) in out.chunks_mut(geo.positions()).enumerate() {
                    let bv = b[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![n, cout, geo.ho, geo.wo],
            out,
            parents,
            move |_, g, ps| {
                let (px, pw) = (&ps[0], &ps[1]);
                let p = geo.positions();
                let x = px.data();
                let wt = pw.data();
                let mut dx = px.requires_grad().then(|| vec![0.0; n * cin * h * w]);
                let mut dw = pw.requires_grad().then(|| vec![0.0; cout * geo.patch()]);
                let mut scratch = Scratch::new(&geo, cout);
                for s in 0..n {
                    let xs = &x[s * cin * h * w..(s + 1) * cin * h * w];
                    let gs = &g[s * cout * p..(s + 1) * cout * p];
                    let dxs = dx.as_mut().map(|d| &mut d[s * cin * h * w..(s + 1) * cin * h * w]);
                    scratch.backward(&geo, cout, xs, &wt, gs, dw.as_deref_mut(), dxs);
                }
                let mut grads = vec![dx, dw];
                if let Some(pb) = ps.get(2) {
                    grads.push(pb.requires_grad().then(|| {
                        let mut db = vec![0.0; cout];
                        for (i, chunk) in g.chunks(p).enumerate() {
                            db[i % cout] += chunk.iter().sum::<f64>();
                        }
                        db
                    }));
                }
                grads
            },
        ))
    }

    /// Correlates every plane of the last two dimensions with `taps` down the
    /// columns, then with `taps` along the rows; no padding, so each spatial
    /// extent shrinks by `taps.len() - 1`. The taps are constants.
    pub fn separable_filter(&self, taps: &[f64]) -> Result<Tensor> {
        let nd = self.ndim();
        let k = taps.len();
        if nd < 2 || k == 0 {
            return Err(Error::InvalidShape(format!(
                "separable_filter needs rank >= 2 and taps, got {:?} with {k} taps",
                self.shape()
            )));
        }
        let (h, w) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        if k > h || k > w {
            return Err(Error::SpatialUnderflow {
                kernel: (k, k),
                padded: (h, w),
            });
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let planes = self.numel() / (h * w);
        let taps = taps.to_vec();
        let mut out = vec![0.0; planes * ho * wo];
        {
            let x = self.data();
            let mut col = vec![0.0; ho * w];
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                col.fill(0.0);
                for (i, &t) in taps.iter().enumerate() {
                    for (d, s) in col.iter_mut().zip(&src[i * w..(i + ho) * w]) {
                        *d += t * s;
                    }
                }
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for y in 0..ho {
                    let row = &col[y * w..(y + 1) * w];
                    let d = &mut dst[y * wo..(y + 1) * wo];
                    for (j, &t) in taps.iter().enumerate() {
                        for (dv, s) in d.iter_mut().zip(&row[j..j + wo]) {
                            *dv += t * s;
                        }
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |_, g, _| {
            let mut dx = vec![0.0; planes * h * w];
            let mut col = vec![0.0; ho * w];
            for p in 0..planes {
                let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                col.fill(0.0);
                for y in 0..ho {
                    let row = &mut col[y * w..(y + 1) * w];
                    for (j, &t) in taps.iter().enumerate() {
                        for (d, gv) in row[j..j + wo].iter_mut().zip(&gp[y * wo..(y + 1) * wo]) {
                            *d += t * gv;
                        }
                    }
                }
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (i, &t) in taps.iter().enumerate() {
                    for (d, c) in dst[i * w..(i + ho) * w].iter_mut().zip(&col) {
                        *d += t * c;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Nearest-neighbour upsampling of the last two dimensions of `[n,c,h,w]`.
    pub fn upsample_nearest(&self, scale: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "upsample_nearest expects [n,c,h,w], got {s:?}"
            )));
        }
        if scale == 0 {
            return Err(Error::InvalidShape("upsample scale must be >= 1".into()));
        }
        let planes = s[0] * s[1];
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * scale, w * scale);
        let mut out = Vec::with_capacity(planes * ho * wo);
        {
            let x = self.data();
            for pl in 0..planes {
                let src = &x[pl * h * w..(pl + 1) * h * w];
                for oy in 0..ho {
                    let row = &src[(oy / scale) * w..(oy / scale + 1) * w];
                    out.extend((0..wo).map(|ox| row[ox / scale]));
                }
            }
        }
        Ok(Tensor::from_op(
            vec![s[0], s[1], ho, wo],
            out,
            vec![self.clone()],
            move |_, g, _| {
                let mut dx = vec![0.0; planes * h * w];
                for pl in 0..planes {
                    let gp = &g[pl * ho * wo..(pl + 1) * ho * wo];
                    let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[(oy / scale) * w + ox / scale] += gp[oy * wo + ox];
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }
}

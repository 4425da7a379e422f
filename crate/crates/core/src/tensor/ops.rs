use super::gemm::gemm;
use super::{numel_of, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Slope for negative inputs, in (0, 1).
    LeakyRelu(f64),
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let lead = n - s.len();
        if i < lead {
            1
        } else {
            s[i - lead]
        }
    };
    (0..n)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out` (trailing alignment, 0 on broadcast dims).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + lead] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Flat offset into a strided operand for every element of `out`, row-major.
fn strided_offsets(out: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel_of(out);
    let mut offsets = Vec::with_capacity(total);
    if out.is_empty() {
        offsets.push(0);
        return offsets;
    }
    let nd = out.len();
    let inner = out[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut index = vec![0usize; nd];
    let mut base = 0usize;
    while offsets.len() < total {
        for j in 0..inner {
            offsets.push(base + j * inner_stride);
        }
        // advance the outer multi-index
        let mut d = nd - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            index[d] += 1;
            base += strides[d];
            if index[d] < out[d] {
                break;
            }
            base -= strides[d] * out[d];
            index[d] = 0;
        }
    }
    offsets
}

fn scatter_sum(g: &[f64], offsets: &[usize], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for (gv, &o) in g.iter().zip(offsets) {
        acc[o] += gv;
    }
    acc
}

impl Tensor {
    pub fn elementwise(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(op, self.shape(), other.shape()))?;
        if kind == BinaryKind::Div {
            if let Some(index) = other.data().iter().position(|&v| v == 0.0) {
                return Err(Error::DivisionByZero { index });
            }
        }
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let same = self.shape() == other.shape();
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            if same {
                a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let ia = strided_offsets(&out_shape, &aligned_strides(self.shape(), &out_shape));
                let ib = strided_offsets(&out_shape, &aligned_strides(other.shape(), &out_shape));
                ia.iter().zip(&ib).map(|(&i, &j)| f(a[i], b[j])).collect()
            }
        };
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            move |_, g, parents| {
                let (pa, pb) = (&parents[0], &parents[1]);
                let (a, b) = (pa.data(), pb.data());
                let (ia, ib) = if same {
                    (None, None)
                } else {
                    (
                        Some(strided_offsets(&grad_shape, &aligned_strides(pa.shape(), &grad_shape))),
                        Some(strided_offsets(&grad_shape, &aligned_strides(pb.shape(), &grad_shape))),
                    )
                };
                let at = |o: usize, v: &[f64], idx: &Option<Vec<usize>>| match idx {
                    Some(ix) => v[ix[o]],
                    None => v[o],
                };
                // local partials, indexed by output position
                let da: Box<dyn Fn(usize) -> f64> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => Box::new(|o| g[o]),
                    BinaryKind::Mul => Box::new(|o| g[o] * at(o, &b, &ib)),
                    BinaryKind::Div => Box::new(|o| g[o] / at(o, &b, &ib)),
                };
                let db: Box<dyn Fn(usize) -> f64> = match kind {
                    BinaryKind::Add => Box::new(|o| g[o]),
                    BinaryKind::Sub => Box::new(|o| -g[o]),
                    BinaryKind::Mul => Box::new(|o| g[o] * at(o, &a, &ia)),
                    BinaryKind::Div => Box::new(|o| {
                        let bv = at(o, &b, &ib);
                        -g[o] * at(o, &a, &ia) / (bv * bv)
                    }),
                };
                let reduce = |want: bool, d: &dyn Fn(usize) -> f64, idx: &Option<Vec<usize>>, len| {
                    want.then(|| {
                        let local: Vec<f64> = (0..g.len()).map(d).collect();
                        match idx {
                            Some(ix) => scatter_sum(&local, ix, len),
                            None => local,
                        }
                    })
                };
                vec![
                    reduce(pa.requires_grad(), &*da, &ia, a.len()),
                    reduce(pb.requires_grad(), &*db, &ib, b.len()),
                ]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryKind::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` is the local derivative given input
    /// `x` and output `y`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |out, g, p| {
            let x = p[0].data();
            vec![Some(
                x.iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect(),
            )]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// |x| with subgradient +1 at zero.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        match kind {
            Activation::Relu => self.unary(
                |x| if x > 0.0 { x } else { 0.0 },
                |x, _| if x >= 0.0 { 1.0 } else { 0.0 },
            ),
            Activation::LeakyRelu(slope) => self.unary(
                move |x| if x >= 0.0 { x } else { slope * x },
                move |x, _| if x >= 0.0 { 1.0 } else { slope },
            ),
            Activation::Sigmoid => self.unary(
                |x| {
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                },
                |_, y| y * (1.0 - y),
            ),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.activation(Activation::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.activation(Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.activation(Activation::Sigmoid)
    }

    /// Reduces over `axes` (`None` = all), dropping the reduced dimensions.
    pub fn reduce(&self, kind: ReduceKind, axes: Option<&[usize]>) -> Result<Tensor> {
        let nd = self.ndim();
        let mut reduced = vec![false; nd];
        match axes {
            None => reduced.iter_mut().for_each(|r| *r = true),
            Some(list) => {
                for &ax in list {
                    if ax >= nd {
                        return Err(Error::InvalidAxis { axis: ax, ndim: nd });
                    }
                    reduced[ax] = true;
                }
            }
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = in_shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        // strides of the output viewed over the input index space
        let mut strides = vec![0; nd];
        let mut acc = 1;
        for i in (0..nd).rev() {
            if !reduced[i] {
                strides[i] = acc;
                acc *= in_shape[i];
            }
        }
        let count = (numel_of(&in_shape) / numel_of(&out_shape)) as f64;
        let scale = match kind {
            ReduceKind::Sum => 1.0,
            ReduceKind::Mean => 1.0 / count,
        };
        let offsets = strided_offsets(&in_shape, &strides);
        let mut data = scatter_sum(&self.data(), &offsets, numel_of(&out_shape));
        if scale != 1.0 {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |_, g, _| {
            vec![Some(offsets.iter().map(|&o| g[o] * scale).collect())]
        }))
    }

    pub fn sum(&self) -> Tensor {
        self.reduce(ReduceKind::Sum, None).expect("full reduction is always valid")
    }

    pub fn mean(&self) -> Tensor {
        self.reduce(ReduceKind::Mean, None).expect("full reduction is always valid")
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, Some(axes))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, Some(axes))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |_, g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::InvalidShape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let batch = self.numel() / (r * c);
        let permute = move |src: &[f64], rows: usize, cols: usize| {
            let mut dst = vec![0.0; src.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        dst[off + j * rows + i] = src[off + i * cols + j];
                    }
                }
            }
            dst
        };
        let mut shape = self.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let data = permute(&self.data(), r, c);
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |_, g, _| {
            vec![Some(permute(g, c, r))]
        }))
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let err = || Error::shape("matmul", sa, sb);
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..],
                    false,
                    &b[i * k * n..],
                    false,
                    0.0,
                    &mut out[i * m * n..],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Tensor::from_op(shape, out, vec![self.clone(), other.clone()], move |_, g, p| {
            let (a, b) = (p[0].data(), p[1].data());
            let da = p[0].requires_grad().then(|| {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    // da = g · bᵀ
                    gemm(m, n, k, &g[i * m * n..], false, &b[i * k * n..], true, 0.0, &mut da[i * m * k..]);
                }
                da
            });
            let db = p[1].requires_grad().then(|| {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    // db = aᵀ · g
                    gemm(k, m, n, &a[i * m * k..], true, &g[i * m * n..], false, 0.0, &mut db[i * k * n..]);
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::InvalidAxis { axis, ndim: nd });
        }
        for p in parts {
            let ok = p.ndim() == nd
                && (0..nd).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (v, &w) in views.iter().zip(&widths) {
                    data.extend_from_slice(&v[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let parents = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(shape, data, parents, move |_, g, ps| {
            let mut start = 0;
            widths
                .iter()
                .zip(ps)
                .map(|(&w, p)| {
                    let s = start;
                    start += w;
                    p.requires_grad().then(|| {
                        let mut pg = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            pg.extend_from_slice(&g[o * row + s..o * row + s + w]);
                        }
                        pg
                    })
                })
                .collect()
        }))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let nd = self.ndim();
        if axis >= nd {
            return Err(Error::InvalidAxis { axis, ndim: nd });
        }
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::InvalidShape(format!(
                "narrow {start}..{} out of range for extent {extent}",
                start + len
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let (row, width, offset) = (extent * inner, len * inner, start * inner);
        let mut data = Vec::with_capacity(outer * width);
        {
            let src = self.data();
            for o in 0..outer {
                data.extend_from_slice(&src[o * row + offset..o * row + offset + width]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |_, g, _| {
            let mut pg = vec![0.0; outer * row];
            for o in 0..outer {
                pg[o * row + offset..o * row + offset + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(pg)]
        }))
    }

    /// Mirror-pads the last two dimensions without repeating the edge sample.
    pub fn pad_reflect(&self, pad: usize) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::InvalidShape("pad_reflect needs rank >= 2".into()));
        }
        let (h, w) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        if pad >= h || pad >= w {
            return Err(Error::InvalidShape(format!(
                "reflect pad {pad} needs spatial extent > {pad}, got {h}x{w}"
            )));
        }
        if pad == 0 {
            return self.reshape(self.shape());
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            r as usize
        };
        let planes = self.numel() / (h * w);
        let mut src_index = Vec::with_capacity(ph * pw);
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - pad as isize, w);
                src_index.push(sy * w + sx);
            }
        }
        let mut data = Vec::with_capacity(planes * ph * pw);
        {
            let src = self.data();
            for p in 0..planes {
                let plane = &src[p * h * w..(p + 1) * h * w];
                data.extend(src_index.iter().map(|&i| plane[i]));
            }
        }
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = ph;
        shape[nd - 1] = pw;
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |_, g, _| {
            let mut pg = vec![0.0; planes * h * w];
            for p in 0..planes {
                let gp = &g[p * ph * pw..(p + 1) * ph * pw];
                let dst = &mut pg[p * h * w..(p + 1) * h * w];
                for (gv, &i) in gp.iter().zip(&src_index) {
                    dst[i] += gv;
                }
            }
            vec![Some(pg)]
        }))
    }
}

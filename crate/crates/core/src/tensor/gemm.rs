/// A strided matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(offset: usize, cols: usize) -> View {
        View { offset, rs: cols, cs: 1 }
    }

    /// One past the last element touched by a `rows`×`cols` matrix.
    fn end(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// `c = a·b + beta·c` for strided views, `a` m×k, `b` k×n, `c` m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.end(m, n) <= c.len());
    if k > 0 {
        assert!(av.end(m, k) <= a.len() && bv.end(k, n) <= b.len());
    }
    // SAFETY: every index the kernel touches lies below the asserted ends.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `c = op(a)·op(b) + beta·c` on row-major buffers, with `op(a)` of logical
/// shape m×k and `op(b)` k×n. A transposed operand is stored in the opposite
/// orientation (k×m for `a`, n×k for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = if trans_a { View { offset: 0, rs: 1, cs: m } } else { View::row_major(0, k) };
    let bv = if trans_b { View { offset: 0, rs: 1, cs: k } } else { View::row_major(0, n) };
    gemm_view(m, k, n, a, av, b, bv, beta, c, View::row_major(0, n));
}

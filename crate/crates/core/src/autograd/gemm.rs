//! Strided GEMM entry point shared by every matrix-shaped op.

/// Strided view into a row-major buffer: element `(i, j)` lives at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    pub fn transposed(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C <- alpha * A * B + beta * C` where `A` is `m x k`, `B` is `k x n`,
/// `C` is `m x n` with row/column strides `(rsc, csc)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    assert!(span(m, k, a.rs, a.cs) <= a.data.len(), "gemm: A out of bounds");
    assert!(span(k, n, b.rs, b.cs) <= b.data.len(), "gemm: B out of bounds");
    assert!(span(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc + j * csc;
                c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches
    // inside the three slices, and `c` is borrowed mutably and exclusively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `alpha * A * B` into a fresh `m x n` buffer laid out with strides
/// `(rsc, csc)`, which must tile it exactly. The kernel never reads `C` when
/// `beta` is zero, so the buffer skips the zero fill.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    rsc: usize,
    csc: usize,
) -> Vec<f64> {
    let len = m * n;
    assert!(
        (rsc, csc) == (n, 1) || (rsc, csc) == (1, m),
        "gemm_new: strides must tile the output"
    );
    if k == 0 || len == 0 {
        return vec![0.0; len];
    }
    assert!(span(m, k, a.rs, a.cs) <= a.data.len(), "gemm: A out of bounds");
    assert!(span(k, n, b.rs, b.cs) <= b.data.len(), "gemm: B out of bounds");
    let mut out = Vec::with_capacity(len);
    // SAFETY: A and B are bounds-checked above; the strides tile exactly
    // `len` slots of capacity, every one of which the kernel writes because
    // beta is zero, after which the length can be set.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            0.0,
            out.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
        out.set_len(len);
    }
    out
}

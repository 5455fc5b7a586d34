/// Row-major matrix view: base slice, row stride, column stride.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn dense(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Same storage, read transposed.
    pub fn t(self) -> Self {
        MatRef {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn at(self, offset: usize) -> Self {
        MatRef {
            offset: self.offset + offset,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` over arbitrary strided views.
///
/// `c` is dense row-major starting at `c_offset` with row stride `c_rs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_rs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_offset + (m - 1) * c_rs + n <= c.len(), "output view out of bounds");
    // SAFETY: every view was bounds-checked above for the extents dgemm reads
    // or writes, and `c` is exclusively borrowed for the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_rs as isize,
            1,
        );
    }
}

/// Dense product of row-major `a[m×k]` and `b[k×n]` into `out[m×n]` (overwritten).
pub fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    gemm(
        m,
        k,
        n,
        MatRef::dense(a, k),
        MatRef::dense(b, n),
        0.0,
        out,
        0,
        n,
    );
}

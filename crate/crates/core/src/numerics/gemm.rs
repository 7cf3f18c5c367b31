//! Thin safe wrapper over `matrixmultiply::dgemm` for row-major buffers.

/// A row-major operand, optionally read transposed. `ld` is the length of a
/// stored row.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    transposed: bool,
    ld: usize,
}

impl<'a> Mat<'a> {
    pub(crate) fn new(data: &'a [f64], transposed: bool, ld: usize) -> Self {
        Mat {
            data,
            transposed,
            ld,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }
}

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f64], accumulate: bool) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index dgemm touches given the
    // strides derived from `ld`, which callers set to the stored row length.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

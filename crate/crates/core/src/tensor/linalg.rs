use crate::error::{shape_err, Result};

use super::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major slices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. Transposed operands are read
/// in place through their strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.rows(), a.cols());
    if b.rows() != k {
        return shape_err(format!("matmul: inner dimensions {:?} x {:?}", a.shape(), b.shape()));
    }
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

/// `a * b^T`, the Gram product used for descriptor similarity matrices.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul_transposed lhs")?;
    b.expect_rank(2, "matmul_transposed rhs")?;
    if a.cols() != b.cols() {
        return shape_err(format!(
            "matmul_transposed: column counts {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), true, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

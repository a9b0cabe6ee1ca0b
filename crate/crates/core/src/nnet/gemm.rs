/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols as isize, col: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols as isize }
    }
}

/// `c (m x n, row-major) = beta * c + a (m x k) * b (k x n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: Strides, b: &[f64], sb: Strides, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index reachable through the
    // given strides, which describe dense m x k, k x n and m x n layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = alloc::vec![1.0; m * n];
        gemm(m, k, n, &a, Strides::row_major(k), &b, Strides::row_major(n), 1.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = 1.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a^T (k x m) * c (m x n)
        let mut d = alloc::vec![0.0; k * n];
        gemm(k, m, n, &a, Strides::transposed(k), &c, Strides::row_major(n), 0.0, &mut d);
        for i in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|p| a[p * k + i] * c[p * n + j]).sum();
                assert!((d[i * n + j] - want).abs() < 1e-10);
            }
        }
    }
}

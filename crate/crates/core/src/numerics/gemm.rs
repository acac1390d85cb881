//! Thin safe wrapper over `matrixmultiply::dgemm` for row-major buffers with
//! optional transposition of either operand.

/// Strides of a logical `[rows, cols]` view, in elements.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub rs: isize,
    pub cs: isize,
}

impl View {
    /// Row-major buffer with `cols_stored` columns, optionally read transposed.
    pub fn rm(cols_stored: usize, transposed: bool) -> Self {
        if transposed {
            View {
                rs: 1,
                cs: cols_stored as isize,
            }
        } else {
            View {
                rs: cols_stored as isize,
                cs: 1,
            }
        }
    }

    pub fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn strided(rs: usize, cs: usize) -> Self {
        View {
            rs: rs as isize,
            cs: cs as isize,
        }
    }
}

/// `c = beta * c + a · b` where `a` is `[m, k]`, `b` is `[k, n]` and `c` is `[m, n]`,
/// all described by strided views starting at the given slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    assert!(span(m, k, av) <= a.len(), "gemm: lhs view out of bounds");
    assert!(span(k, n, bv) <= b.len(), "gemm: rhs view out of bounds");
    assert!(span(m, n, cv) <= c.len(), "gemm: output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i as isize * cv.rs + j as isize * cv.cs;
                c[idx as usize] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

fn span(rows: usize, cols: usize, v: View) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * v.rs + (cols - 1) as isize * v.cs) as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, View::rm(k, false), &b, View::rm(n, false), 0.0, &mut c, View::rm(n, false));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored transposed as [k, m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, View::rm(m, true), &b, View::rm(n, false), 0.0, &mut c2, View::rm(n, false));
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

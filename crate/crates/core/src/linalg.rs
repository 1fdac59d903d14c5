//! Dense symmetric positive definite solves.

const BLOCK: usize = 64;

/// Lower Cholesky factor of a row-major SPD matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

/// `C[m x n] += alpha * A[m x k] * B[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass pointers and strides that stay inside their buffers.
    unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc) }
}

impl Cholesky {
    /// Factors `a` in place. On failure returns the first non-positive pivot.
    pub fn factor(mut a: Vec<f64>, n: usize) -> std::result::Result<Self, usize> {
        assert_eq!(a.len(), n * n);
        let mut k0 = 0;
        while k0 < n {
            let kb = BLOCK.min(n - k0);
            let k1 = k0 + kb;
            for j in k0..k1 {
                let mut d = a[j * n + j];
                for p in k0..j {
                    d -= a[j * n + p] * a[j * n + p];
                }
                if !(d > 0.0) || !d.is_finite() {
                    return Err(j);
                }
                let d = d.sqrt();
                a[j * n + j] = d;
                for i in j + 1..n {
                    let mut s = a[i * n + j];
                    for p in k0..j {
                        s -= a[i * n + p] * a[j * n + p];
                    }
                    a[i * n + j] = s / d;
                }
            }
            let mut ib = k1;
            while ib < n {
                let ibn = BLOCK.min(n - ib);
                let cols = ib + ibn - k1;
                let ptr = a.as_mut_ptr();
                gemm(
                    ibn,
                    kb,
                    cols,
                    -1.0,
                    unsafe { ptr.add(ib * n + k0) },
                    n as isize,
                    1,
                    unsafe { ptr.add(k1 * n + k0) },
                    1,
                    n as isize,
                    unsafe { ptr.add(ib * n + k1) },
                    n as isize,
                    1,
                );
                ib += ibn;
            }
            k0 = k1;
        }
        for i in 0..n {
            for j in i + 1..n {
                a[i * n + j] = 0.0;
            }
        }
        Ok(Cholesky { n, l: a })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn factor_data(&self) -> &[f64] {
        &self.l
    }

    /// Solves `A X = B` for `B` stored row-major with `nrhs` columns.
    pub fn solve_in_place(&self, b: &mut [f64], nrhs: usize) {
        let n = self.n;
        assert_eq!(b.len(), n * nrhs);
        let l = &self.l;
        let mut k0 = 0;
        while k0 < n {
            let kb = BLOCK.min(n - k0);
            let bp = b.as_mut_ptr();
            gemm(
                kb,
                k0,
                nrhs,
                -1.0,
                unsafe { l.as_ptr().add(k0 * n) },
                n as isize,
                1,
                bp,
                nrhs as isize,
                1,
                unsafe { bp.add(k0 * nrhs) },
                nrhs as isize,
                1,
            );
            for i in k0..k0 + kb {
                for j in k0..i {
                    let lij = l[i * n + j];
                    if lij != 0.0 {
                        let (head, tail) = b.split_at_mut(i * nrhs);
                        let src = &head[j * nrhs..(j + 1) * nrhs];
                        for (t, s) in tail[..nrhs].iter_mut().zip(src) {
                            *t -= lij * s;
                        }
                    }
                }
                let d = l[i * n + i];
                b[i * nrhs..(i + 1) * nrhs].iter_mut().for_each(|v| *v /= d);
            }
            k0 += kb;
        }
        let mut k1 = n;
        while k1 > 0 {
            let kb = BLOCK.min(k1);
            let k0 = k1 - kb;
            let bp = b.as_mut_ptr();
            gemm(
                kb,
                n - k1,
                nrhs,
                -1.0,
                unsafe { l.as_ptr().add((k1.min(n - 1)) * n + k0) },
                1,
                n as isize,
                unsafe { bp.add(k1.min(n - 1) * nrhs) },
                nrhs as isize,
                1,
                unsafe { bp.add(k0 * nrhs) },
                nrhs as isize,
                1,
            );
            for i in (k0..k1).rev() {
                for j in i + 1..k1 {
                    let lji = l[j * n + i];
                    if lji != 0.0 {
                        let (head, tail) = b.split_at_mut(j * nrhs);
                        let src = &tail[..nrhs];
                        for (t, s) in head[i * nrhs..(i + 1) * nrhs].iter_mut().zip(src) {
                            *t -= lji * s;
                        }
                    }
                }
                let d = l[i * n + i];
                b[i * nrhs..(i + 1) * nrhs].iter_mut().for_each(|v| *v /= d);
            }
            k1 = k0;
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x, 1);
        x
    }
}

/// `C = A * B` for row-major `A[m x k]`, `B[k x n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, c.as_mut_ptr(), n as isize, 1);
    c
}

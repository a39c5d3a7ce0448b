//! Raw slice kernels. Matrix products go through `matrixmultiply`, which is
//! single-threaded and picks one fixed kernel per machine, so results are
//! bit-reproducible on a given host.

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the assertion covers every element addressed by these strides.
    unsafe { gemm_acc(m, k, n, a.as_ptr(), (k, 1), b.as_ptr(), (n, 1), out.as_mut_ptr()) }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(g.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    // SAFETY: as above; `b` is read as its transpose through swapped strides.
    unsafe { gemm_acc(m, n, k, g.as_ptr(), (n, 1), b.as_ptr(), (1, n), out.as_mut_ptr()) }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && g.len() >= m * n && out.len() >= k * n);
    // SAFETY: as above; `a` is read as its transpose through swapped strides.
    unsafe { gemm_acc(k, m, n, a.as_ptr(), (1, k), g.as_ptr(), (n, 1), out.as_mut_ptr()) }
}

/// `c[m x n] += a[m x k] * b[k x n]` with `(row, col)` strides for `a`, `b`
/// and a dense row-major `c`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    (rsa, csa): (usize, usize),
    b: *const f64,
    (rsb, csb): (usize, usize),
    c: *mut f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        1.0,
        c,
        n as isize,
        1,
    );
}

/// Dot product with four interleaved accumulators (fixed reduction order).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

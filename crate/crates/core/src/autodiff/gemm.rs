//! Small dense matrix-product kernels used by the tape.
//!
//! Products go through `matrixmultiply`. Output rows are cut into fixed
//! blocks, so parallel execution writes disjoint slices and the result does
//! not depend on the worker count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;
const ROW_BLOCK: usize = 256;

/// `out[n, m] = op(a) * op(b)` where `op` optionally transposes.
///
/// `a` is stored `[n, k]` (or `[k, n]` when `ta`), `b` is `[k, m]`
/// (or `[m, k]` when `tb`).
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    n: usize,
    k: usize,
    m: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    gemm_into(&mut out, a, b, n, k, m, ta, tb);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    n: usize,
    k: usize,
    m: usize,
    ta: bool,
    tb: bool,
) {
    assert_eq!(out.len(), n * m);
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), k * m);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    // Element strides of op(a) and op(b) as row-major [n, k] and [k, m].
    let (rsa, csa) = if ta { (1, n) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (m, 1) };
    // Rows are split into fixed blocks, so the partition (and with it every
    // summation order) is the same for any worker count.
    let block = |r0: usize, dst: &mut [f64]| {
        let rows = dst.len() / m;
        // SAFETY: every pointer/stride pair addresses only in-bounds elements:
        // rows r0..r0+rows of op(a), all of op(b), and `dst` as [rows, m].
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                m,
                1.0,
                a.as_ptr().add(r0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                dst.as_mut_ptr(),
                m as isize,
                1,
            );
        }
    };
    if n * k * m >= PAR_THRESHOLD && n > ROW_BLOCK && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(ROW_BLOCK * m).enumerate().for_each(|(i, dst)| block(i * ROW_BLOCK, dst));
    } else {
        out.chunks_mut(ROW_BLOCK * m).enumerate().for_each(|(i, dst)| block(i * ROW_BLOCK, dst));
    }
}

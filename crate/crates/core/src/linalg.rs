use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

// Fixed chunking keeps results independent of the thread count.
const ROW_CHUNK: usize = 256;

/// `a · b`, parallel over fixed row blocks of `a`.
pub(crate) fn matmul<F: crate::Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    let (m, k) = a.dim();
    debug_assert_eq!(k, b.nrows());
    if m <= ROW_CHUNK {
        return a.dot(&b);
    }
    let mut out = Array2::<F>::zeros((m, b.ncols()));
    out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .into_par_iter()
        .enumerate()
        .for_each(|(c, mut block)| {
            let start = c * ROW_CHUNK;
            let rows = block.nrows();
            block.assign(&a.slice(s![start..start + rows, ..]).dot(&b));
        });
    out
}

/// `aᵀ · b` where both operands share the (long) row axis; parallel over
/// fixed column blocks of `a` so the row reduction order never changes.
pub(crate) fn matmul_tn<F: crate::Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let at = a.t();
    let m = at.nrows();
    if m <= 64 {
        return at.dot(&b);
    }
    let mut out = Array2::<F>::zeros((m, b.ncols()));
    out.axis_chunks_iter_mut(Axis(0), 64)
        .into_par_iter()
        .enumerate()
        .for_each(|(c, mut block)| {
            let start = c * 64;
            let rows = block.nrows();
            block.assign(&at.slice(s![start..start + rows, ..]).dot(&b));
        });
    out
}

/// Column sums as a `1 × n` row.
pub(crate) fn col_sums<F: crate::Real>(x: ArrayView2<'_, F>) -> Array2<F> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

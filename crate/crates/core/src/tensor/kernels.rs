//! Row-major GEMM kernels. All of them accumulate into `out`.

use super::Real;

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&aip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if aip == F::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o = *o + dot(a_row, b_row);
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&api, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if api == F::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + api * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [F::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(F::zero(), |t, (&x, &y)| t + x * y);
    for (x, y) in ac.zip(bc) {
        acc[0] = acc[0] + x[0] * y[0];
        acc[1] = acc[1] + x[1] * y[1];
        acc[2] = acc[2] + x[2] * y[2];
        acc[3] = acc[3] + x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

use super::Scalar;

/// `C[m,n] (+)= op(A)[m,k] · op(B)[k,n]` on row-major buffers.
///
/// `a` is stored as `[m,k]`, or `[k,m]` when `trans_a`; likewise `b` is
/// `[k,n]` or `[n,k]`. Transposed operands are materialized so the inner
/// loop always streams contiguous rows of `b` and `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    let a_buf;
    let a = if trans_a {
        a_buf = transpose(a, k, m);
        &a_buf[..]
    } else {
        a
    };
    let b_buf;
    let b = if trans_b {
        b_buf = transpose(b, n, k);
        &b_buf[..]
    } else {
        b
    };
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// Transpose a row-major `[rows, cols]` buffer into `[cols, rows]`.
pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

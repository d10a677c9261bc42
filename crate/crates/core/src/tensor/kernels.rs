//! Raw loops behind the graph primitives. Slices in, slices out; shape
//! checking happens in the graph layer.

use super::Scalar;

/// `c[m x n] = a[m x k] * b[k x n]`
pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `da[m x k] += dc[m x n] * b^T`
pub(crate) fn matmul_grad_a<F: Scalar>(
    dc: &[F],
    b: &[F],
    da: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&g, &bv) in dc_row.iter().zip(b_row) {
                acc += g * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db[k x n] += a^T * dc[m x n]`
pub(crate) fn matmul_grad_b<F: Scalar>(
    a: &[F],
    dc: &[F],
    db: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &g) in db_row.iter_mut().zip(dc_row) {
                *d += av * g;
            }
        }
    }
}

/// Valid output range `[lo, hi)` for a tap at offset `off` over length `t`.
#[inline]
fn tap_range(off: isize, t: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (t as isize - off).clamp(0, t as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub t: usize,
    pub pad_left: usize,
}

/// `out[o][t] = b[o] + sum_i sum_j w[o][i][j] * x[i][t + j - pad_left]`,
/// zero outside the input.
pub(crate) fn conv1d<F: Scalar>(x: &[F], w: &[F], b: &[F], d: &ConvDims) -> Vec<F> {
    let mut out = vec![F::zero(); d.c_out * d.t];
    for o in 0..d.c_out {
        let out_row = &mut out[o * d.t..(o + 1) * d.t];
        out_row.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..d.c_in {
            let x_row = &x[i * d.t..(i + 1) * d.t];
            for j in 0..d.k {
                let wv = w[(o * d.c_in + i) * d.k + j];
                let off = j as isize - d.pad_left as isize;
                let (lo, hi) = tap_range(off, d.t);
                let src = &x_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                for (ov, &xv) in out_row[lo..hi].iter_mut().zip(src) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<'a, F> {
    pub dx: Option<&'a mut [F]>,
    pub dw: Option<&'a mut [F]>,
    pub db: Option<&'a mut [F]>,
}

pub(crate) fn conv1d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dout: &[F],
    d: &ConvDims,
    mut grads: ConvGrads<'_, F>,
) {
    for o in 0..d.c_out {
        let g_row = &dout[o * d.t..(o + 1) * d.t];
        if let Some(db) = grads.db.as_deref_mut() {
            db[o] += g_row.iter().copied().sum::<F>();
        }
        for i in 0..d.c_in {
            for j in 0..d.k {
                let widx = (o * d.c_in + i) * d.k + j;
                let off = j as isize - d.pad_left as isize;
                let (lo, hi) = tap_range(off, d.t);
                if lo >= hi {
                    continue;
                }
                let src_lo = (lo as isize + off) as usize;
                let src_hi = (hi as isize + off) as usize;
                if let Some(dw) = grads.dw.as_deref_mut() {
                    let x_row = &x[i * d.t..(i + 1) * d.t];
                    let mut acc = F::zero();
                    for (&g, &xv) in g_row[lo..hi].iter().zip(&x_row[src_lo..src_hi]) {
                        acc += g * xv;
                    }
                    dw[widx] += acc;
                }
                if let Some(dx) = grads.dx.as_deref_mut() {
                    let wv = w[widx];
                    let dx_row = &mut dx[i * d.t..(i + 1) * d.t];
                    for (dv, &g) in dx_row[src_lo..src_hi].iter_mut().zip(&g_row[lo..hi]) {
                        *dv += wv * g;
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Every 1-D lane along `axis` as `(lane index, first flat position)`;
/// consecutive lane elements are `stride` apart.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (impl Iterator<Item = (usize, usize)>, usize, usize) {
    let (outer, n, inner) = axis_split(shape, axis);
    let it = (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * inner + i, o * n * inner + i)));
    (it, n, inner)
}

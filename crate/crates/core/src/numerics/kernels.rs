//! Raw loops over flat row-major buffers. Everything here accumulates into
//! `out`; callers zero it first when they need a fresh result.

/// out[p×r] += a[p×q] · b[q×r]
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// out[p×q] += g[p×r] · b[q×r]ᵀ
pub(crate) fn gemm_bt(g: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    // row-broadcast form vectorizes where per-entry dot products do not
    let mut bt = vec![0.0; q * r];
    for k in 0..q {
        for j in 0..r {
            bt[j * q + k] = b[k * r + j];
        }
    }
    gemm(g, &bt, out, p, r, q);
}

/// out[q×r] += a[p×q]ᵀ · g[p×r]
pub(crate) fn gemm_at(a: &[f64], g: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let grow = &g[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &gij) in orow.iter_mut().zip(grow) {
                *o += aik * gij;
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into axis order `perm`, returning the new buffer.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source buffer for each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = permute(&src, &[2, 3], &[1, 0]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_round_trips_rank3() {
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let out = permute(&src, &[2, 3, 4], &perm);
        let back = permute(&out, &[4, 2, 3], &inverse_perm(&perm));
        assert_eq!(back, src);
        // element [1,2,3] of the source lands at [3,1,2]
        assert_eq!(out[3 * 6 + 1 * 3 + 2], src[1 * 12 + 2 * 4 + 3]);
    }
}

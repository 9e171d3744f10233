//! Raw slice kernels behind the graph operations.
//!
//! Everything here works on row-major buffers with explicit dimensions.
//! Reduction order is fixed so results are bit-reproducible.

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            out[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Source row of window slot `r` around anchor `i`, if it lies in `[0, len)`.
#[inline]
pub fn window_source(i: usize, r: usize, k: usize, len: usize) -> Option<usize> {
    let pos = (i + r).checked_sub(k / 2)?;
    (pos < len).then_some(pos)
}

/// Centered sliding windows: `[L×F] -> [L×K×F]`, out-of-range rows zero.
pub fn unfold1d(x: &[f64], len: usize, feat: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * k * feat];
    for i in 0..len {
        for r in 0..k {
            if let Some(src) = window_source(i, r, k, len) {
                let dst = (i * k + r) * feat;
                out[dst..dst + feat].copy_from_slice(&x[src * feat..(src + 1) * feat]);
            }
        }
    }
    out
}

/// Adjoint of [`unfold1d`]: `[L×K×F] -> [L×F]`, summing window rows back
/// onto the positions they cover. Anchors are visited in ascending order.
pub fn fold1d(y: &[f64], len: usize, feat: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * feat];
    for u in 0..len {
        for j in 0..k {
            if let Some(dst) = window_source(u, j, k, len) {
                let src = (u * k + j) * feat;
                for (o, v) in out[dst * feat..(dst + 1) * feat]
                    .iter_mut()
                    .zip(&y[src..src + feat])
                {
                    *o += v;
                }
            }
        }
    }
    out
}

/// Valid-mode windows of `width` rows: `[N×C] -> [(N-width+1)×width×C]`.
pub fn frames(x: &[f64], rows: usize, cols: usize, width: usize) -> Vec<f64> {
    let count = rows + 1 - width;
    let mut out = Vec::with_capacity(count * width * cols);
    for i in 0..count {
        out.extend_from_slice(&x[i * cols..(i + width) * cols]);
    }
    out
}

/// Adjoint of [`frames`].
pub fn frames_adjoint(y: &[f64], rows: usize, cols: usize, width: usize) -> Vec<f64> {
    let count = rows + 1 - width;
    let mut out = vec![0.0; rows * cols];
    for i in 0..count {
        let src = &y[i * width * cols..(i + 1) * width * cols];
        for (o, v) in out[i * cols..(i + width) * cols].iter_mut().zip(src) {
            *o += v;
        }
    }
    out
}

/// Half-open bin `[floor(i·Lin/Lout), ceil((i+1)·Lin/Lout))`.
#[inline]
pub fn pool_bin(i: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let start = i * len_in / len_out;
    let end = ((i + 1) * len_in).div_ceil(len_out);
    (start, end)
}

pub fn adaptive_avg_pool1d(x: &[f64], len_in: usize, feat: usize, len_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; len_out * feat];
    for i in 0..len_out {
        let (start, end) = pool_bin(i, len_in, len_out);
        let scale = 1.0 / (end - start) as f64;
        let dst = &mut out[i * feat..(i + 1) * feat];
        for row in start..end {
            for (o, v) in dst.iter_mut().zip(&x[row * feat..(row + 1) * feat]) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|o| *o *= scale);
    }
    out
}

pub fn adaptive_avg_pool1d_adjoint(
    dy: &[f64],
    len_in: usize,
    feat: usize,
    len_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; len_in * feat];
    for i in 0..len_out {
        let (start, end) = pool_bin(i, len_in, len_out);
        let scale = 1.0 / (end - start) as f64;
        let src = &dy[i * feat..(i + 1) * feat];
        for row in start..end {
            for (o, v) in out[row * feat..(row + 1) * feat].iter_mut().zip(src) {
                *o += v * scale;
            }
        }
    }
    out
}

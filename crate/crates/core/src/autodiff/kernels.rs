//! Dense numeric kernels shared by forward, backward and tangent passes.

/// `c = a · b + beta · c` for row-major views described by explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= (m - 1) * a_rs + (k - 1) * a_cs + 1);
    assert!(b.len() >= (k - 1) * b_rs + (n - 1) * b_cs + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[m × k] · [k × n]`, both row-major contiguous.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k, 1, b, n, 1, 0.0, &mut c);
    c
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row mean and inverse standard deviation.
pub(crate) fn row_moments(x: &[f64], cols: usize) -> Vec<(f64, f64)> {
    x.chunks_exact(cols)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
        })
        .collect()
}

pub(crate) fn layer_norm(x: &[f64], cols: usize) -> Vec<f64> {
    let moments = row_moments(x, cols);
    let mut out = Vec::with_capacity(x.len());
    for (row, (mean, inv)) in x.chunks_exact(cols).zip(moments) {
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

/// Applies the Jacobian of per-row layer normalisation at `x` to `t`.
/// The Jacobian is symmetric, so this serves both backward and forward mode.
pub(crate) fn layer_norm_linearized(x: &[f64], t: &[f64], cols: usize) -> Vec<f64> {
    let moments = row_moments(x, cols);
    let mut out = Vec::with_capacity(x.len());
    for ((row, trow), (mean, inv)) in x
        .chunks_exact(cols)
        .zip(t.chunks_exact(cols))
        .zip(moments)
    {
        let n = cols as f64;
        let t_mean = trow.iter().sum::<f64>() / n;
        let proj = row
            .iter()
            .zip(trow)
            .map(|(v, g)| (v - mean) * inv * g)
            .sum::<f64>()
            / n;
        out.extend(
            row.iter()
                .zip(trow)
                .map(|(v, g)| inv * (g - t_mean - (v - mean) * inv * proj)),
        );
    }
    out
}

pub(crate) fn softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}

/// `y ⊙ (t − Σ t⊙y)` per row; the symmetric softmax Jacobian applied to `t`.
pub(crate) fn softmax_linearized(y: &[f64], t: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, tr) in y.chunks_exact(cols).zip(t.chunks_exact(cols)) {
        let inner: f64 = yr.iter().zip(tr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(tr).map(|(a, b)| a * (b - inner)));
    }
    out
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast (numpy trailing alignment) to `out_shape`.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let offset = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; out_shape.len()];
    for (i, &d) in in_shape.iter().enumerate() {
        eff[offset + i] = if d == 1 { 0 } else { in_strides[i] };
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// For each flat index of the permuted output, the source flat index.
pub(crate) fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect();
        let c = matmul(2, 3, 4, &a, &b);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_map_bias_and_column() {
        assert_eq!(broadcast_index_map(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_map_transposes() {
        // [2,3] -> [3,2]
        assert_eq!(permute_index_map(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }
}

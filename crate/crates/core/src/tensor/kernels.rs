//! Slice-level kernels shared by the tape ops.

use super::Real;

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // input stride to step along each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// In-place softmax over consecutive rows of length `n`, max-subtracted.
pub fn softmax_rows<T: Real>(x: &mut [T], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise layer norm. Returns `(output, normalized input, 1/std per row)`.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = gamma.len();
    let rows = x.len() / n;
    let inv_n = T::ONE / T::of(n as f64);
    let mut out = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..n {
            let h = (row[c] - mean) * rs;
            xhat[r * n + c] = h;
            out[r * n + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

/// Per-sample, per-channel 2-D correlation with zero padding `(k-1)/2`.
///
/// `x` is `B×C×h×w`, `filters` is `B×C×k×k`.
pub fn depthwise_conv2d<T: Real>(
    x: &[T],
    filters: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let plane = h * w;
    let planes = x.len() / plane;
    debug_assert_eq!(filters.len(), planes * k * k);
    debug_assert_eq!(planes % channels, 0);
    let mut out = vec![T::ZERO; x.len()];
    for p in 0..planes {
        let xin = &x[p * plane..(p + 1) * plane];
        let f = &filters[p * k * k..(p + 1) * k * k];
        let o = &mut out[p * plane..(p + 1) * plane];
        for i in 0..k {
            for j in 0..k {
                let tap = f[i * k + j];
                // output (y, x) reads input (y + i - pad, x + j - pad)
                let y0 = pad.saturating_sub(i);
                let y1 = (h + pad).saturating_sub(i).min(h);
                let x0 = pad.saturating_sub(j);
                let x1 = (w + pad).saturating_sub(j).min(w);
                for y in y0..y1 {
                    let sy = y + i - pad;
                    for xx in x0..x1 {
                        o[y * w + xx] += tap * xin[sy * w + xx + j - pad];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise_conv2d`] with respect to input and filters.
pub fn depthwise_conv2d_backward<T: Real>(
    x: &[T],
    filters: &[T],
    grad: &[T],
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    let planes = x.len() / plane;
    let mut dx = vec![T::ZERO; x.len()];
    let mut df = vec![T::ZERO; filters.len()];
    for p in 0..planes {
        let xin = &x[p * plane..(p + 1) * plane];
        let g = &grad[p * plane..(p + 1) * plane];
        let f = &filters[p * k * k..(p + 1) * k * k];
        let dxp = &mut dx[p * plane..(p + 1) * plane];
        let dfp = &mut df[p * k * k..(p + 1) * k * k];
        for i in 0..k {
            for j in 0..k {
                let tap = f[i * k + j];
                let y0 = pad.saturating_sub(i);
                let y1 = (h + pad).saturating_sub(i).min(h);
                let x0 = pad.saturating_sub(j);
                let x1 = (w + pad).saturating_sub(j).min(w);
                let mut acc = T::ZERO;
                for y in y0..y1 {
                    let sy = y + i - pad;
                    for xx in x0..x1 {
                        let src = sy * w + xx + j - pad;
                        let go = g[y * w + xx];
                        acc += go * xin[src];
                        dxp[src] += go * tap;
                    }
                }
                dfp[i * k + j] += acc;
            }
        }
    }
    (dx, df)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU evaluated in 64-bit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// d/dx GELU(x) = Φ(x) + x·φ(x).
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// ln(1 + eˣ) without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::ZERO) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (out, out_shape) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out[c * 6 + a * 3 + b], data[a * 12 + b * 4 + c]);
                }
            }
        }
        let inv = inverse_permutation(&[2, 0, 1]);
        let (back, back_shape) = permute(&out, &out_shape, &inv);
        assert_eq!(back_shape, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

//! Raw numeric kernels shared by the recording graph and the inference engine.
//!
//! All slices are row-major. Reductions accumulate in `f64`.

use super::Scalar;

/// Variance below which a layer-norm row is treated as constant and
/// normalized to exactly zero.
pub const LN_ZERO_VARIANCE: f64 = 1e-8;
pub const LN_EPS: f64 = 1e-5;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (acc_j, &bv) in acc.iter_mut().zip(brow) {
                *acc_j += av * bv.to_f64();
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::from_f64(v);
        }
    }
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = T::from_f64(dot(arow, &b[j * k..(j + 1) * k]));
        }
    }
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            for (acc_j, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *acc_j += av * bv.to_f64();
            }
        }
    }
    for (o, v) in out.iter_mut().zip(acc) {
        *o = T::from_f64(v);
    }
}

/// Dot product with four independent `f64` accumulators in a fixed order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s[0] += a[i].to_f64() * b[i].to_f64();
        s[1] += a[i + 1].to_f64() * b[i + 1].to_f64();
        s[2] += a[i + 2].to_f64() * b[i + 2].to_f64();
        s[3] += a[i + 3].to_f64() * b[i + 3].to_f64();
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i].to_f64() * b[i].to_f64();
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Numerically stable softmax of one row, restricted to the first `valid`
/// entries; the remaining entries are set to zero.
pub fn softmax_row<T: Scalar>(row: &mut [T], valid: usize) {
    let max = row[..valid]
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut exps = Vec::with_capacity(valid);
    for v in &row[..valid] {
        let e = (v.to_f64() - max).exp();
        sum += e;
        exps.push(e);
    }
    for (v, e) in row[..valid].iter_mut().zip(exps) {
        *v = T::from_f64(e / sum);
    }
    for v in &mut row[valid..] {
        *v = T::zero();
    }
}

/// Log-softmax of a row, returned in `f64`.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.to_f64() - lse).collect()
}

/// Mean and reciprocal standard deviation of a row. `rstd` is zero for a
/// (numerically) constant row.
pub fn row_moments<T: Scalar>(row: &[T]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var < LN_ZERO_VARIANCE {
        (mean, 0.0)
    } else {
        (mean, 1.0 / (var + LN_EPS).sqrt())
    }
}

/// Layer norm of one row with affine gain/bias.
pub fn layer_norm_row<T: Scalar>(x: &[T], gain: &[T], bias: &[T], out: &mut [T]) -> (f64, f64) {
    let (mean, rstd) = row_moments(x);
    for j in 0..x.len() {
        let xhat = (x[j].to_f64() - mean) * rstd;
        out[j] = T::from_f64(xhat * gain[j].to_f64() + bias[j].to_f64());
    }
    (mean, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `ln σ(x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

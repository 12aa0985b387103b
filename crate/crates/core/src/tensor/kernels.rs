//! Raw slice kernels shared by the eager helpers and the graph ops.
//!
//! Accumulations always walk the reduced index upwards.

use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let block = &mut out[i * n..(i + 4) * n];
        let (o0, rest) = block.split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bv = brow[j];
                o0[j] += x0 * bv;
                o1[j] += x1 * bv;
                o2[j] += x2 * bv;
                o3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &x) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
        i += 1;
    }
}

pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn softmax_strided<T: Scalar>(x: &[T], out: &mut [T], outer: usize, n: usize, inner: usize) {
    if inner == 1 {
        for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_row(xr, or);
        }
        return;
    }
    let mut buf = vec![T::zero(); n];
    let mut obuf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = x[(o * n + j) * inner + i];
            }
            softmax_row(&buf, &mut obuf);
            for j in 0..n {
                out[(o * n + j) * inner + i] = obuf[j];
            }
        }
    }
}

pub fn log_softmax_strided<T: Scalar>(x: &[T], out: &mut [T], outer: usize, n: usize, inner: usize) {
    if inner == 1 {
        for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            log_softmax_row(xr, or);
        }
        return;
    }
    let mut buf = vec![T::zero(); n];
    let mut obuf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = x[(o * n + j) * inner + i];
            }
            log_softmax_row(&buf, &mut obuf);
            for j in 0..n {
                out[(o * n + j) * inner + i] = obuf[j];
            }
        }
    }
}

pub fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Softmax backward for one row: `dx = y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let mut dot = T::zero();
    for (&a, &b) in y.iter().zip(dy) {
        dot += a * b;
    }
    for ((d, &a), &b) in dx.iter_mut().zip(y).zip(dy) {
        *d += a * (b - dot);
    }
}

/// Log-softmax backward for one row: `dx = dy − softmax ⊙ Σ dy`.
pub fn log_softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let mut total = T::zero();
    for &b in dy {
        total += b;
    }
    for ((d, &a), &b) in dx.iter_mut().zip(y).zip(dy) {
        *d += b - a.exp() * total;
    }
}

pub fn smoothed_nll_row<T: Scalar>(log_probs: &[T], target: usize, eps: T) -> T {
    if eps == T::zero() {
        return -log_probs[target];
    }
    let v = log_probs.len();
    let off = eps / T::of((v - 1) as f64);
    let mut others = T::zero();
    for (w, &lp) in log_probs.iter().enumerate() {
        if w != target {
            others += lp;
        }
    }
    -((T::one() - eps) * log_probs[target] + off * others)
}

/// Weight each log-probability receives in the smoothed objective.
pub fn smoothed_target_weight<T: Scalar>(w: usize, target: usize, eps: T, v: usize) -> T {
    if w == target {
        T::one() - eps
    } else if eps == T::zero() {
        T::zero()
    } else {
        eps / T::of((v - 1) as f64)
    }
}

pub fn kl_row<T: Scalar>(p: &[T], log_q: &[T]) -> T {
    let mut acc = T::zero();
    for (&pw, &lq) in p.iter().zip(log_q) {
        if pw > T::zero() {
            acc += pw * (pw.ln() - lq);
        }
    }
    acc
}

/// `KL(p || q)` with both sides in log space; identical rows give exactly 0.
pub fn kl_row_log<T: Scalar>(log_p: &[T], log_q: &[T]) -> T {
    let mut acc = T::zero();
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        if lp > T::neg_infinity() {
            acc += lp.exp() * (lp - lq);
        }
    }
    acc
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm over rows of width `n`; records per-row mean and reciprocal std.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    for (r, (xr, or)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let mut s = T::zero();
        for &v in xr {
            s += v;
        }
        let nf = T::of(n as f64);
        let mu = s / nf;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mu;
            var += d * d;
        }
        let rs = T::one() / (var / nf + T::of(LAYER_NORM_EPS)).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        for j in 0..n {
            or[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    n: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = x.len() / n;
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..n {
                let xhat = (x[r * n + j] - mean[r]) * rstd[r];
                dg[j] += dy[r * n + j] * xhat;
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for j in 0..n {
                db[j] += dy[r * n + j];
            }
        }
    }
    if let Some(dx) = dx {
        let mut dxhat = vec![T::zero(); n];
        for r in 0..rows {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..n {
                let xhat = (x[r * n + j] - mean[r]) * rstd[r];
                dxhat[j] = dy[r * n + j] * gamma[j];
                s1 += dxhat[j];
                s2 += dxhat[j] * xhat;
            }
            let nf = T::of(n as f64);
            let m1 = s1 / nf;
            let m2 = s2 / nf;
            for j in 0..n {
                let xhat = (x[r * n + j] - mean[r]) * rstd[r];
                dx[r * n + j] += rstd[r] * (dxhat[j] - m1 - xhat * m2);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn blocked_matmul_matches_naive_bitwise() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (4, 3, 7), (9, 6, 5), (13, 8, 16)] {
            let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.37).collect();
            let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 13) as f32 - 6.0) * 0.21).collect();
            let mut out = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut out, m, k, n);
            assert_eq!(out, naive(&a, &b, m, k, n), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }
}

//! Hot-loop kernels for the matrix/vector work behind the tape ops.
//!
//! `dot` uses four accumulators so the chains pipeline; the summation order is
//! fixed, which keeps repeated runs bit-identical. The cosine op in the tape
//! deliberately does NOT use this kernel: its sequential accumulation order is
//! part of the memory-read contract.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

/// out = W x, with W a row-major `m x n` matrix.
#[inline]
pub fn matvec(w: &[f64], m: usize, n: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(out.len(), m);
    for i in 0..m {
        out[i] = dot(&w[i * n..(i + 1) * n], x);
    }
}

/// dx += W^T g, computed as a sum of scaled rows so memory access stays
/// sequential.
#[inline]
pub fn matvec_transpose_accum(w: &[f64], m: usize, n: usize, g: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(g.len(), m);
    debug_assert_eq!(dx.len(), n);
    for i in 0..m {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for j in 0..n {
            dx[j] += gi * row[j];
        }
    }
}

/// dW += g x^T (outer product accumulation).
#[inline]
pub fn outer_accum(g: &[f64], x: &[f64], dw: &mut [f64]) {
    let m = g.len();
    let n = x.len();
    debug_assert_eq!(dw.len(), m * n);
    for i in 0..m {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] += gi * x[j];
        }
    }
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for j in 0..x.len() {
        y[j] += alpha * x[j];
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

/// Softmax with max subtraction, written into `out`.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-softmax with max subtraction, written into `out`.
pub fn log_softmax(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for &v in logits {
        sum += (v - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - log_z;
    }
}

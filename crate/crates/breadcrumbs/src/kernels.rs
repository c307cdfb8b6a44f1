//! Low-level numeric kernels shared by the autodiff tape and the no-grad
//! incremental decode path.
//!
//! The batched forward (training) and the cached single-token forward
//! (generation) must produce bit-identical outputs for the same visible
//! entries.  That only holds if both paths run the *same* floating-point
//! operations in the *same* order, so every reduction here has one fixed
//! accumulation pattern and both paths are required to go through these
//! functions rather than open-coding their own loops.

use crate::num::Num;

/// Dot product with a fixed 8-lane accumulation pattern.  The lane layout is
/// part of the function's definition: every caller (batched tape forward and
/// cached decode) gets the identical floating-point result for identical
/// inputs, while the independent lanes let the compiler emit SIMD.
pub fn dot<S: Num>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        tail = tail + x * y;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// C[m,n] = A[m,k] @ B[k,n].  ikj loop order; accumulation over k is
/// ascending for every output element.
pub fn matmul_nn<S: Num>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] @ B[n,k]^T.  Each element is a `dot` of two rows, so the
/// cached decode path reproduces it exactly by calling `dot` per entry.
pub fn matmul_nt<S: Num>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// C[k,n] = A[m,k]^T @ G[m,n].  Backward-only helper (no cross-path
/// equivalence constraint); accumulation over m is ascending.
pub fn matmul_tn<S: Num>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    let mut out = vec![S::zero(); k * n];
    for mm in 0..m {
        let a_row = &a[mm * k..(mm + 1) * k];
        let g_row = &g[mm * n..(mm + 1) * n];
        for (kk, &amk) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row.iter()) {
                *o = *o + amk * gv;
            }
        }
    }
    out
}

/// In-place softmax over one row.  `-inf` entries are treated as masked and
/// come out exactly 0.0.  A row with no finite entry becomes all zeros (the
/// caller is responsible for never asking for that in a real attention row).
pub fn softmax_row<S: Num>(row: &mut [S]) {
    let mut mx = S::neg_infinity();
    for &x in row.iter() {
        if x > mx {
            mx = x;
        }
    }
    if mx == S::neg_infinity() {
        for x in row.iter_mut() {
            *x = S::zero();
        }
        return;
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        // exp(-inf - mx) == exp(-inf) == 0 exactly, so masked entries drop out.
        let e = (*x - mx).exp();
        *x = e;
        sum = sum + e;
    }
    let inv = S::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// In-place log-softmax over one row.  Masked (`-inf`) entries stay `-inf`.
pub fn log_softmax_row<S: Num>(row: &mut [S]) {
    let mut mx = S::neg_infinity();
    for &x in row.iter() {
        if x > mx {
            mx = x;
        }
    }
    if mx == S::neg_infinity() {
        return;
    }
    let mut sum = S::zero();
    for &x in row.iter() {
        sum = sum + (x - mx).exp();
    }
    let ln_sum = sum.ln();
    for x in row.iter_mut() {
        if *x != S::neg_infinity() {
            *x = *x - mx - ln_sum;
        }
    }
}

/// y_i = x_i * gain_i / sqrt(mean(x^2) + eps), written into `out`.
pub fn rms_norm_row<S: Num>(x: &[S], gain: &[S], eps: S, out: &mut [S]) {
    debug_assert_eq!(x.len(), gain.len());
    debug_assert_eq!(x.len(), out.len());
    let mut ss = S::zero();
    for &v in x.iter() {
        ss = ss + v * v;
    }
    let ms = ss / S::from_usize(x.len()).unwrap();
    let r = S::one() / (ms + eps).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * r * gain[i];
    }
}

pub fn sigmoid<S: Num>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Num>(x: S) -> S {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_prime<S: Num>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Per-head inverse frequencies for rotary position encoding:
/// inv_freq[j] = base^(-2j / head_dim), j in 0..head_dim/2.
pub fn rope_inv_freqs<S: Num>(head_dim: usize, base: f64) -> Vec<S> {
    assert!(head_dim % 2 == 0, "rotary encoding needs an even head_dim");
    let half = head_dim / 2;
    (0..half)
        .map(|j| S::from_f64_lossy(base.powf(-((2 * j) as f64) / head_dim as f64)))
        .collect()
}

/// Rotate one head's vector in place for position `pos`.  Pairs are split
/// halves: (v[j], v[j+half]).  `forward=false` applies the transpose
/// rotation, which is the exact gradient of the forward.
pub fn rope_rotate_head<S: Num>(head: &mut [S], pos: usize, inv_freq: &[S], forward: bool) {
    let half = inv_freq.len();
    debug_assert_eq!(head.len(), 2 * half);
    let p = S::from_usize(pos).unwrap();
    for j in 0..half {
        let angle = p * inv_freq[j];
        let (cos, sin) = (angle.cos(), angle.sin());
        let sin = if forward { sin } else { -sin };
        let a = head[j];
        let b = head[j + half];
        head[j] = a * cos - b * sin;
        head[j + half] = a * sin + b * cos;
    }
}

/// Rotate every head inside a flat `[n_heads * head_dim]` row.
pub fn rope_rotate_row<S: Num>(row: &mut [S], pos: usize, n_heads: usize, inv_freq: &[S], forward: bool) {
    let head_dim = 2 * inv_freq.len();
    debug_assert_eq!(row.len(), n_heads * head_dim);
    for h in 0..n_heads {
        rope_rotate_head(&mut row[h * head_dim..(h + 1) * head_dim], pos, inv_freq, forward);
    }
}

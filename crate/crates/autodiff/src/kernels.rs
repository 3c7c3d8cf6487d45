//! Slice-level compute kernels shared by forward and backward passes.
//!
//! Reductions use eight independent accumulators so the compiler can keep
//! them in vector registers; summation order is fixed, so results are
//! reproducible run to run.

use crate::scalar::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip != T::zero() {
                axpy(ci, aip, &b[p * n..(p + 1) * n]);
            }
        }
    }
    c
}

/// `C[m,n] += A[m,k] · B[n,k]ᵀ`
pub fn matmul_nt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `C[k,n] += A[m,k]ᵀ · B[m,n]`
pub fn matmul_tn_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * n..(i + 1) * n];
        for (p, &aip) in ai.iter().enumerate() {
            if aip != T::zero() {
                axpy(&mut c[p * n..(p + 1) * n], aip, bi);
            }
        }
    }
}

/// Decompose a shape around `axis` into `(outer, len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_axis<T: Real>(x: &[T], outer: usize, n: usize, inner: usize, log: bool) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let mut mx = T::neg_infinity();
            for i in 0..n {
                mx = mx.max(x[idx(i)]);
            }
            let mut s = T::zero();
            for i in 0..n {
                s += (x[idx(i)] - mx).exp();
            }
            if log {
                let lse = mx + s.ln();
                for i in 0..n {
                    y[idx(i)] = x[idx(i)] - lse;
                }
            } else {
                for i in 0..n {
                    y[idx(i)] = (x[idx(i)] - mx).exp() / s;
                }
            }
        }
    }
    y
}

/// Causal dilated 1-D convolution.
///
/// `x` is `[batch * len, cin]` with each sample's steps stored contiguously,
/// `w` is `[kernel, cin, cout]`. Output step `t` reads input steps
/// `t - (kernel - 1 - j) * dilation` for tap `j`; reads before step 0 see zeros.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    len: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * len * cout];
    for b in 0..batch {
        for t in 0..len {
            let orow = &mut out[(b * len + t) * cout..(b * len + t + 1) * cout];
            if let Some(bias) = bias {
                orow.copy_from_slice(bias);
            }
            for j in 0..kernel {
                let back = (kernel - 1 - j) * dilation;
                if back > t {
                    continue;
                }
                let src = &x[(b * len + t - back) * cin..(b * len + t - back + 1) * cin];
                let wj = &w[j * cin * cout..(j + 1) * cin * cout];
                for (c, &xv) in src.iter().enumerate() {
                    if xv != T::zero() {
                        axpy(orow, xv, &wj[c * cout..(c + 1) * cout]);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d_forward`] with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Real>(
    dout: &[T],
    x: &[T],
    w: &[T],
    batch: usize,
    len: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];
    for b in 0..batch {
        for t in 0..len {
            let g = &dout[(b * len + t) * cout..(b * len + t + 1) * cout];
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for j in 0..kernel {
                let back = (kernel - 1 - j) * dilation;
                if back > t {
                    continue;
                }
                let s = (b * len + t - back) * cin;
                let wj = &w[j * cin * cout..(j + 1) * cin * cout];
                let dwj = &mut dw[j * cin * cout..(j + 1) * cin * cout];
                for c in 0..cin {
                    dx[s + c] += dot(g, &wj[c * cout..(c + 1) * cout]);
                    let xv = x[s + c];
                    if xv != T::zero() {
                        axpy(&mut dwj[c * cout..(c + 1) * cout], xv, g);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Scaled dot-product attention per head. Returns `(output, probabilities)`;
/// probabilities are laid out `[batch, heads, lq, lk]`.
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: Option<&[bool]>,
    d: AttnDims,
) -> (Vec<T>, Vec<T>) {
    let dh = d.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); d.batch * d.lq * d.dim];
    let mut probs = vec![T::zero(); d.batch * d.heads * d.lq * d.lk];
    let mut scores = vec![T::zero(); d.lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * dh;
            for i in 0..d.lq {
                let qi = &q[(b * d.lq + i) * d.dim + off..(b * d.lq + i) * d.dim + off + dh];
                let mut mx = T::neg_infinity();
                for j in 0..d.lk {
                    if mask.is_some_and(|m| !m[i * d.lk + j]) {
                        scores[j] = T::neg_infinity();
                        continue;
                    }
                    let kj = &k[(b * d.lk + j) * d.dim + off..(b * d.lk + j) * d.dim + off + dh];
                    scores[j] = dot(qi, kj) * scale;
                    mx = mx.max(scores[j]);
                }
                let p = &mut probs[((b * d.heads + h) * d.lq + i) * d.lk..][..d.lk];
                let mut s = T::zero();
                for j in 0..d.lk {
                    p[j] = if scores[j] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (scores[j] - mx).exp()
                    };
                    s += p[j];
                }
                let orow = &mut out[(b * d.lq + i) * d.dim + off..(b * d.lq + i) * d.dim + off + dh];
                for j in 0..d.lk {
                    p[j] /= s;
                    if p[j] != T::zero() {
                        let vj = &v[(b * d.lk + j) * d.dim + off..(b * d.lk + j) * d.dim + off + dh];
                        axpy(orow, p[j], vj);
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
pub fn attention_backward<T: Real>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); d.lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * dh;
            for i in 0..d.lq {
                let qrow = (b * d.lq + i) * d.dim + off;
                let go = &dout[qrow..qrow + dh];
                let p = &probs[((b * d.heads + h) * d.lq + i) * d.lk..][..d.lk];
                let mut inner = T::zero();
                for j in 0..d.lk {
                    let vr = (b * d.lk + j) * d.dim + off;
                    dp[j] = dot(go, &v[vr..vr + dh]);
                    inner += dp[j] * p[j];
                    if p[j] != T::zero() {
                        axpy(&mut dv[vr..vr + dh], p[j], go);
                    }
                }
                for j in 0..d.lk {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kr = (b * d.lk + j) * d.dim + off;
                    axpy(&mut dq[qrow..qrow + dh], ds, &k[kr..kr + dh]);
                    axpy(&mut dk[kr..kr + dh], ds, &q[qrow..qrow + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

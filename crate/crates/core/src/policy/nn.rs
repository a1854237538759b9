//! Dense building blocks with hand-written backward passes. Matrices are row-major
//! slices; `x` is `n × k`, weights are `k × m`.

use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b`.
pub fn linear<S: Scalar>(x: &[S], n: usize, k: usize, w: &[S], b: &[S], m: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    let mut y = Vec::with_capacity(n * m);
    for i in 0..n {
        y.extend_from_slice(b);
        let row = &mut y[i * m..(i + 1) * m];
        for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            for (yv, &wv) in row.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<S: Scalar>(
    x: &[S],
    n: usize,
    k: usize,
    w: &[S],
    m: usize,
    dy: &[S],
    dw: &mut [S],
    db: &mut [S],
) -> Vec<S> {
    let mut dx = vec![S::zero(); n * k];
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for (d, &g) in db.iter_mut().zip(dyr) {
            *d += g;
        }
        for p in 0..k {
            let xv = x[i * k + p];
            let wr = &w[p * m..(p + 1) * m];
            let dwr = &mut dw[p * m..(p + 1) * m];
            let mut acc = S::zero();
            for j in 0..m {
                dwr[j] += xv * dyr[j];
                acc += dyr[j] * wr[j];
            }
            dx[i * k + p] = acc;
        }
    }
    dx
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LnCache<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

pub fn layer_norm<S: Scalar>(x: &[S], n: usize, d: usize, g: &[S], b: &[S]) -> (Vec<S>, LnCache<S>) {
    let eps = S::of(LN_EPS);
    let inv_d = S::one() / S::of_usize(d);
    let mut y = vec![S::zero(); n * d];
    let mut xhat = vec![S::zero(); n * d];
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let r = S::one() / (var + eps).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<S: Scalar>(
    cache: &LnCache<S>,
    n: usize,
    d: usize,
    g: &[S],
    dy: &[S],
    dg: &mut [S],
    db: &mut [S],
) -> Vec<S> {
    let inv_d = S::one() / S::of_usize(d);
    let mut dx = vec![S::zero(); n * d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut sum_dh = S::zero();
        let mut sum_dh_xh = S::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dh = dyr[j] * g[j];
            sum_dh += dh;
            sum_dh_xh += dh * xh[j];
        }
        let r = cache.rstd[i];
        for j in 0..d {
            let dh = dyr[j] * g[j];
            dx[i * d + j] = r * (dh - inv_d * sum_dh - xh[j] * inv_d * sum_dh_xh);
        }
    }
    dx
}

fn gelu_inner<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    (t, du)
}

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let (t, _) = gelu_inner(x);
    S::of(0.5) * x * (S::one() + t)
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let (t, du) = gelu_inner(x);
    let half = S::of(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

/// Multi-head self-attention core over `n` positions; `q`, `k`, `v` are `n × d`
/// with heads laid out as contiguous column blocks. Returns the mixed values and
/// the attention probabilities (`heads × n × n`).
pub fn attention<S: Scalar>(q: &[S], k: &[S], v: &[S], n: usize, d: usize, heads: usize) -> (Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::one() / S::of_usize(dh).sqrt();
    let mut out = vec![S::zero(); n * d];
    let mut probs = vec![S::zero(); heads * n * n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            for j in 0..n {
                let mut s = S::zero();
                for e in 0..dh {
                    s += q[i * d + off + e] * k[j * d + off + e];
                }
                row[j] = s * scale;
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                total += *p;
            }
            for p in row.iter_mut() {
                *p /= total;
            }
            for j in 0..n {
                let p = row[j];
                for e in 0..dh {
                    out[i * d + off + e] += p * v[j * d + off + e];
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for [`attention`].
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::one() / S::of_usize(dh).sqrt();
    let mut dq = vec![S::zero(); n * d];
    let mut dk = vec![S::zero(); n * d];
    let mut dv = vec![S::zero(); n * d];
    let mut dp = vec![S::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            for j in 0..n {
                let mut acc = S::zero();
                for e in 0..dh {
                    acc += dout[i * d + off + e] * v[j * d + off + e];
                    dv[j * d + off + e] += p[j] * dout[i * d + off + e];
                }
                dp[j] = acc;
            }
            let dot: S = (0..n).map(|j| p[j] * dp[j]).sum();
            for j in 0..n {
                let ds = p[j] * (dp[j] - dot) * scale;
                for e in 0..dh {
                    dq[i * d + off + e] += ds * k[j * d + off + e];
                    dk[j * d + off + e] += ds * q[i * d + off + e];
                }
            }
        }
    }
    (dq, dk, dv)
}

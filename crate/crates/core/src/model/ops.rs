//! Row-major dense kernels and the per-layer forward/backward pieces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×n) · bᵀ` where `b` is `k×n`; result is `m×k`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(ar, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// `out (k×n) += aᵀ · b` for `a (m×k)`, `b (m×n)`.
pub(crate) fn add_at_b(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// In-place softmax of `z / tau`, max-subtracted.
pub(crate) fn softmax_in_place(z: &mut [f64], tau: f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(z)` computed as `z - max - ln Σ exp(z - max)`.
pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - max - lse).collect()
}

/// A probability vector: nonnegative entries summing to one within 1e-9.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty distribution".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(size: usize, index: usize) -> Result<Self> {
        if index >= size {
            return Err(Error::OutOfVocab {
                id: index,
                vocab_size: size,
            });
        }
        let mut v = vec![0.0; size];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(vec![1.0 / size as f64; size])
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<ProbDist> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::InvalidDistribution("no logits".into()));
    }
    if let Some(position) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            what: "logit",
            position,
        });
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p, tau);
    Ok(ProbDist(p))
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, NormCache) {
    let m = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_back(
    dy: &[f64],
    cache: &NormCache,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let m = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..m {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

pub(crate) struct AttnGrads<'a> {
    pub wq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub wo: &'a mut [f64],
}

pub(crate) struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    o: Vec<f64>,
    m: usize,
    s: usize,
}

/// Single-head scaled dot-product attention with output projection.
pub(crate) fn attention(
    xq: &[f64],
    xkv: &[f64],
    d: usize,
    w: &AttnWeights,
    causal: bool,
) -> (Vec<f64>, AttnCache) {
    let m = xq.len() / d;
    let s = xkv.len() / d;
    let q = matmul(xq, w.wq, m, d, d);
    let k = matmul(xkv, w.wk, s, d, d);
    let v = matmul(xkv, w.wv, s, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut a = matmul_bt(&q, &k, m, d, s);
    for i in 0..m {
        let row = &mut a[i * s..(i + 1) * s];
        for (j, x) in row.iter_mut().enumerate() {
            *x = if causal && j > i { f64::NEG_INFINITY } else { *x * scale };
        }
        softmax_in_place(row, 1.0);
    }
    let o = matmul(&a, &v, m, s, d);
    let out = matmul(&o, w.wo, m, d, d);
    let cache = AttnCache {
        xq: xq.to_vec(),
        xkv: xkv.to_vec(),
        q,
        k,
        v,
        a,
        o,
        m,
        s,
    };
    (out, cache)
}

/// Returns gradients with respect to the query input and the key/value input.
pub(crate) fn attention_back(
    dout: &[f64],
    c: &AttnCache,
    d: usize,
    w: &AttnWeights,
    g: AttnGrads,
) -> (Vec<f64>, Vec<f64>) {
    let (m, s) = (c.m, c.s);
    let scale = 1.0 / (d as f64).sqrt();
    add_at_b(g.wo, &c.o, dout, m, d, d);
    let d_o = matmul_bt(dout, w.wo, m, d, d);
    let mut ds = matmul_bt(&d_o, &c.v, m, d, s);
    let mut dv = vec![0.0; s * d];
    add_at_b(&mut dv, &c.a, &d_o, m, s, d);
    for i in 0..m {
        let ar = &c.a[i * s..(i + 1) * s];
        let dr = &mut ds[i * s..(i + 1) * s];
        let inner = dot(ar, dr);
        for (x, &p) in dr.iter_mut().zip(ar) {
            *x = p * (*x - inner) * scale;
        }
    }
    let dq = matmul(&ds, &c.k, m, s, d);
    let mut dk = vec![0.0; s * d];
    add_at_b(&mut dk, &ds, &c.q, m, s, d);

    add_at_b(g.wq, &c.xq, &dq, m, d, d);
    add_at_b(g.wk, &c.xkv, &dk, s, d, d);
    add_at_b(g.wv, &c.xkv, &dv, s, d, d);
    let dxq = matmul_bt(&dq, w.wq, m, d, d);
    let mut dxkv = matmul_bt(&dk, w.wk, s, d, d);
    add_assign(&mut dxkv, &matmul_bt(&dv, w.wv, s, d, d));
    (dxq, dxkv)
}

pub(crate) struct FfnCache {
    x: Vec<f64>,
    h: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) fn ffn(
    x: &[f64],
    d: usize,
    ff: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> (Vec<f64>, FfnCache) {
    let m = x.len() / d;
    let mut h = matmul(x, w1, m, d, ff);
    for row in h.chunks_mut(ff) {
        add_assign(row, b1);
    }
    let act: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
    let mut out = matmul(&act, w2, m, ff, d);
    for row in out.chunks_mut(d) {
        add_assign(row, b2);
    }
    (
        out,
        FfnCache {
            x: x.to_vec(),
            h,
            act,
        },
    )
}

pub(crate) struct FfnGrads<'a> {
    pub w1: &'a mut [f64],
    pub b1: &'a mut [f64],
    pub w2: &'a mut [f64],
    pub b2: &'a mut [f64],
}

pub(crate) fn ffn_back(
    dout: &[f64],
    c: &FfnCache,
    d: usize,
    ff: usize,
    w1: &[f64],
    w2: &[f64],
    g: FfnGrads,
) -> Vec<f64> {
    let m = dout.len() / d;
    add_at_b(g.w2, &c.act, dout, m, ff, d);
    for row in dout.chunks(d) {
        add_assign(g.b2, row);
    }
    let mut dh = matmul_bt(dout, w2, m, d, ff);
    for (x, &h) in dh.iter_mut().zip(&c.h) {
        *x *= gelu_grad(h);
    }
    add_at_b(g.w1, &c.x, &dh, m, d, ff);
    for row in dh.chunks(ff) {
        add_assign(g.b1, row);
    }
    matmul_bt(&dh, w1, m, ff, d)
}

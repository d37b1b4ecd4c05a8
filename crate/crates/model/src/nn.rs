//! Layer building blocks shared by the text encoder, the DiT and the adapter.

use rand::Rng;
use std::rc::Rc;

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), vec![din, dout], init, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), vec![dout], Init::Zeros, rng));
        Self { w, b, din, dout }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + if self.b.is_some() { self.dout } else { 0 }
    }
}

/// Index that views `x [b, s, stride]` columns `offset + h*dh .. +dh` as
/// `[b * heads, s, dh]`.
pub fn split_heads_index(b: usize, s: usize, stride: usize, offset: usize, heads: usize, dh: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(b * heads * s * dh);
    for bi in 0..b {
        for h in 0..heads {
            for si in 0..s {
                let base = (bi * s + si) * stride + offset + h * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    Rc::new(idx)
}

/// Inverse of [`split_heads_index`] with `stride = heads * dh`, `offset = 0`.
pub fn merge_heads_index(b: usize, s: usize, heads: usize, dh: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(b * s * heads * dh);
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let base = ((bi * heads + h) * s + si) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    Rc::new(idx)
}

/// Multi-head attention. `q_src [b, s, d]` attends over `kv_src [b, l, d]`;
/// `key_mask` is `[b, l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub kv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, Init::Xavier, rng),
            kv: Linear::new(store, &format!("{name}.kv"), d, 2 * d, true, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, Init::Xavier, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q_src: Var,
        kv_src: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let sq = g.shape(q_src).to_vec();
        let skv = g.shape(kv_src).to_vec();
        let (b, s, d) = (sq[0], sq[1], sq[2]);
        let l = skv[1];
        let (h, dh) = (self.heads, d / self.heads);
        let q = self.q.forward(g, store, q_src);
        let kv = self.kv.forward(g, store, kv_src);
        let q = g.gather(q, split_heads_index(b, s, d, 0, h, dh), vec![b * h, s, dh]);
        let k = g.gather(kv, split_heads_index(b, l, 2 * d, 0, h, dh), vec![b * h, l, dh]);
        let v = g.gather(kv, split_heads_index(b, l, 2 * d, d, h, dh), vec![b * h, l, dh]);
        let scores = g.matmul(q, k, false, true);
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let p = g.softmax(scores, key_mask.map(|m| (m, h)));
        let o = g.matmul(p, v, false, false);
        let o = g.gather(o, merge_heads_index(b, s, h, dh), vec![b, s, d]);
        self.out.forward(g, store, o)
    }
}

/// Sinusoidal embedding `[cos(v f_i), sin(v f_i)]` with geometric frequencies.
pub fn sinusoid(v: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (v * freq).cos();
        out[half + i] = (v * freq).sin();
    }
}

pub fn timestep_features<T: Scalar>(t: &[f64], dim: usize) -> Tensor<T> {
    let mut row = vec![0.0; dim];
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        sinusoid(ti * 1000.0, dim, &mut row);
        data.extend(row.iter().map(|&v| T::of(v)));
    }
    Tensor::new(vec![t.len(), dim], data)
}

/// Fixed 3-D position table `[frames * rows * cols, d]`; each axis takes a
/// third of the width (rounded down to even), remaining columns are zero.
pub fn position_table<T: Scalar>(frames: usize, rows: usize, cols: usize, d: usize) -> Tensor<T> {
    let axis = (d / 3) & !1;
    let mut data = vec![T::zero(); frames * rows * cols * d];
    let mut buf = vec![0.0; axis];
    for f in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                let tok = (f * rows + r) * cols + c;
                for (a, pos) in [f, r, c].into_iter().enumerate() {
                    sinusoid(pos as f64, axis, &mut buf);
                    for j in 0..axis {
                        data[tok * d + a * axis + j] = T::of(buf[j]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![frames * rows * cols, d], data)
}

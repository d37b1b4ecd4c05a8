use std::collections::HashMap;
use std::rc::Rc;

use super::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    /// `[g, m, k] x [g, k, n]`, either side optionally transposed in its last
    /// two dims; `shared_b` broadcasts a single `b` over the batch.
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: [usize; 4],
        shared_b: bool,
    },
    Add(Var, Var),
    /// `b` tiled over the leading dims of `a`.
    AddTiled(Var, Var),
    Mul(Var, Var),
    /// `x [rows, inner, d]` with `s [rows, d]` broadcast over `inner`.
    AddRows { x: Var, s: Var, inner: usize },
    MulRows { x: Var, s: Var, inner: usize },
    Scale(Var, T),
    LayerNorm { x: Var, inv_std: Vec<T>, dim: usize },
    Gelu { x: Var, deriv: Vec<T> },
    Silu(Var),
    Softmax(Var),
    /// `out[i] = x[index[i]]`.
    Gather { x: Var, index: Rc<Vec<usize>> },
    Embedding { table: Var, ids: Vec<usize> },
    /// `x [b, l, d] -> [b, d]` with per-row weights summing to one.
    Pool { x: Var, weights: Vec<T>, l: usize },
    SliceCols { x: Var, start: usize, cols: usize },
    Reshape(Var),
    Mse { pred: Var, target: Rc<Vec<T>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Parameter leaves are copied from a [`ParamStore`];
/// frozen parameters never receive gradients.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every trainable parameter that took part in the graph.
    pub fn params(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    let th = one - T::of(2.0) / ((u + u).exp() + one);
    let value = half * x * (one + th);
    let du = c * (one + T::of(3.0) * k * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * du;
    (value, deriv)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient; used to differentiate w.r.t. inputs.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Batched matrix product. `a` is `[.., m, k]` (or `[.., k, m]` when
    /// `ta`), `b` is `[.., k, n]` (or `[.., n, k]` when `tb`). A rank-2 `b`
    /// is shared across the batch of `a`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, kb, "matmul inner dims {sa:?} x {sb:?}");
        let g = numel(&sa[..sa.len() - 2]);
        let shared_b = sb.len() == 2 && sa.len() > 2;
        let gb = if shared_b { 1 } else { numel(&sb[..sb.len() - 2]) };
        assert!(shared_b || gb == g, "matmul batch mismatch {sa:?} x {sb:?}");

        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); g * m * n];
        {
            let av = &self.value(a).data;
            let bv = &self.value(b).data;
            let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
            for gi in 0..g {
                let boff = if shared_b { 0 } else { gi * k * n };
                // SAFETY: offsets stay inside the respective buffers.
                unsafe {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        av.as_ptr().add(gi * m * k),
                        rsa,
                        csa,
                        bv.as_ptr().add(boff),
                        rsb,
                        csb,
                        T::zero(),
                        out.as_mut_ptr().add(gi * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(out_shape, out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                dims: [g, m, k, n],
                shared_b,
            },
            rg,
        )
    }

    /// `x @ w + b` over the last dim of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w, false, false);
        match b {
            Some(b) => self.add_tiled(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), rg)
    }

    /// Adds `b` to every trailing block of `a` with `b`'s size.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let nb = self.value(b).len();
        assert_eq!(self.value(a).len() % nb, 0, "add_tiled size mismatch");
        let bv = &self.value(b).data;
        let mut data = self.value(a).data.clone();
        for chunk in data.chunks_exact_mut(nb) {
            chunk.iter_mut().zip(bv).for_each(|(x, &y)| *x += y);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), Op::AddTiled(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), rg)
    }

    fn rows_dims(&self, x: Var, s: Var) -> (usize, usize, usize) {
        let ss = self.shape(s);
        assert_eq!(ss.len(), 2, "row modulation must be [rows, d]");
        let (rows, d) = (ss[0], ss[1]);
        let n = self.value(x).len();
        assert_eq!(n % (rows * d), 0, "row modulation size mismatch");
        (rows, n / (rows * d), d)
    }

    /// `x[r, i, :] + s[r, :]` for `x` viewed as `[rows, inner, d]`.
    pub fn add_rows(&mut self, x: Var, s: Var) -> Var {
        let (rows, inner, d) = self.rows_dims(x, s);
        let (xv, sv) = (&self.value(x).data, &self.value(s).data);
        let mut data = xv.clone();
        for r in 0..rows {
            for i in 0..inner {
                let base = (r * inner + i) * d;
                for j in 0..d {
                    data[base + j] += sv[r * d + j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        self.push(Tensor::new(shape, data), Op::AddRows { x, s, inner }, rg)
    }

    /// `x[r, i, :] * s[r, :]` for `x` viewed as `[rows, inner, d]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let (rows, inner, d) = self.rows_dims(x, s);
        let (xv, sv) = (&self.value(x).data, &self.value(s).data);
        let mut data = xv.clone();
        for r in 0..rows {
            for i in 0..inner {
                let base = (r * inner + i) * d;
                for j in 0..d {
                    data[base + j] *= sv[r * d + j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        self.push(Tensor::new(shape, data), Op::MulRows { x, s, inner }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data.iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Scale(x, c), rg)
    }

    /// Normalizes over the last dim, without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let dim = *self.shape(x).last().expect("rank >= 1");
        let xv = &self.value(x).data;
        let rows = xv.len() / dim;
        let eps = T::of(1e-5);
        let inv_d = T::one() / T::of(dim as f64);
        let mut data = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                * inv_d;
            let is = T::one() / (var + eps).sqrt();
            for j in 0..dim {
                data[r * dim + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::LayerNorm { x, inv_std, dim }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(xv.len());
        let mut deriv = Vec::with_capacity(if rg { xv.len() } else { 0 });
        for &v in xv {
            let (y, d) = gelu_parts(v);
            data.push(y);
            if rg {
                deriv.push(d);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Gelu { x, deriv }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data
            .iter()
            .map(|&v| v / (T::one() + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Silu(x), rg)
    }

    /// Softmax over the last dim. `key_mask`, if given, is `[groups / repeat,
    /// last]` and masked-out keys get probability zero; group `g` uses mask
    /// row `g / repeat`.
    pub fn softmax(&mut self, x: Var, key_mask: Option<(&[bool], usize)>) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("rank >= 1");
        let rows_per_group = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let xv = &self.value(x).data;
        let rows = xv.len() / n;
        let mut data = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mask = key_mask.map(|(m, repeat)| {
                let group = r / rows_per_group;
                let mrow = group / repeat;
                &m[mrow * n..(mrow + 1) * n]
            });
            let keep = |j: usize| mask.is_none_or(|m| m[j]);
            let mut mx = T::neg_infinity();
            for j in 0..n {
                if keep(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            for j in 0..n {
                data[r * n + j] *= inv;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Softmax(x), rg)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), index.len(), "gather shape mismatch");
        let xv = &self.value(x).data;
        let data = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Gather { x, index }, rg)
    }

    /// Rows of `table [v, d]` selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let d = self.shape(table)[1];
        let tv = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        let shape = vec![ids.len(), d];
        self.push(Tensor::new(shape, data), Op::Embedding { table, ids }, rg)
    }

    /// Weighted sum over the middle dim of `x [b, l, d]`; `weights [b, l]`.
    pub fn pool(&mut self, x: Var, weights: Vec<T>) -> Var {
        let s = self.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        assert_eq!(weights.len(), b * l);
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); b * d];
        for bi in 0..b {
            for li in 0..l {
                let w = weights[bi * l + li];
                for j in 0..d {
                    data[bi * d + j] += w * xv[(bi * l + li) * d + j];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![b, d], data), Op::Pool { x, weights, l }, rg)
    }

    /// Columns `[start, start + cols)` of `x` viewed as `[rows, last]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, cols: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        let last = *shape.last().expect("rank >= 1");
        assert!(start + cols <= last);
        let xv = &self.value(x).data;
        let rows = xv.len() / last;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * last + start..r * last + start + cols]);
        }
        *shape.last_mut().expect("rank >= 1") = cols;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::SliceCols { x, start, cols }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), self.value(x).len(), "reshape size mismatch");
        let data = self.value(x).data.clone();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Reshape(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Rc<Vec<T>>) -> Var {
        let pv = &self.value(pred).data;
        assert_eq!(pv.len(), target.len(), "mse size mismatch");
        let sum = pv
            .iter()
            .zip(target.iter())
            .fold(T::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
        let v = sum / T::of(pv.len() as f64);
        let rg = self.rg(pred);
        self.push(Tensor::scalar(v), Op::Mse { pred, target }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(i, &gout, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(gout);
            }
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                dims,
                shared_b,
            } => {
                let [g, m, k, n] = *dims;
                let (rsa, csa) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if let Some(ga) = self.acc(grads, *a) {
                    for gi in 0..g {
                        let boff = if *shared_b { 0 } else { gi * k * n };
                        // dA_op[i, p] = sum_j dC[i, j] * B_op[p, j]
                        // SAFETY: offsets stay inside the buffers; ga is distinct.
                        unsafe {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                gout.as_ptr().add(gi * m * n),
                                n as isize,
                                1,
                                bv.as_ptr().add(boff),
                                csb,
                                rsb,
                                T::one(),
                                ga.as_mut_ptr().add(gi * m * k),
                                rsa,
                                csa,
                            );
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for gi in 0..g {
                        let boff = if *shared_b { 0 } else { gi * k * n };
                        // dB_op[p, j] = sum_i A_op[i, p] * dC[i, j]
                        // SAFETY: as above.
                        unsafe {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                av.as_ptr().add(gi * m * k),
                                csa,
                                rsa,
                                gout.as_ptr().add(gi * m * n),
                                n as isize,
                                1,
                                T::one(),
                                gb.as_mut_ptr().add(boff),
                                rsb,
                                csb,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(gout).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddTiled(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gout).for_each(|(x, &y)| *x += y);
                }
                if let Some(g) = self.acc(grads, *b) {
                    let nb = g.len();
                    for chunk in gout.chunks_exact(nb) {
                        g.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(g) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        g[j] += gout[j] * bv[j];
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        g[j] += gout[j] * av[j];
                    }
                }
            }
            Op::AddRows { x, s, inner } => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b);
                }
                let d = self.shape(*s)[1];
                if let Some(g) = self.acc(grads, *s) {
                    let rows = g.len() / d;
                    for r in 0..rows {
                        for i in 0..*inner {
                            let base = (r * inner + i) * d;
                            for j in 0..d {
                                g[r * d + j] += gout[base + j];
                            }
                        }
                    }
                }
            }
            Op::MulRows { x, s, inner } => {
                let d = self.shape(*s)[1];
                let (xv, sv) = (&self.value(*x).data, &self.value(*s).data);
                let rows = sv.len() / d;
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..rows {
                        for i in 0..*inner {
                            let base = (r * inner + i) * d;
                            for j in 0..d {
                                g[base + j] += gout[base + j] * sv[r * d + j];
                            }
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *s) {
                    for r in 0..rows {
                        for i in 0..*inner {
                            let base = (r * inner + i) * d;
                            for j in 0..d {
                                g[r * d + j] += gout[base + j] * xv[base + j];
                            }
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b * *c);
                }
            }
            Op::LayerNorm { x, inv_std, dim } => {
                let y = &node.value.data;
                let d = *dim;
                let inv_d = T::one() / T::of(d as f64);
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gy = &gout[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mean_g = gy.iter().fold(T::zero(), |a, &b| a + b) * inv_d;
                        let mean_gy = gy
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |a, (&p, &q)| a + p * q)
                            * inv_d;
                        for j in 0..d {
                            g[r * d + j] += is * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu { x, deriv } => {
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        g[j] += gout[j] * deriv[j];
                    }
                }
            }
            Op::Silu(x) => {
                let xv = &self.value(*x).data;
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        let s = T::one() / (T::one() + (-xv[j]).exp());
                        g[j] += gout[j] * s * (T::one() + xv[j] * (T::one() - s));
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let n = *node.value.shape.last().expect("rank >= 1");
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (o, &src) in index.iter().enumerate() {
                        g[src] += gout[o];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(g) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gout[r * d + j];
                        }
                    }
                }
            }
            Op::Pool { x, weights, l } => {
                let d = *node.value.shape.last().expect("rank 2");
                if let Some(g) = self.acc(grads, *x) {
                    let b = weights.len() / l;
                    for bi in 0..b {
                        for li in 0..*l {
                            let w = weights[bi * l + li];
                            for j in 0..d {
                                g[(bi * l + li) * d + j] += w * gout[bi * d + j];
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start, cols } => {
                let last = *self.shape(*x).last().expect("rank >= 1");
                if let Some(g) = self.acc(grads, *x) {
                    let rows = g.len() / last;
                    for r in 0..rows {
                        for j in 0..*cols {
                            g[r * last + start + j] += gout[r * cols + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Mse { pred, target } => {
                let pv = &self.value(*pred).data;
                let c = gout[0] * T::of(2.0 / pv.len() as f64);
                if let Some(g) = self.acc(grads, *pred) {
                    for j in 0..g.len() {
                        g[j] += c * (pv[j] - target[j]);
                    }
                }
            }
        }
    }
}


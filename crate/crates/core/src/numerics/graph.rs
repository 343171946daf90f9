//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates parameter gradients into a [`ParamStore`]. A graph is
//! built per training step and dropped afterwards.
//!
//! All tensors on the tape are matrices `[rows × cols]`; scalars are
//! `[1 × 1]`. There is no implicit broadcasting: bias addition and row
//! scaling are explicit ops.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Cosines with an operand norm below this are defined as 0.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse row pooling: `out[g] = Σ w · x[r]` over `groups[g] = [(r, w), …]`.
#[derive(Clone, Debug)]
pub struct Pooling<T> {
    pub groups: Vec<Vec<(usize, T)>>,
}

/// Layout of a batch of padded sequences flattened to `seqs · len` rows.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub seqs: usize,
    pub len: usize,
    /// `false` for padding rows.
    pub valid: Vec<bool>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    RowDot(Var, Var),
    RowCosine(Var, Var),
    RowScale(Var, Var),
    Pool(Var, Rc<Pooling<T>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<SeqLayout>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
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

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = !store.is_frozen(id);
        let v = self.push(store.value(id).clone(), Op::Param(id), needs);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dims {k} vs {}", bv.rows());
        let mut out = vec![T::zero(); n * m];
        gemm_nn(av.data(), bv.data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[n, m], out).unwrap(), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_nt inner dims {k} vs {}", bv.cols());
        let mut out = vec![T::zero(); n * m];
        gemm_nt(av.data(), bv.data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[n, m], out).unwrap(), Op::MatMulNT(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a constant of the same shape (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::MulConst(a, c), ng)
    }

    /// `x[n×m] + b[1×m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        assert_eq!(bv.len(), m, "bias width mismatch");
        let mut t = xv.clone();
        for r in 0..t.rows() {
            for (o, &bb) in t.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddBias(x, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.map(a, |x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.map(a, |x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// Smallest non-zero `|x|` over the inputs of every ReLU that carries
    /// gradient; infinite without one. Exact zeros are the padding rows.
    pub fn relu_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                if !node.needs_grad {
                    continue;
                }
                for &x in self.nodes[a.0].value.data() {
                    let x = x.as_f64().abs();
                    if x > 0.0 {
                        m = m.min(x);
                    }
                }
            }
        }
        m
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.map(a, softplus);
        let ng = self.ng(a);
        self.push(t, Op::Softplus(a), ng)
    }

    /// Sum of all entries as a `[1 × 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let m = tv.cols();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(&[idx.len(), m], out).unwrap();
        let ng = self.ng(table);
        self.push(t, Op::Gather(table, idx.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat row mismatch");
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(&[n, total], out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let mut out = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            let row = av.row(r);
            out.extend(cols.iter().map(|&c| row[c]));
        }
        let t = Tensor::new(&[n, cols.len()], out).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::SelectCols(a, cols.to_vec()), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// `[n×1]` of row-wise inner products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let out = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        let t = Tensor::new(&[av.rows(), 1], out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::RowDot(a, b), ng)
    }

    /// `[n×1]` of row-wise cosine similarities; 0 when either norm is
    /// below [`COSINE_NORM_FLOOR`].
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_cosine shape mismatch");
        let out = (0..av.rows()).map(|r| cosine(av.row(r), bv.row(r))).collect();
        let t = Tensor::new(&[av.rows(), 1], out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::RowCosine(a, b), ng)
    }

    /// `x[n×m]` with row `r` multiplied by `s[r, 0]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.len(), xv.rows(), "row_scale needs one factor per row");
        let mut t = xv.clone();
        for r in 0..t.rows() {
            let f = sv.data()[r];
            t.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(t, Op::RowScale(x, s), ng)
    }

    pub fn pool(&mut self, x: Var, pooling: Rc<Pooling<T>>) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let mut out = vec![T::zero(); pooling.groups.len() * m];
        for (g, members) in pooling.groups.iter().enumerate() {
            let orow = &mut out[g * m..(g + 1) * m];
            for &(r, w) in members {
                for (o, &v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += w * v;
                }
            }
        }
        let t = Tensor::new(&[pooling.groups.len(), m], out).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Pool(x, pooling), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(gv.len(), m);
        let mut xhat = vec![T::zero(); n * m];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * m];
        let inv_m = T::one() / T::of(m as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_m;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_m;
            let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mu) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::new(&[n, m], out).unwrap(),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head causal self-attention over `layout.seqs` sequences of
    /// `layout.len` rows each. Position `t` attends to valid positions
    /// `s ≤ t` of its own sequence; a row with no valid key yields zeros.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<SeqLayout>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(heads >= 1 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let (b, l) = (layout.seqs, layout.len);
        assert_eq!(qv.rows(), b * l);
        let dh = d / heads;
        let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); b * l * d];
        let mut probs = vec![T::zero(); b * heads * l * l];
        let mut scores = vec![T::zero(); l];
        for s in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..l {
                    let qrow = &qv.row(s * l + t)[off..off + dh];
                    let mut any = false;
                    let mut mx = T::neg_infinity();
                    for u in 0..=t {
                        if !layout.valid[s * l + u] {
                            continue;
                        }
                        let sc = dot(qrow, &kv.row(s * l + u)[off..off + dh]) * inv_sqrt;
                        scores[u] = sc;
                        mx = mx.max(sc);
                        any = true;
                    }
                    if !any {
                        continue;
                    }
                    let pbase = ((s * heads + h) * l + t) * l;
                    let mut z = T::zero();
                    for u in 0..=t {
                        if layout.valid[s * l + u] {
                            let e = (scores[u] - mx).exp();
                            probs[pbase + u] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(s * l + t) * d + off..(s * l + t) * d + off + dh];
                    for u in 0..=t {
                        if !layout.valid[s * l + u] {
                            continue;
                        }
                        let p = probs[pbase + u] / z;
                        probs[pbase + u] = p;
                        for (o, &x) in orow.iter_mut().zip(&vv.row(s * l + u)[off..off + dh]) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::new(&[b * l, d], out).unwrap(),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Accumulate `d loss / d θ` into `store` for every parameter reached.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) {
        self.backward_filtered(loss, store, |_| true);
    }

    /// As [`Graph::backward`], but only parameters accepted by `keep`
    /// receive gradient.
    pub fn backward_filtered(
        &self,
        loss: Var,
        store: &mut ParamStore<T>,
        keep: impl Fn(ParamId) -> bool,
    ) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, store, &keep);
        }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.ng(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut()
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
        keep: &impl Fn(ParamId) -> bool,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if keep(*id) {
                    store.grad_mut(*id).add_assign(g);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(g.data(), bv.data(), ga.data_mut(), n, m, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(av.data(), g.data(), gb.data_mut(), n, k, m);
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nn(g.data(), bv.data(), ga.data_mut(), n, m, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(g.data(), av.data(), gb.data_mut(), n, m, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let m = g.cols();
                    let gbd = gb.data_mut();
                    for r in 0..g.rows() {
                        for c in 0..m {
                            gbd[c] += g.data()[r * m + c];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += x * *s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &inp) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        // subgradient 0 at the kink
                        if inp > T::zero() {
                            *o += x;
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &inp) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += x * sigmoid(inp);
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Gather(table, idx) => {
                if let Some(gt) = self.acc(grads, *table) {
                    let m = g.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &x) in gt.row_mut(i).iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..g.rows() {
                            for (o, &x) in gp
                                .row_mut(r)
                                .iter_mut()
                                .zip(&g.data()[r * total + off..r * total + off + w])
                            {
                                *o += x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SelectCols(a, cols) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.rows() {
                        let grow = g.row(r).to_vec();
                        let arow = ga.row_mut(r);
                        for (j, &c) in cols.iter().enumerate() {
                            arow[c] += grow[j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += yr[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = av.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..av.rows() {
                        let s = g.data()[r];
                        for c in 0..m {
                            ga.data_mut()[r * m + c] += s * bv.data()[r * m + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..av.rows() {
                        let s = g.data()[r];
                        for c in 0..m {
                            gb.data_mut()[r * m + c] += s * av.data()[r * m + c];
                        }
                    }
                }
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cos = &node.value;
                let floor = T::of(COSINE_NORM_FLOOR);
                for r in 0..av.rows() {
                    let (ar, br) = (av.row(r), bv.row(r));
                    let (na, nb) = (norm(ar), norm(br));
                    if na < floor || nb < floor {
                        continue;
                    }
                    let s = g.data()[r];
                    let c = cos.data()[r];
                    // ∂cos/∂a = b/(|a||b|) − cos·a/|a|²
                    if let Some(ga) = self.acc(grads, *a) {
                        for (i, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += s * (br[i] / (na * nb) - c * ar[i] / (na * na));
                        }
                    }
                    if let Some(gb) = self.acc(grads, *b) {
                        for (i, o) in gb.row_mut(r).iter_mut().enumerate() {
                            *o += s * (ar[i] / (na * nb) - c * br[i] / (nb * nb));
                        }
                    }
                }
            }
            Op::RowScale(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..xv.rows() {
                        let f = sv.data()[r];
                        for (o, &gg) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += gg * f;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for r in 0..xv.rows() {
                        gs.data_mut()[r] += dot(g.row(r), xv.row(r));
                    }
                }
            }
            Op::Pool(x, pooling) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (gi, members) in pooling.groups.iter().enumerate() {
                        let grow = g.row(gi);
                        for &(r, w) in members {
                            for (o, &gg) in gx.row_mut(r).iter_mut().zip(grow) {
                                *o += w * gg;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let m = g.cols();
                let n = g.rows();
                let gv = self.value(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..n {
                        for c in 0..m {
                            gg.data_mut()[c] += g.data()[r * m + c] * xhat[r * m + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for r in 0..n {
                        for c in 0..m {
                            gb.data_mut()[c] += g.data()[r * m + c];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_m = T::one() / T::of(m as f64);
                    for r in 0..n {
                        let dxhat: Vec<T> = (0..m).map(|c| g.data()[r * m + c] * gv.data()[c]).collect();
                        let xh = &xhat[r * m..(r + 1) * m];
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_m;
                        let mean_dx = dot(&dxhat, xh) * inv_m;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                self.backprop_attention(*q, *k, *v, *heads, layout, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &SeqLayout,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let (b, l) = (layout.seqs, layout.len);
        let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); b * l * d];
        let mut dk = vec![T::zero(); b * l * d];
        let mut dv = vec![T::zero(); b * l * d];
        let mut dp = vec![T::zero(); l];
        for s in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..l {
                    let pbase = ((s * heads + h) * l + t) * l;
                    let grow = &g.row(s * l + t)[off..off + dh];
                    let mut inner = T::zero();
                    for u in 0..=t {
                        if !layout.valid[s * l + u] {
                            dp[u] = T::zero();
                            continue;
                        }
                        let p = probs[pbase + u];
                        let vrow = &vv.row(s * l + u)[off..off + dh];
                        dp[u] = dot(grow, vrow);
                        inner += p * dp[u];
                        let dvrow = &mut dv[(s * l + u) * d + off..(s * l + u) * d + off + dh];
                        for (o, &gg) in dvrow.iter_mut().zip(grow) {
                            *o += p * gg;
                        }
                    }
                    let qrow = &qv.row(s * l + t)[off..off + dh];
                    for u in 0..=t {
                        if !layout.valid[s * l + u] {
                            continue;
                        }
                        let ds = probs[pbase + u] * (dp[u] - inner) * inv_sqrt;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = &kv.row(s * l + u)[off..off + dh];
                        let dqrow = &mut dq[(s * l + t) * d + off..(s * l + t) * d + off + dh];
                        for (o, &kk) in dqrow.iter_mut().zip(krow) {
                            *o += ds * kk;
                        }
                        let dkrow = &mut dk[(s * l + u) * d + off..(s * l + u) * d + off + dh];
                        for (o, &qq) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * qq;
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                for (o, x) in gv.data_mut().iter_mut().zip(buf) {
                    *o += x;
                }
            }
        }
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity with the zero-norm convention of [`COSINE_NORM_FLOOR`].
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    let floor = T::of(COSINE_NORM_FLOOR);
    if na < floor || nb < floor {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

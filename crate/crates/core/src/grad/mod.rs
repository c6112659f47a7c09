//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Graph`] evaluates each op eagerly and records what its backward pass
//! needs. [`Graph::backward`] consumes the tape once and returns the
//! gradient of a scalar loss for every parameter leaf.

mod check;
mod params;

pub use check::{check_gradients, central_difference, rel_err, GradCase, GradReport};
pub use params::{ParamId, ParamStore};

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::backbone::window::{attention_backward, attention_forward, AttentionLayout};
use crate::error::{Error, Result};
use crate::numerics::{
    self, conv2d_backward, conv2d_into, depthwise_backward, depthwise_into, gemm_nn, gemm_nt,
    gemm_tn, moments, softmax_in_place, Activation,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Arc<Vec<T>>),
    Scale(Var, T),
    Act(Var, Activation),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: numerics::conv::ConvDims,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        dims: numerics::conv::ConvDims,
    },
    Transpose(Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Arc<Vec<Option<usize>>>,
    },
    ConcatCols(Var, Var),
    MeanRows(Var),
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Arc<Tensor<T>>,
    },
    SumAll(Var),
    Project {
        x: Var,
        weights: Arc<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to parameter leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Single-use computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

macro_rules! ensure_shape {
    ($cond:expr, $op:expr, $a:expr, $b:expr) => {
        if !$cond {
            return Err(Error::shape($op, $a, $b));
        }
    };
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        value.debug_check_finite("graph op");
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.require(name)?;
        Ok(self.param(store, id))
    }

    /// `x[N×I]·w[I×O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure_shape!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0],
            "linear",
            &xs,
            &ws
        );
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            ensure_shape!(bv.len() == o, "linear bias", &ws, bv.shape());
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, n, i, o);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = numerics::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, mul: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rv = self.value(r);
        ensure_shape!(
            xs.len() == 2 && rv.len() == xs[1],
            "row broadcast",
            &xs,
            rv.shape()
        );
        let c = xs[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(rv.data()) {
                if mul {
                    *o *= b;
                } else {
                    *o += b;
                }
            }
        }
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(Tensor::from_vec(&xs, out), op, &[x, r]))
    }

    /// Adds a length-`C` vector to every row of `x[N×C]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, false)
    }

    /// Multiplies every row of `x[N×C]` element-wise by a length-`C` vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, true)
    }

    /// Multiplies row `i` of `x[N×C]` by the constant `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Arc<Vec<T>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure_shape!(xs.len() == 2 && s.len() == xs[0], "scale_rows", &xs, &[s.len()]);
        let c = xs[1];
        let mut out = self.value(x).data().to_vec();
        for (row, &f) in out.chunks_mut(c).zip(s.iter()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(Tensor::from_vec(&xs, out), Op::ScaleRows(x, s), &[x]))
    }

    pub fn scale(&mut self, x: Var, f: T) -> Var {
        let y = self.value(x).map(|v| v * f);
        self.push(y, Op::Scale(x, f), &[x])
    }

    pub fn act(&mut self, x: Var, f: Activation) -> Var {
        let y = numerics::activation(self.value(x), f);
        self.push(y, Op::Act(x, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Relu)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure_shape!(xs.len() == 2, "softmax_rows", &xs, &[0, 0]);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(xs[1]) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_vec(&xs, out), Op::SoftmaxRows(x), &[x]))
    }

    /// Normalizes each row of `x[N×C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        ensure_shape!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            "layer_norm",
            &xs,
            self.shape(gamma)
        );
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let src = &xv[r * c..(r + 1) * c];
            let (mean, iv) = moments(src, eps);
            inv[r] = iv;
            for j in 0..c {
                let xh = (src[j] - mean) * iv;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv,
        };
        Ok(self.push(Tensor::from_vec(&xs, out), op, &[x, gamma, beta]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims = numerics::conv::check_conv(self.value(x), self.value(w), self.value(b), false)?;
        let mut out = vec![T::zero(); dims.cout * dims.h * dims.w];
        conv2d_into(
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
            dims,
            &mut out,
        );
        let y = Tensor::from_vec(&[dims.cout, dims.h, dims.w], out);
        Ok(self.push(y, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims = numerics::conv::check_conv(self.value(x), self.value(w), self.value(b), true)?;
        let mut out = vec![T::zero(); dims.cout * dims.h * dims.w];
        depthwise_into(
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
            dims,
            &mut out,
        );
        let y = Tensor::from_vec(&[dims.cout, dims.h, dims.w], out);
        Ok(self.push(y, Op::Depthwise { x, w, b, dims }, &[x, w, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        ensure_shape!(self.value(x).ndim() == 2, "transpose", self.shape(x), &[0, 0]);
        let y = self.value(x).transpose2d();
        Ok(self.push(y, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// `C×H×W` map to `H·W×C` tokens.
    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure_shape!(s.len() == 3, "chw_to_tokens", &s, &[0, 0, 0]);
        let flat = self.reshape(x, &[s[0], s[1] * s[2]])?;
        self.transpose(flat)
    }

    /// `H·W×C` tokens to a `C×H×W` map.
    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.shape(x)[1];
        let t = self.transpose(x)?;
        self.reshape(t, &[c, h, w])
    }

    /// Row gather from `x[N×C]`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure_shape!(xs.len() == 2, "gather_rows", &xs, &[0, 0]);
        let c = xs[1];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); idx.len() * c];
        for (row, i) in out.chunks_mut(c).zip(idx.iter()) {
            if let Some(i) = *i {
                if i >= xs[0] {
                    return Err(Error::contract(format!(
                        "gather index {i} out of range for {} rows",
                        xs[0]
                    )));
                }
                row.copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let y = Tensor::from_vec(&[idx.len(), c], out);
        Ok(self.push(y, Op::GatherRows { x, idx }, &[x]))
    }

    pub fn gather_rows_dense(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.gather_rows(x, Arc::new(idx.iter().map(|&i| Some(i)).collect()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure_shape!(
            sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0],
            "concat_cols",
            &sa,
            &sb
        );
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&self.value(a).data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b).data()[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(Tensor::from_vec(&[n, ca + cb], out), Op::ConcatCols(a, b), &[a, b]))
    }

    /// Column means of `x[N×C]` as a `1×C` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure_shape!(xs.len() == 2, "mean_rows", &xs, &[0, 0]);
        let (n, c) = (xs[0], xs[1]);
        let mut out = vec![T::zero(); c];
        for row in self.value(x).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(n);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::from_vec(&[1, c], out), Op::MeanRows(x), &[x]))
    }

    /// Windowed multi-head attention over rows already in window order.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let rows = layout.n_windows * layout.tokens();
        let want = [rows, layout.channels()];
        for var in [q, k, v] {
            ensure_shape!(self.shape(var) == want, "window_attention", self.shape(var), &want);
        }
        let want_t = [layout.table_rows(), layout.heads];
        ensure_shape!(
            self.shape(table) == want_t,
            "window_attention bias table",
            self.shape(table),
            &want_t
        );
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(table).data(),
            &layout,
        );
        let y = Tensor::from_vec(&want, out);
        let op = Op::WindowAttention {
            q,
            k,
            v,
            table,
            layout,
            probs,
        };
        Ok(self.push(y, op, &[q, k, v, table]))
    }

    /// Attention probabilities saved by a window-attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::WindowAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let pv = self.value(pred);
        ensure_shape!(pv.shape() == target.shape(), "l1_loss", pv.shape(), target.shape());
        let n = T::from_usize_lossy(pv.len());
        let s: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1 { pred, target }, &[pred]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// `Σ x ⊙ weights` for a constant weight tensor of the same shape.
    pub fn project(&mut self, x: Var, weights: Arc<Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        ensure_shape!(xv.shape() == weights.shape(), "project", xv.shape(), weights.shape());
        let s: T = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Project { x, weights }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.map.insert(id, gy);
                continue;
            }
            self.backward_node(idx, &gy, &mut grads);
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let g = gy.data();

        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (n, i, o) = (xs[0], xs[1], ws[1]);
                if needs(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    gemm_nt(g, val(*w).data(), &mut gx, n, o, i);
                    accumulate(grads, *x, xs, gx);
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); i * o];
                    gemm_tn(val(*x).data(), g, &mut gw, i, n, o);
                    accumulate(grads, *w, ws, gw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        accumulate(grads, *b, val(*b).shape(), col_sums(g, o));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(g, val(*b).data(), &mut ga, m, n, k);
                    accumulate(grads, *a, sa, ga);
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(val(*a).data(), g, &mut gb, k, m, n);
                    accumulate(grads, *b, sb, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, gy.shape(), g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga = g.iter().zip(val(*b).data()).map(|(&p, &q)| p * q).collect();
                    accumulate(grads, *a, gy.shape(), ga);
                }
                if needs(*b) {
                    let gb = g.iter().zip(val(*a).data()).map(|(&p, &q)| p * q).collect();
                    accumulate(grads, *b, gy.shape(), gb);
                }
            }
            Op::AddRow(x, r) => {
                let c = gy.shape()[1];
                if needs(*x) {
                    accumulate(grads, *x, gy.shape(), g.to_vec());
                }
                if needs(*r) {
                    accumulate(grads, *r, val(*r).shape(), col_sums(g, c));
                }
            }
            Op::MulRow(x, r) => {
                let c = gy.shape()[1];
                let rv = val(*r).data();
                if needs(*x) {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_mut(c) {
                        for (v, &s) in row.iter_mut().zip(rv) {
                            *v *= s;
                        }
                    }
                    accumulate(grads, *x, gy.shape(), gx);
                }
                if needs(*r) {
                    let mut gr = vec![T::zero(); c];
                    for (grow, xrow) in g.chunks(c).zip(val(*x).data().chunks(c)) {
                        for j in 0..c {
                            gr[j] += grow[j] * xrow[j];
                        }
                    }
                    accumulate(grads, *r, val(*r).shape(), gr);
                }
            }
            Op::ScaleRows(x, s) => {
                let c = gy.shape()[1];
                let mut gx = g.to_vec();
                for (row, &f) in gx.chunks_mut(c).zip(s.iter()) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
                accumulate(grads, *x, gy.shape(), gx);
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, gy.shape(), g.iter().map(|&v| v * *f).collect());
            }
            Op::Act(x, f) => {
                let xv = val(*x).data();
                let yv = node.value.data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .zip(yv)
                    .map(|((&gv, &xi), &yi)| gv * f.derivative(xi, yi))
                    .collect();
                accumulate(grads, *x, gy.shape(), gx);
            }
            Op::SoftmaxRows(x) => {
                let c = gy.shape()[1];
                let mut gx = vec![T::zero(); g.len()];
                for ((dst, grow), yrow) in gx
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(node.value.data().chunks(c))
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, gy.shape(), gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let c = *gy.shape().last().unwrap();
                let gam = val(*gamma).data();
                let cn = T::from_usize_lossy(c);
                if needs(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..inv.len() {
                        let grow = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let d = grow[j] * gam[j];
                            s1 += d;
                            s2 += d * xh[j];
                        }
                        for j in 0..c {
                            let d = grow[j] * gam[j];
                            gx[r * c + j] = inv[r] / cn * (cn * d - s1 - xh[j] * s2);
                        }
                    }
                    accumulate(grads, *x, gy.shape(), gx);
                }
                if needs(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (grow, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * xh[j];
                        }
                    }
                    accumulate(grads, *gamma, val(*gamma).shape(), gg);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, val(*beta).shape(), col_sums(g, c));
                }
            }
            Op::Conv2d { x, w, b, dims } | Op::Depthwise { x, w, b, dims } => {
                let mut gx = needs(*x).then(|| vec![T::zero(); val(*x).len()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); val(*w).len()]);
                let mut gb = needs(*b).then(|| vec![T::zero(); val(*b).len()]);
                let backward = if matches!(node.op, Op::Conv2d { .. }) {
                    conv2d_backward
                } else {
                    depthwise_backward
                };
                backward(
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    *dims,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, val(*w).shape(), gw);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, val(*b).shape(), gb);
                }
            }
            Op::Transpose(x) => {
                accumulate(grads, *x, val(*x).shape(), gy.transpose2d().into_data());
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, val(*x).shape(), g.to_vec());
            }
            Op::GatherRows { x, idx } => {
                let c = gy.shape()[1];
                let mut gx = vec![T::zero(); val(*x).len()];
                for (grow, i) in g.chunks(c).zip(idx.iter()) {
                    if let Some(i) = *i {
                        for (d, &v) in gx[i * c..(i + 1) * c].iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *x, val(*x).shape(), gx);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).shape()[1], val(*b).shape()[1]);
                let n = gy.shape()[0];
                if needs(*a) {
                    let ga = (0..n)
                        .flat_map(|r| g[r * (ca + cb)..r * (ca + cb) + ca].iter().copied())
                        .collect();
                    accumulate(grads, *a, val(*a).shape(), ga);
                }
                if needs(*b) {
                    let gb = (0..n)
                        .flat_map(|r| g[r * (ca + cb) + ca..(r + 1) * (ca + cb)].iter().copied())
                        .collect();
                    accumulate(grads, *b, val(*b).shape(), gb);
                }
            }
            Op::MeanRows(x) => {
                let xs = val(*x).shape();
                let inv = T::one() / T::from_usize_lossy(xs[0]);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let gx = (0..xs[0]).flat_map(|_| row.iter().copied()).collect();
                accumulate(grads, *x, xs, gx);
            }
            Op::WindowAttention {
                q,
                k,
                v,
                table,
                layout,
                probs,
            } => {
                let ag = attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g,
                    layout,
                );
                for (var, gv) in [(*q, ag.q), (*k, ag.k), (*v, ag.v), (*table, ag.table)] {
                    if needs(var) {
                        accumulate(grads, var, val(var).shape(), gv);
                    }
                }
            }
            Op::L1 { pred, target } => {
                let pv = val(*pred).data();
                let scale = g[0] / T::from_usize_lossy(pv.len());
                let gp = pv
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let d = p - t;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *pred, val(*pred).shape(), gp);
            }
            Op::SumAll(x) => {
                accumulate(grads, *x, val(*x).shape(), vec![g[0]; val(*x).len()]);
            }
            Op::Project { x, weights } => {
                let gx = weights.data().iter().map(|&w| w * g[0]).collect();
                accumulate(grads, *x, val(*x).shape(), gx);
            }
        }
    }
}

fn col_sums<T: Scalar>(g: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for row in g.chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], g: Vec<T>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_vec(shape, g)),
    }
}

//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are borrowed from the caller's store and never copied; using the same
//! parameter twice yields the same node, so gradients of aliased (shared)
//! parameters are summed automatically.

use rand::Rng;

use super::kernels;
use super::{MatmulPlan, Tensor};
use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::parallel::{self, ExecMode};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One independent attention problem inside a packed attention call.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub q_start: usize,
    pub k_start: usize,
    /// `[q_len × k_len]`; its dimensions give the block extents.
    pub mask: AttentionMask,
}

enum Value<F> {
    Param(usize),
    Owned(Tensor<F>),
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<F>),
    Scale(Var, F),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    Transpose(Var),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttentionBlock>,
        probs: Vec<Vec<F>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: u32,
        smoothing: F,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Operation tape over tensors of element type `F`.
pub struct Graph<'p, F: Scalar> {
    params: &'p [Tensor<F>],
    param_vars: Vec<Option<Var>>,
    params_need_grad: bool,
    nodes: Vec<Node<F>>,
    mode: ExecMode,
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A tape over `params`; gradients are tracked for them when
    /// `track_params` is set.
    pub fn new(params: &'p [Tensor<F>], track_params: bool) -> Self {
        Graph {
            params,
            param_vars: vec![None; params.len()],
            params_need_grad: track_params,
            nodes: Vec::new(),
            mode: ExecMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// The node for parameter `index`, created on first use.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Leaf,
            needs_grad: self.params_need_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.input(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Param(i) => &self.params[*i],
            Value::Owned(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_with(self.mode, self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for matrices `a [m,k]` and `b [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(format!(
                "matmul_nt: cannot multiply {sa:?} by the transpose of {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::zero(); m * n];
        kernels::gemm_nt(self.mode, m, k, n, av.data(), bv.data(), &mut out);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `[d]`-sized vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let d = xv.cols();
        if rv.numel() != d {
            return Err(Error::Shape(format!(
                "add_row: row of shape {:?} does not match width of {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_exact_mut(d) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::of_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(&[x]);
        self.push(out, Op::MulConst(x, mask), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        data.chunks_exact_mut(d).for_each(kernels::softmax_in_place);
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} needs gain/bias of size {d}",
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let mut out = vec![F::zero(); xv.numel()];
        let mut mean = vec![F::zero(); rows];
        let mut rstd = vec![F::zero(); rows];
        kernels::layer_norm_rows(
            xv.data(),
            d,
            gv.data(),
            bv.data(),
            F::of_f64(eps),
            &mut out,
            Some(&mut mean),
            Some(&mut rstd),
        );
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            ng,
        ))
    }

    /// Rows of `table` selected by `ids`, as a `[ids.len(), D]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be [V, D], got {:?}",
                tv.shape()
            )));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Index(format!("token id {id} outside vocabulary of size {v}")));
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        let ng = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), d], data);
        let ng = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Shape(format!(
                "concat_rows: widths of {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::from_parts(vec![av.rows() + bv.rows(), av.cols()], data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    /// Packed multi-head scaled dot-product attention.
    ///
    /// `q` is `[Nq, d]`, `k` and `v` are `[Nk, d]`. Each block attends its
    /// query rows `q_start..q_start+mask.rows()` to key rows
    /// `k_start..k_start+mask.cols()`. Query rows outside every block are
    /// left at zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttentionBlock>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?} are incompatible",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        for b in &blocks {
            if b.q_start + b.mask.rows() > qv.rows() || b.k_start + b.mask.cols() > kv.rows() {
                return Err(Error::Shape("attention block exceeds its inputs".into()));
            }
            b.mask.validate()?;
        }
        let dh = d / heads;
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let results = parallel::map(self.mode, &blocks, |b| {
            let (mq, mk) = (b.mask.rows(), b.mask.cols());
            let qs = &qd[b.q_start * d..(b.q_start + mq) * d];
            let ks = &kd[b.k_start * d..(b.k_start + mk) * d];
            let vs = &vd[b.k_start * d..(b.k_start + mk) * d];
            let mut out = vec![F::zero(); mq * d];
            let mut probs = vec![F::zero(); heads * mq * mk];
            for (h, p) in probs.chunks_exact_mut(mq * mk.max(1)).enumerate().take(heads) {
                kernels::attend_head(qs, ks, vs, d, h * dh, dh, b.mask.allowed(), p, &mut out);
            }
            (out, probs)
        });
        let mut data = vec![F::zero(); qv.numel()];
        let mut probs = Vec::with_capacity(blocks.len());
        for (b, (out, p)) in blocks.iter().zip(results) {
            data[b.q_start * d..b.q_start * d + out.len()].copy_from_slice(&out);
            probs.push(p);
        }
        let out = Tensor::from_parts(qv.shape().to_vec(), data);
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            ng,
        ))
    }

    /// Sum over rows of the label-smoothed negative log-likelihood. Rows
    /// whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: u32,
        smoothing: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if lv.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows for {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if targets.iter().all(|&t| t == ignore) {
            return Err(Error::Contract("cross_entropy: every target is padding".into()));
        }
        let eps = F::of_f64(smoothing);
        let uniform = eps / F::of_f64(vocab as f64);
        let mut probs = lv.data().to_vec();
        let mut total = F::zero();
        for (row, (&t, p)) in targets.iter().zip(probs.chunks_exact_mut(vocab)).enumerate() {
            if t == ignore {
                continue;
            }
            if t as usize >= vocab {
                return Err(Error::Index(format!("target id {t} outside vocabulary of size {vocab}")));
            }
            let x = lv.row(row);
            let max = x.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = x.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            let mut loss = F::zero();
            for (c, &v) in x.iter().enumerate() {
                let logp = v - lse;
                let q = if c == t as usize { F::one() - eps + uniform } else { uniform };
                loss -= q * logp;
            }
            total += loss;
            kernels::softmax_in_place(p);
        }
        if !total.is_finite() {
            return Err(Error::Contract("cross_entropy produced a non-finite loss".into()));
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                smoothing: eps,
                probs,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Contract("backward from a non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(Var(i), &g, &mut grads);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| self.shape_of(n).to_vec()).collect(),
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn shape_of<'a>(&'a self, n: &'a Node<F>) -> &'a [usize] {
        match &n.value {
            Value::Param(i) => self.params[*i].shape(),
            Value::Owned(t) => t.shape(),
        }
    }

    fn backprop(&self, out: Var, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let mode = self.mode;
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
            f(buf);
        };
        match &self.nodes[out.0].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let plan = MatmulPlan::new(av.shape(), bv.shape()).expect("checked in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let offsets: Vec<_> = plan.offsets().collect();
                if needs(*a) {
                    acc(*a, &mut |ga| {
                        for (bi, &(ao, bo)) in offsets.iter().enumerate() {
                            kernels::gemm_nt(
                                mode,
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv.data()[bo..bo + k * n],
                                &mut ga[ao..ao + m * k],
                            );
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |gb| {
                        for (bi, &(ao, bo)) in offsets.iter().enumerate() {
                            kernels::gemm_tn(
                                mode,
                                m,
                                k,
                                n,
                                &av.data()[ao..ao + m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bo..bo + k * n],
                            );
                        }
                    });
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                acc(*a, &mut |ga| kernels::gemm(mode, m, n, k, g, bv.data(), ga));
                acc(*b, &mut |gb| kernels::gemm_tn(mode, m, n, k, g, av.data(), gb));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                let d = val(*row).numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks_exact(d) {
                        gr.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                });
            }
            Op::MulConst(x, mask) => acc(*x, &mut |gx| {
                for ((a, &b), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            }),
            Op::Scale(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s)),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *a += b;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += b * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = val(out);
                let d = y.cols();
                acc(*x, &mut |gx| {
                    for ((gr, yr), gor) in gx.chunks_exact_mut(d).zip(y.data().chunks_exact(d)).zip(g.chunks_exact(d)) {
                        let dotp = kernels::dot(yr, gor);
                        for ((a, &yv), &gv) in gr.iter_mut().zip(yr).zip(gor) {
                            *a += yv * (gv - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let d = xv.cols();
                let inv_d = F::one() / F::of_f64(d as f64);
                let xhat = |r: usize, c: usize| (xv.data()[r * d + c] - mean[r]) * rstd[r];
                acc(*x, &mut |gx| {
                    for r in 0..mean.len() {
                        let go = &g[r * d..(r + 1) * d];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for c in 0..d {
                            let dxh = go[c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xhat(r, c);
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for c in 0..d {
                            let dxh = go[c] * gv[c];
                            gx[r * d + c] += rstd[r] * (dxh - m1 - xhat(r, c) * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for r in 0..mean.len() {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat(r, c);
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for chunk in g.chunks_exact(d) {
                        gb.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gx[i * d..(i + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).numel();
                acc(*a, &mut |ga| ga.iter_mut().zip(&g[..split]).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(&g[split..]).for_each(|(x, &y)| *x += y));
            }
            Op::Transpose(x) => {
                let s = val(*x).shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let d = val(*q).cols();
                let heads = *heads;
                let dh = d / heads;
                let scale = F::one() / F::of_f64(dh as f64).sqrt();
                let items: Vec<(&AttentionBlock, &Vec<F>)> = blocks.iter().zip(probs).collect();
                let parts = parallel::map(mode, &items, |&(b, p)| {
                    attention_block_backward(b, p, qd, kd, vd, g, d, heads, dh, scale)
                });
                let gather = |idx: usize| -> Vec<(usize, &[F])> {
                    blocks
                        .iter()
                        .zip(&parts)
                        .map(|(b, part)| {
                            let start = if idx == 0 { b.q_start } else { b.k_start };
                            (start * d, part[idx].as_slice())
                        })
                        .collect()
                };
                for (which, var) in [(0usize, *q), (1, *k), (2, *v)] {
                    let pieces = gather(which);
                    acc(var, &mut |gv| {
                        for &(start, src) in &pieces {
                            gv[start..start + src.len()]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                smoothing,
                probs,
            } => {
                let vocab = val(*logits).cols();
                let uniform = *smoothing / F::of_f64(vocab as f64);
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..vocab {
                            let q = if c == t as usize {
                                F::one() - *smoothing + uniform
                            } else {
                                uniform
                            };
                            gl[r * vocab + c] += g[0] * (probs[r * vocab + c] - q);
                        }
                    }
                });
            }
        }
    }
}

/// Gradients of one attention block: `[dq, dk, dv]` for the block's rows.
#[allow(clippy::too_many_arguments)]
fn attention_block_backward<F: Scalar>(
    b: &AttentionBlock,
    probs: &[F],
    qd: &[F],
    kd: &[F],
    vd: &[F],
    g: &[F],
    d: usize,
    heads: usize,
    dh: usize,
    scale: F,
) -> [Vec<F>; 3] {
    let (mq, mk) = (b.mask.rows(), b.mask.cols());
    let qs = &qd[b.q_start * d..(b.q_start + mq) * d];
    let ks = &kd[b.k_start * d..(b.k_start + mk) * d];
    let vs = &vd[b.k_start * d..(b.k_start + mk) * d];
    let gs = &g[b.q_start * d..(b.q_start + mq) * d];
    let mut dq = vec![F::zero(); mq * d];
    let mut dk = vec![F::zero(); mk * d];
    let mut dv = vec![F::zero(); mk * d];
    let mut dp = vec![F::zero(); mk];
    for h in 0..heads {
        let col = h * dh;
        let p = &probs[h * mq * mk..(h + 1) * mq * mk];
        for i in 0..mq {
            let go = &gs[i * d + col..i * d + col + dh];
            let prow = &p[i * mk..(i + 1) * mk];
            let mut rowdot = F::zero();
            for j in 0..mk {
                dp[j] = if prow[j] == F::zero() {
                    F::zero()
                } else {
                    kernels::dot(go, &vs[j * d + col..j * d + col + dh])
                };
                rowdot += prow[j] * dp[j];
            }
            for j in 0..mk {
                let pij = prow[j];
                if pij == F::zero() {
                    continue;
                }
                let ds = pij * (dp[j] - rowdot) * scale;
                for c in 0..dh {
                    dq[i * d + col + c] += ds * ks[j * d + col + c];
                    dk[j * d + col + c] += ds * qs[i * d + col + c];
                    dv[j * d + col + c] += pij * go[c];
                }
            }
        }
    }
    [dq, dk, dv]
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<F>>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to a leaf; zero when the leaf does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient of parameter `index`, or `None` if it was never used.
    pub fn param(&self, index: usize) -> Option<Tensor<F>> {
        self.param_vars[index].map(|v| self.wrt(v))
    }

    /// Flat gradient buffers indexed by parameter; unused parameters get
    /// `None`.
    pub fn into_param_grads(mut self) -> Vec<Option<Vec<F>>> {
        self.param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grads[v.0].take()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_leaf_gradients, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn sum_gives_ones_and_half_square_gives_identity() {
        let p = rand_t(&[2, 3], 1);
        let mut g = Graph::new(&[], false);
        let pv = g.input(p.clone(), true);
        let s = g.sum(pv);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(pv).data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new(&[], false);
        let pv = g.input(p.clone(), true);
        let sq = g.mul(pv, pv).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.wrt(pv), p);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new(&[], false);
        let x = g.input(rand_t(&[2], 0), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut g = Graph::<f64>::new(&[], false);
        let a = g.input(rand_t(&[3], 2), true);
        let b = g.input(rand_t(&[3], 3), true);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = rand_t(&[3, 4], 10);
        let b = rand_t(&[4, 2], 11);
        let w = rand_t(&[3, 2], 12);
        let worst = check_leaf_gradients(&[a, b], |g, vars| {
            let c = g.matmul(vars[0], vars[1])?;
            let wv = g.constant(w.clone());
            let p = g.mul(c, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn duplicate_embedding_ids_accumulate() {
        let table = rand_t(&[4, 3], 20);
        let w = rand_t(&[5, 3], 21);
        let ids = [1u32, 3, 1, 1, 0];
        let worst = check_leaf_gradients(std::slice::from_ref(&table), |g, vars| {
            let e = g.embedding(vars[0], &ids)?;
            let wv = g.constant(w.clone());
            let p = g.mul(e, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(worst < 1e-6);

        // row 1 gradient is the sum of the weights at its three occurrences
        let mut g = Graph::new(&[], false);
        let t = g.input(table, true);
        let e = g.embedding(t, &ids).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(e, wv).unwrap();
        let s = g.sum(p);
        let grad = g.backward(s).unwrap().wrt(t);
        for c in 0..3 {
            let want = w.data()[c] + w.data()[6 + c] + w.data()[9 + c];
            assert!((grad.data()[3 + c] - want).abs() < 1e-12);
        }
        assert!(g.embedding(t, &[4]).is_err());
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!(rel_error(1.0, 1.0 + 1e-9) < 1e-8);
    }
}

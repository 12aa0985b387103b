use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        cols: usize,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
        dim: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    StopGradient,
    SmoothedNll {
        log_probs: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        eps: T,
        count: T,
    },
    Kl {
        log_p: Var,
        log_q: Var,
        mask: Vec<bool>,
        count: T,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn set(&mut self, id: ParamId, grad: Vec<T>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    /// Ids of parameters that received a gradient.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

/// GELU value and derivative at `x`.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let t = (c * (x + k * x * x * x)).tanh();
    let dt = (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (half * x * (one + t), half * (one + t) + half * x * dt)
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Parameters enter through [`Graph::param`]; asking for the same parameter
/// twice returns the same node, so every pass built on one graph reads one
/// shared parameter set.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on any node by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf that receives gradients but is not tied to a store.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product of `a[B×m×k]` with `b[B×k×n]`, or with `b[B×n×k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("batch_matmul {sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(shape_err!("batch_matmul {sa:?} x {sb:?}^T"));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(shape_err!("batch_matmul {sa:?} x {sb:?}"));
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    let bt = kernels::transpose(bi, n, k);
                    kernels::matmul_acc(ai, &bt, oi, m, k, n);
                } else {
                    kernels::matmul_acc(ai, bi, oi, m, k, n);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if self.value(bias).len() != cols {
            return Err(shape_err!("add_bias {sx:?} + {:?}", self.shape(bias)));
        }
        let mut out = self.value(x).data().to_vec();
        {
            let b = self.value(bias).data();
            for row in out.chunks_exact_mut(cols) {
                add_into(row, b);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddBias { x, bias, cols }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul {:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data: out }, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data: out }, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation. Smooth everywhere, unlike ReLU, so finite
    /// differences stay a valid oracle for whole-model gradients.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data: out }, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data: out }, Op::Exp(a), rg)
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(shape_err!("layer_norm width {cols} vs gain/bias"));
        }
        let rows = self.value(x).len() / cols;
        let mut out = vec![T::zero(); rows * cols];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            cols,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err!("embedding table must be 2-D, got {st:?}"));
        }
        let (v, dim) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(shape_err!("embedding lookup of zero ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        {
            let t = self.value(table).data();
            for &id in ids {
                let id = id as usize;
                if id >= v {
                    return Err(Error::Index(format!("token id {id} >= vocabulary {v}")));
                }
                out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.value(x).axis_split(axis)?;
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::softmax_strided(self.value(x).data(), &mut out, outer, n, inner);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, n, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.value(x).axis_split(axis)?;
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::log_softmax_strided(self.value(x).data(), &mut out, outer, n, inner);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, outer, n, inner }, rg))
    }

    /// Softmax over the key axis of attention scores `[B·H × T × S]`.
    ///
    /// Keys that are padding (`key_mask[b·S + s] == false`) or lie in the
    /// future of the query (when `causal`) get probability exactly 0.
    pub fn attention_softmax(
        &mut self,
        scores: Var,
        heads: usize,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(heads) {
            return Err(shape_err!("attention scores {s:?} with {heads} heads"));
        }
        let (bh, t_len, s_len) = (s[0], s[1], s[2]);
        if let Some(m) = key_mask {
            if m.len() != (bh / heads) * s_len {
                return Err(shape_err!("key mask length {} for scores {s:?}", m.len()));
            }
        }
        let x = self.value(scores).data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..bh * t_len {
            let b = r / t_len / heads;
            let t = r % t_len;
            let row = &x[r * s_len..(r + 1) * s_len];
            let orow = &mut out[r * s_len..(r + 1) * s_len];
            let allowed = |j: usize| (!causal || j <= t) && key_mask.is_none_or(|m| m[b * s_len + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    max = max.max(v);
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Softmax {
                x: scores,
                outer: bh * t_len,
                n: s_len,
                inner: 1,
            },
            rg,
        ))
    }

    /// `[B·T × H·d] → [B·H × T × d]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != batch * len || !sx[1].is_multiple_of(heads) {
            return Err(shape_err!("split_heads {sx:?} into b={batch} t={len} h={heads}"));
        }
        let d_model = sx[1];
        let head_dim = d_model / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let from = (b * len + t) * d_model + h * head_dim;
                    let to = ((b * heads + h) * len + t) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![batch * heads, len, head_dim], out)?,
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[0] != batch * heads {
            return Err(shape_err!("merge_heads {sx:?} with b={batch} h={heads}"));
        }
        let (len, head_dim) = (sx[1], sx[2]);
        let d_model = heads * head_dim;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let to = (b * len + t) * d_model + h * head_dim;
                    let from = ((b * heads + h) * len + t) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![batch * len, d_model], out)?,
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Inverted dropout; a rate of 0 returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f32>() < keep {
                    T::of(scale as f64)
                } else {
                    T::zero()
                }
            })
            .collect();
        let out: Vec<T> = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        let n = T::of(self.value(a).len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    /// Identity in the forward direction; blocks every gradient in backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean label-smoothed NLL over the rows of `log_probs[N×V]` where
    /// `mask` is true.
    pub fn smoothed_nll(&mut self, log_probs: Var, targets: &[u32], mask: &[bool], eps: T) -> Result<Var> {
        let s = self.shape(log_probs).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] != mask.len() {
            return Err(shape_err!(
                "smoothed_nll over {s:?} with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            ));
        }
        if !(eps >= T::zero() && eps < T::one()) {
            return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
        }
        let v = s[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("loss over zero tokens".into()));
        }
        let lp = self.value(log_probs).data();
        let mut total = T::zero();
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let t = t as usize;
            if t >= v {
                return Err(Error::Index(format!("target {t} >= vocabulary {v}")));
            }
            total += kernels::smoothed_nll_row(&lp[r * v..(r + 1) * v], t, eps);
        }
        let count = T::of(count as f64);
        let rg = self.rg(log_probs);
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::SmoothedNll {
                log_probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                eps,
                count,
            },
            rg,
        ))
    }

    /// Mean over masked rows of `KL(p_r || q_r)`, both given as
    /// log-probabilities `[N×V]`.
    pub fn kl_div(&mut self, log_p: Var, log_q: Var, mask: &[bool]) -> Result<Var> {
        let (sp, sq) = (self.shape(log_p).to_vec(), self.shape(log_q).to_vec());
        if sp != sq || sp.len() != 2 || sp[0] != mask.len() {
            return Err(shape_err!("kl_div {sp:?} vs {sq:?} with {} mask entries", mask.len()));
        }
        let v = sp[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("divergence over zero tokens".into()));
        }
        let (pv, qv) = (self.value(log_p).data(), self.value(log_q).data());
        let mut total = T::zero();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                total += kernels::kl_row_log(&pv[r * v..(r + 1) * v], &qv[r * v..(r + 1) * v]);
            }
        }
        let count = T::of(count as f64);
        let rg = self.rg(log_p) || self.rg(log_q);
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::Kl {
                log_p,
                log_q,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Returns gradients for every parameter the loss reaches; gradients of
    /// intermediate nodes stay queryable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut out = Gradients::<T>::default();
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].clone() {
                out.set(id, g);
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr, |$g:ident| $body:block) => {{
                let n = nodes[$v.0].value.len();
                let $g: &mut Vec<T> = grad_slot(grads, $v, n);
                $body
            }};
        }
        match &nodes[i].op {
            Op::Leaf | Op::Param | Op::StopGradient => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if wants(a) {
                    let bt = kernels::transpose(val(b), k, n);
                    acc!(a, |g| { kernels::matmul_acc(gout, &bt, g, m, n, k) });
                }
                if wants(b) {
                    let at = kernels::transpose(val(a), m, k);
                    acc!(b, |g| { kernels::matmul_acc(&at, gout, g, k, m, n) });
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (a, b, batch, m, k, n, trans_b) = (*a, *b, *batch, *m, *k, *n, *trans_b);
                if wants(a) {
                    let bv = val(b);
                    acc!(a, |g| {
                        for i in 0..batch {
                            let go = &gout[i * m * n..(i + 1) * m * n];
                            let bi = &bv[i * k * n..(i + 1) * k * n];
                            let gi = &mut g[i * m * k..(i + 1) * m * k];
                            if trans_b {
                                // b_i is [n×k]
                                kernels::matmul_acc(go, bi, gi, m, n, k);
                            } else {
                                let bt = kernels::transpose(bi, k, n);
                                kernels::matmul_acc(go, &bt, gi, m, n, k);
                            }
                        }
                    });
                }
                if wants(b) {
                    let av = val(a);
                    acc!(b, |g| {
                        for i in 0..batch {
                            let go = &gout[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let gi = &mut g[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                let got = kernels::transpose(go, m, n);
                                kernels::matmul_acc(&got, ai, gi, n, m, k);
                            } else {
                                let at = kernels::transpose(ai, m, k);
                                kernels::matmul_acc(&at, go, gi, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc!(v, |g| { add_into(g, gout) });
                    }
                }
            }
            Op::AddBias { x, bias, cols } => {
                if wants(*x) {
                    acc!(*x, |g| { add_into(g, gout) });
                }
                if wants(*bias) {
                    acc!(*bias, |g| {
                        for row in gout.chunks_exact(*cols) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let bv = val(b);
                    acc!(a, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * bv[j];
                        }
                    });
                }
                if wants(b) {
                    let av = val(a);
                    acc!(b, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * av[j];
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    acc!(*a, |g| {
                        for (d, &go) in g.iter_mut().zip(gout) {
                            *d += go * *s;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let y = nodes[i].value.data();
                    acc!(*a, |g| {
                        for j in 0..g.len() {
                            if y[j] > T::zero() {
                                g[j] += gout[j];
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = val(*a);
                    acc!(*a, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * gelu_parts(x[j]).1;
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let y = nodes[i].value.data();
                    acc!(*a, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * y[j];
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = val(x);
                let gv = val(gamma);
                if wants(gamma) {
                    acc!(gamma, |g| {
                        kernels::layer_norm_backward(xv, gv, mean, rstd, gout, *cols, None, Some(g), None)
                    });
                }
                if wants(beta) {
                    acc!(beta, |g| {
                        kernels::layer_norm_backward(xv, gv, mean, rstd, gout, *cols, None, None, Some(g))
                    });
                }
                if wants(x) {
                    acc!(x, |g| {
                        kernels::layer_norm_backward(xv, gv, mean, rstd, gout, *cols, Some(g), None, None)
                    });
                }
            }
            Op::Embedding { table, ids, dim } => {
                if wants(*table) {
                    let dim = *dim;
                    acc!(*table, |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            let id = id as usize;
                            add_into(&mut g[id * dim..(id + 1) * dim], &gout[r * dim..(r + 1) * dim]);
                        }
                    });
                }
            }
            Op::Softmax { x, outer, n, inner } | Op::LogSoftmax { x, outer, n, inner } => {
                if wants(*x) {
                    let log = matches!(nodes[i].op, Op::LogSoftmax { .. });
                    let y = nodes[i].value.data();
                    let (outer, n, inner) = (*outer, *n, *inner);
                    acc!(*x, |g| {
                        if inner == 1 {
                            for r in 0..outer {
                                let s = r * n..(r + 1) * n;
                                if log {
                                    kernels::log_softmax_row_backward(&y[s.clone()], &gout[s.clone()], &mut g[s]);
                                } else {
                                    kernels::softmax_row_backward(&y[s.clone()], &gout[s.clone()], &mut g[s]);
                                }
                            }
                        } else {
                            let mut yb = vec![T::zero(); n];
                            let mut gb = vec![T::zero(); n];
                            let mut db = vec![T::zero(); n];
                            for o in 0..outer {
                                for c in 0..inner {
                                    for j in 0..n {
                                        let idx = (o * n + j) * inner + c;
                                        yb[j] = y[idx];
                                        gb[j] = gout[idx];
                                        db[j] = T::zero();
                                    }
                                    if log {
                                        kernels::log_softmax_row_backward(&yb, &gb, &mut db);
                                    } else {
                                        kernels::softmax_row_backward(&yb, &gb, &mut db);
                                    }
                                    for j in 0..n {
                                        g[(o * n + j) * inner + c] += db[j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
                head_dim,
            } => {
                if wants(*x) {
                    let (batch, len, heads, hd) = (*batch, *len, *heads, *head_dim);
                    let d_model = heads * hd;
                    acc!(*x, |g| {
                        for b in 0..batch {
                            for t in 0..len {
                                for h in 0..heads {
                                    let dst = (b * len + t) * d_model + h * hd;
                                    let src = ((b * heads + h) * len + t) * hd;
                                    add_into(&mut g[dst..dst + hd], &gout[src..src + hd]);
                                }
                            }
                        }
                    });
                }
            }
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
                head_dim,
            } => {
                if wants(*x) {
                    let (batch, len, heads, hd) = (*batch, *len, *heads, *head_dim);
                    let d_model = heads * hd;
                    acc!(*x, |g| {
                        for b in 0..batch {
                            for t in 0..len {
                                for h in 0..heads {
                                    let src = (b * len + t) * d_model + h * hd;
                                    let dst = ((b * heads + h) * len + t) * hd;
                                    add_into(&mut g[dst..dst + hd], &gout[src..src + hd]);
                                }
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    acc!(*x, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * mask[j];
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let go = gout[0];
                    acc!(*a, |g| {
                        for d in g.iter_mut() {
                            *d += go;
                        }
                    });
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let go = gout[0] / T::of(nodes[a.0].value.len() as f64);
                    acc!(*a, |g| {
                        for d in g.iter_mut() {
                            *d += go;
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    acc!(*a, |g| { add_into(g, gout) });
                }
            }
            Op::SmoothedNll {
                log_probs,
                targets,
                mask,
                eps,
                count,
            } => {
                if wants(*log_probs) {
                    let v = nodes[log_probs.0].value.shape()[1];
                    let scale = gout[0] / *count;
                    acc!(*log_probs, |g| {
                        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                            if !m {
                                continue;
                            }
                            let row = &mut g[r * v..(r + 1) * v];
                            for (w, d) in row.iter_mut().enumerate() {
                                *d -= scale * kernels::smoothed_target_weight(w, t as usize, *eps, v);
                            }
                        }
                    });
                }
            }
            Op::Kl {
                log_p,
                log_q,
                mask,
                count,
            } => {
                let v = nodes[log_p.0].value.shape()[1];
                let scale = gout[0] / *count;
                let (pv, qv) = (val(*log_p), val(*log_q));
                if wants(*log_q) {
                    acc!(*log_q, |g| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                for w in r * v..(r + 1) * v {
                                    g[w] -= scale * pv[w].exp();
                                }
                            }
                        }
                    });
                }
                if wants(*log_p) {
                    acc!(*log_p, |g| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                for w in r * v..(r + 1) * v {
                                    if pv[w] > T::neg_infinity() {
                                        g[w] += scale * pv[w].exp() * (pv[w] - qv[w] + T::one());
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Compares f32 analytic gradients of every input with f64 central
    /// differences of the same expression.
    fn check(
        inputs: &[Tensor<f64>],
        build32: impl Fn(&mut Graph<f32>, &[Var]) -> Var,
        build64: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let mut g = Graph::<f32>::new();
        let xs: Vec<Var> = inputs.iter().map(|t| g.variable(t.cast())).collect();
        let loss = build32(&mut g, &xs);
        g.backward(loss).unwrap();
        let h = 1e-3;
        let eval = |k: usize, i: usize, d: f64| {
            let mut g = Graph::<f64>::new();
            let xs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let mut t = t.clone();
                    if j == k {
                        t.data_mut()[i] += d;
                    }
                    g.variable(t)
                })
                .collect();
            let loss = build64(&mut g, &xs);
            g.value(loss).item()
        };
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g.grad(xs[k]).map(<[f32]>::to_vec).unwrap_or(vec![0.0; t.len()]);
            for (i, &a) in analytic.iter().enumerate() {
                let numeric = (eval(k, i, h) - eval(k, i, -h)) / (2.0 * h);
                let a = a as f64;
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-3, "input {k} index {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    macro_rules! gradcheck {
        ($inputs:expr, |$g:ident, $x:ident| $body:expr) => {
            check(
                &$inputs,
                |$g: &mut Graph<f32>, $x: &[Var]| $body,
                |$g: &mut Graph<f64>, $x: &[Var]| $body,
            )
        };
    }

    fn weighted_sum<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
        // a fixed non-uniform weighting so every output element matters
        let n = g.value(x).len();
        let w = Tensor::new(
            g.value(x).shape().to_vec(),
            (0..n).map(|i| T::of(((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1)).collect(),
        )
        .unwrap();
        let w = g.constant(w);
        let y = g.mul(x, w).unwrap();
        g.sum(y)
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_its_edge() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.5, -2.0]));
        let sg = g.stop_gradient(x);
        assert_eq!(g.value(sg), g.value(x));
        let s = g.sum(sg);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![2.0]));
        let sg = g.stop_gradient(x);
        let p = g.mul(x, sg).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.backward(x).unwrap_err().code(), "E_SHAPE");
    }

    #[test]
    fn params_are_shared_within_a_graph() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![3.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(id).unwrap(), &[6.0]);
    }

    #[test]
    fn gradcheck_matmul_bias_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [
            randn(&mut rng, &[5, 4]),
            randn(&mut rng, &[4, 3]),
            randn(&mut rng, &[3]),
        ];
        gradcheck!(inputs, |g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            let y = g.add_bias(y, x[2]).unwrap();
            let y = g.relu(y);
            let y = g.exp(y);
            let y = g.gelu(y);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::vector(vec![0.0, 1.0, -1.0, 6.0]));
        let y = g.gelu(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841192).abs() < 1e-6);
        assert!((v[2] + 0.158808).abs() < 1e-6);
        assert!((v[3] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn gradcheck_batch_matmul_both_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [
            randn(&mut rng, &[2, 3, 4]),
            randn(&mut rng, &[2, 4, 5]),
            randn(&mut rng, &[2, 5, 4]),
        ];
        gradcheck!(inputs, |g, x| {
            let y = g.batch_matmul(x[0], x[1], false).unwrap();
            let z = g.batch_matmul(x[0], x[2], true).unwrap();
            let y = g.mul(y, z).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [randn(&mut rng, &[3, 6]), randn(&mut rng, &[6]), randn(&mut rng, &[6])];
        gradcheck!(inputs, |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2]).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_softmax_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [randn(&mut rng, &[3, 4, 2])];
        gradcheck!(inputs, |g, x| {
            let a = g.softmax(x[0], 1).unwrap();
            let b = g.log_softmax(x[0], 2).unwrap();
            let c = g.log_softmax(x[0], 1).unwrap();
            let ab = g.add(a, b).unwrap();
            let y = g.mul(ab, c).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_attention_pieces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // batch 2, length 3, 2 heads of width 2
        let inputs = [randn(&mut rng, &[6, 4]), randn(&mut rng, &[6, 4])];
        let mask = [true, true, false, true, true, true];
        gradcheck!(inputs, |g, x| {
            let q = g.split_heads(x[0], 2, 3, 2).unwrap();
            let k = g.split_heads(x[1], 2, 3, 2).unwrap();
            let s = g.batch_matmul(q, k, true).unwrap();
            let s = g.scale(s, Scalar::of(0.7));
            let p = g.attention_softmax(s, 2, true, Some(&mask)).unwrap();
            let o = g.batch_matmul(p, k, false).unwrap();
            let o = g.merge_heads(o, 2, 2).unwrap();
            weighted_sum(g, o)
        });
    }

    #[test]
    fn gradcheck_embedding_reshape_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [randn(&mut rng, &[5, 3])];
        gradcheck!(inputs, |g, x| {
            let e = g.embedding(x[0], &[4, 1, 1, 0]).unwrap();
            let r = g.reshape(e, &[2, 6]).unwrap();
            let sq = g.mul(r, r).unwrap();
            let m = g.mean(sq);
            let w = weighted_sum(g, r);
            g.add(m, w).unwrap()
        });
    }

    #[test]
    fn gradcheck_smoothed_nll_and_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [randn(&mut rng, &[4, 5]), randn(&mut rng, &[4, 5])];
        let mask = [true, false, true, true];
        gradcheck!(inputs, |g, x| {
            let lp = g.log_softmax(x[0], 1).unwrap();
            let nll = g.smoothed_nll(lp, &[1, 0, 4, 2], &mask, Scalar::of(0.1)).unwrap();
            let lp2 = g.log_softmax(x[1], 1).unwrap();
            let kl = g.kl_div(lp2, lp, &mask).unwrap();
            g.add(nll, kl).unwrap()
        });
    }

    #[test]
    fn attention_masks_are_exact_zeros() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![1, 3, 3], vec![0.3; 9]).unwrap());
        let p = g.attention_softmax(s, 1, true, Some(&[true, false, true])).unwrap();
        let v = g.value(p).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[6..9], &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g.dropout(x, 0.0, &mut rng), x);
    }
}

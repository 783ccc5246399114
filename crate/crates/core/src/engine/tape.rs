//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! whose inputs are strictly earlier nodes, so walking the node list backwards
//! is a reverse topological order and visits every op once.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, GroupNormStats};
use super::params::ParamStore;
use super::tensor::{gemm, Element, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannelBias {
        x: Var,
        b: Var,
        spatial: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats<T>,
    },
    Silu(Var),
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose12(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(_) => "silu",
            Op::Softmax(_) => "softmax",
            Op::Bmm { .. } => "bmm",
            Op::Transpose12(_) => "transpose12",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Upsample { .. } => "upsample_nearest",
            Op::AvgPool { .. } => "avg_pool",
            Op::Gather { .. } => "gather_rows",
            Op::Mse(..) => "mse",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

type TrainableFn<'p> = Box<dyn Fn(&str) -> bool + 'p>;

/// Operation record for one forward pass.
pub struct Tape<'p, T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore>,
    bound: HashMap<String, Var>,
    overrides: HashMap<String, Var>,
    trainable: Option<TrainableFn<'p>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Element> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
            overrides: HashMap::new(),
            trainable: None,
            grad_enabled: true,
        }
    }

    /// Tape that resolves [`Tape::param`] against `params`.
    pub fn with_params(params: Option<&'p ParamStore>) -> Self {
        Self {
            params,
            ..Self::new()
        }
    }

    /// Gradient-free tape for sampling.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Restricts which named parameters become gradient-carrying leaves.
    pub fn set_trainable(&mut self, filter: impl Fn(&str) -> bool + 'p) {
        self.trainable = Some(Box::new(filter));
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`Tape::backward`] with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Routes parameter `name` to an existing node instead of the store.
    pub fn override_param(&mut self, name: &str, v: Var) {
        self.overrides.insert(name.to_string(), v);
    }

    /// Leaf for a named parameter, bound once per tape.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.overrides.get(name) {
            return Ok(v);
        }
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| invalid!("tape has no parameter store (looking up `{name}`)"))?;
        let mut t: Tensor<T> = store.get(name)?.cast();
        t.clear_grad();
        let trainable = self.trainable.as_ref().is_none_or(|f| f(name));
        t.set_requires_grad(self.grad_enabled && trainable);
        let v = self.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, after [`Tape::backward`].
    pub fn param_grads(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .filter_map(|(k, v)| {
                self.nodes[v.0]
                    .value
                    .grad_tensor()
                    .map(|g| (k.clone(), g.cast::<f32>()))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    // ----- ops -------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = ConvGeom::new(&xs, &ws, stride, pad).ok_or_else(|| {
            shape_err!(
                "conv2d: input {xs:?} incompatible with weight {ws:?} (stride {stride}, pad {pad})"
            )
        })?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(shape_err!(
                    "conv2d: bias {:?} for {} outputs",
                    self.shape(b),
                    geom.o
                ));
            }
        }
        let mut out = vec![T::zero(); geom.n * geom.o * geom.ho * geom.wo];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            &mut out,
        );
        let value = Tensor::new([geom.n, geom.o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// `x[..., in] · wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(shape_err!("linear: input {xs:?} vs weight {ws:?}"));
        }
        let (fan_out, fan_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(shape_err!(
                    "linear: bias {:?} for {fan_out} outputs",
                    self.shape(b)
                ));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            &inputs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `x[n, c, ...] + b[n, c]`, broadcasting `b` over the trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || bs != xs[..2] {
            return Err(shape_err!("add_channel_bias: input {xs:?} vs bias {bs:?}"));
        }
        let spatial: usize = xs[2..].iter().product();
        let mut value = self.value(x).clone();
        value.clear_grad();
        value.set_requires_grad(false);
        let bias = self.value(b).data().to_vec();
        for (chunk, &bb) in value.data_mut().chunks_mut(spatial).zip(&bias) {
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        Ok(self.push(value, Op::AddChannelBias { x, b, spatial }, &[x, b]))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(shape_err!("group_norm: {xs:?} with {groups} groups"));
        }
        let (n, c) = (xs[0], xs[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "group_norm: affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let spatial: usize = xs[2..].iter().product();
        let mut out = vec![T::zero(); n * c * spatial];
        let stats = kernels::group_norm_forward(
            self.value(x).data(),
            n,
            c,
            spatial,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
        );
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::softmax_rows(self.value(x).data(), cols, &mut out);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Batched product `[b, m, k] · [b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] || as_[2] != bs[1] {
            return Err(shape_err!("bmm: {as_:?} · {bs:?}"));
        }
        let (batch, m, k, n) = (as_[0], as_[1], as_[2], bs[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new([batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// `[b, m, n] -> [b, n, m]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("transpose12 expects rank 3, got {s:?}"));
        }
        let out = transpose_batched(self.value(x).data(), s[0], s[1], s[2]);
        let value = Tensor::new([s[0], s[2], s[1]], out)?;
        Ok(self.push(value, Op::Transpose12(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.clear_grad();
        value.set_requires_grad(false);
        let value = value.reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| shape_err!("concat of nothing"))?,
            )
            .to_vec();
        if first.len() < 2 {
            return Err(shape_err!("concat needs rank >= 2, got {first:?}"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err!("concat: {:?} vs {:?}", s, first));
            }
            channels += s[1];
        }
        let n = first[0];
        let spatial: usize = first[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * spatial);
        for b in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                let d = self.value(p).data();
                out.extend_from_slice(&d[b * c * spatial..(b + 1) * c * spatial]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err!("upsample_nearest: {s:?} by {factor}"));
        }
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * s[2] * s[3] * factor * factor];
        kernels::upsample_nearest(self.value(x).data(), planes, s[2], s[3], factor, &mut out);
        let value = Tensor::new([s[0], s[1], s[2] * factor, s[3] * factor], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(shape_err!("avg_pool: {s:?} by {k}"));
        }
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * (s[2] / k) * (s[3] / k)];
        kernels::avg_pool(self.value(x).data(), planes, s[2], s[3], k, &mut out);
        let value = Tensor::new([s[0], s[1], s[2] / k, s[3] / k], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, &[x]))
    }

    /// Rows of `table[v, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("gather_rows: table {s:?}"));
        }
        let (rows, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(invalid!("row id {id} out of range for {rows} rows"));
            }
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let total: f64 = ad
            .iter()
            .zip(bd)
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::from_f64_lossy(total / ad.len().max(1) as f64));
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(total));
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `softmax(q·kᵀ / sqrt(d)) · v` for `q[b, tq, d]`, `k[b, tk, d]`, `v[b, tk, dv]`.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self
            .shape(q)
            .last()
            .ok_or_else(|| shape_err!("attention on scalar"))?;
        let kt = self.transpose12(k)?;
        let scores = self.bmm(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = self.softmax(scores)?;
        self.bmm(attn, v)
    }

    // ----- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every gradient-carrying leaf ends up
    /// with a populated grad buffer (zeros if unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backward_node(i, &gy, &mut grads);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (mut dx, mut dw, mut db) = (None, None, None);
                if wants(*x) {
                    dx = Some(take_or_zero(grads, *x, nodes));
                }
                if wants(*w) {
                    dw = Some(take_or_zero(grads, *w, nodes));
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    db = Some(take_or_zero(grads, b, nodes));
                }
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    gy,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(grads, *x, dx);
                put(grads, *w, dw);
                if let Some(b) = b {
                    put(grads, *b, db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let (rows, fan_in, fan_out) = (*rows, *fan_in, *fan_out);
                if wants(*x) {
                    let mut dx = take_or_zero(grads, *x, nodes);
                    gemm(
                        rows,
                        fan_out,
                        fan_in,
                        gy,
                        false,
                        val(*w),
                        false,
                        &mut dx,
                        true,
                    );
                    grads[x.0] = Some(dx);
                }
                if wants(*w) {
                    let mut dw = take_or_zero(grads, *w, nodes);
                    gemm(
                        fan_out,
                        rows,
                        fan_in,
                        gy,
                        true,
                        val(*x),
                        false,
                        &mut dw,
                        true,
                    );
                    grads[w.0] = Some(dw);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let mut db = take_or_zero(grads, b, nodes);
                    for row in gy.chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    grads[b.0] = Some(db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    accumulate(grads, v, nodes, |d| {
                        d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g)
                    });
                }
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, nodes, |d| {
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g)
                });
                accumulate(grads, *b, nodes, |d| {
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, nodes, |d| {
                    for ((d, &g), &o) in d.iter_mut().zip(gy).zip(bv) {
                        *d += g * o;
                    }
                });
                accumulate(grads, *b, nodes, |d| {
                    for ((d, &g), &o) in d.iter_mut().zip(gy).zip(av) {
                        *d += g * o;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, nodes, |d| {
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * s)
                });
            }
            Op::AddChannelBias { x, b, spatial } => {
                accumulate(grads, *x, nodes, |d| {
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g)
                });
                accumulate(grads, *b, nodes, |d| {
                    for (d, chunk) in d.iter_mut().zip(gy.chunks(*spatial)) {
                        let mut s = T::zero();
                        for &g in chunk {
                            s += g;
                        }
                        *d += s;
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let s = nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let mut dx = wants(*x).then(|| take_or_zero(grads, *x, nodes));
                let mut dg = wants(*gamma).then(|| take_or_zero(grads, *gamma, nodes));
                let mut db = wants(*beta).then(|| take_or_zero(grads, *beta, nodes));
                kernels::group_norm_backward(
                    val(*x),
                    gy,
                    n,
                    c,
                    spatial,
                    *groups,
                    val(*gamma),
                    stats,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put(grads, *x, dx);
                put(grads, *gamma, dg);
                put(grads, *beta, db);
            }
            Op::Silu(x) => {
                let xv = val(*x);
                accumulate(grads, *x, nodes, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(gy).zip(xv) {
                        let s = kernels::sigmoid(v);
                        *d += g * s * (T::one() + v * (T::one() - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let cols = *nodes[i].value.shape().last().unwrap();
                accumulate(grads, *x, nodes, |d| {
                    for ((drow, grow), yrow) in
                        d.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.chunks(cols))
                    {
                        let mut dot = T::zero();
                        for (&g, &yy) in grow.iter().zip(yrow) {
                            dot += g * yy;
                        }
                        for ((dd, &g), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += yy * (g - dot);
                        }
                    }
                });
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if wants(*a) {
                    let mut da = take_or_zero(grads, *a, nodes);
                    let bv = val(*b);
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gy[bi * m * n..],
                            false,
                            &bv[bi * k * n..],
                            true,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                    grads[a.0] = Some(da);
                }
                if wants(*b) {
                    let mut db = take_or_zero(grads, *b, nodes);
                    let av = val(*a);
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av[bi * m * k..],
                            true,
                            &gy[bi * m * n..],
                            false,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            true,
                        );
                    }
                    grads[b.0] = Some(db);
                }
            }
            Op::Transpose12(x) => {
                let s = nodes[i].value.shape();
                // output is [b, n, m]; transposing the grad back gives [b, m, n]
                let back = transpose_batched(gy, s[0], s[1], s[2]);
                accumulate(grads, *x, nodes, |d| {
                    d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g)
                });
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, nodes, |d| {
                    d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g)
                });
            }
            Op::Concat { parts } => {
                let s = nodes[i].value.shape();
                let (n, total) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let mut c0 = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    accumulate(grads, p, nodes, |d| {
                        for b in 0..n {
                            let src =
                                &gy[(b * total + c0) * spatial..(b * total + c0 + c) * spatial];
                            let dst = &mut d[b * c * spatial..(b + 1) * c * spatial];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    });
                    c0 += c;
                }
            }
            Op::Upsample { x, factor } => {
                let s = nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                accumulate(grads, *x, nodes, |d| {
                    kernels::upsample_nearest_backward(gy, planes, h, w, *factor, d)
                });
            }
            Op::AvgPool { x, k } => {
                let s = nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                accumulate(grads, *x, nodes, |d| {
                    kernels::avg_pool_backward(gy, planes, h, w, *k, d)
                });
            }
            Op::Gather { table, ids } => {
                let dim = nodes[table.0].value.shape()[1];
                accumulate(grads, *table, nodes, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &gy[r * dim..(r + 1) * dim];
                        d[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = gy[0] * T::from_f64_lossy(2.0 / av.len().max(1) as f64);
                accumulate(grads, *a, nodes, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x - y);
                    }
                });
                accumulate(grads, *b, nodes, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x - y);
                    }
                });
            }
            Op::Sum(x) => {
                let g = gy[0];
                accumulate(grads, *x, nodes, |d| d.iter_mut().for_each(|d| *d += g));
            }
        }
    }
}

fn take_or_zero<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, nodes: &[Node<T>]) -> Vec<T> {
    grads[v.0]
        .take()
        .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.numel()])
}

fn put<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}

fn accumulate<T: Element>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    nodes: &[Node<T>],
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let mut buf = take_or_zero(grads, v, nodes);
    f(&mut buf);
    grads[v.0] = Some(buf);
}

fn transpose_batched<T: Element>(x: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * m * n];
    for bi in 0..b {
        let src = &x[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for r in 0..m {
            for c in 0..n {
                dst[c * m + r] = src[r * n + c];
            }
        }
    }
    out
}

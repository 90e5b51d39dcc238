//! Operation tape for reverse-mode gradient computation.
//!
//! Forward ops push a value node plus a backward closure; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients. Parameters are bound
//! once per tape so reuse of the same weight contributes to a single
//! gradient slot.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Index of a value node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Handle to a named parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// The parameters of one model. Names are unique within a set.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CoreError::Config(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradients produced by a backward pass, addressed by node.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
}

impl GradSink<'_> {
    fn add(&mut self, id: NodeId, contribution: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => add_assign(existing, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn add_assign(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

type BackwardFn = Box<dyn FnOnce(&[Tensor], &Tensor, &mut GradSink)>;

/// Recorded forward computation.
pub struct Tape {
    values: Vec<Tensor>,
    backwards: Vec<Option<BackwardFn>>,
    bound: Vec<(ParamId, NodeId)>,
    bound_lookup: HashMap<ParamId, NodeId>,
    grad_enabled: bool,
    dropout_rng: Option<RngStream>,
}

impl Tape {
    /// Tape for a training step: records gradients and applies dropout using
    /// the given stream.
    pub fn training(dropout_rng: RngStream) -> Self {
        Self {
            values: Vec::new(),
            backwards: Vec::new(),
            bound: Vec::new(),
            bound_lookup: HashMap::new(),
            grad_enabled: true,
            dropout_rng: Some(dropout_rng),
        }
    }

    /// Gradient-recording tape with dropout disabled.
    pub fn with_grad() -> Self {
        Self {
            values: Vec::new(),
            backwards: Vec::new(),
            bound: Vec::new(),
            bound_lookup: HashMap::new(),
            grad_enabled: true,
            dropout_rng: None,
        }
    }

    /// Evaluation-only tape: no gradients, no dropout.
    pub fn inference() -> Self {
        Self {
            values: Vec::new(),
            backwards: Vec::new(),
            bound: Vec::new(),
            bound_lookup: HashMap::new(),
            grad_enabled: false,
            dropout_rng: None,
        }
    }

    pub fn records_grad(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.backwards
            .push(if self.grad_enabled { backward } else { None });
        id
    }

    /// Input or constant node; never receives a gradient of interest.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, None)
    }

    /// Bind a parameter's current value onto the tape. Repeated binds return
    /// the same node so gradients accumulate in one place.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&node) = self.bound_lookup.get(&id) {
            return node;
        }
        let node = self.push(params.get(id).value.clone(), None);
        self.bound.push((id, node));
        self.bound_lookup.insert(id, node);
        node
    }

    /// Propagate gradients from a scalar loss node back through the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradStore> {
        if self.values[loss.0].numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                self.backwards[id] = None;
                continue;
            }
            let Some(bw) = self.backwards[id].take() else {
                continue;
            };
            let (lo, hi) = grads.split_at_mut(id);
            let out_grad = hi[0].as_ref().expect("grad present");
            let mut sink = GradSink { grads: lo };
            bw(&self.values, out_grad, &mut sink);
        }
        Ok(GradStore { grads })
    }

    /// Accumulate node gradients into the bound parameters' `grad` fields.
    pub fn write_param_grads(&self, store: &GradStore, params: &mut ParamSet) {
        for &(pid, nid) in &self.bound {
            if let Some(g) = store.get(nid) {
                add_assign(&mut params.get_mut(pid).grad, g);
            }
        }
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a[.., k] * b[k, n]`, contracting the last dim of `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = super::matmul(&self.values[a.0], &self.values[b.0])?;
        let a_shape = self.values[a.0].shape().to_vec();
        let k = *a_shape.last().unwrap();
        let m = self.values[a.0].numel() / k;
        let n = self.values[b.0].shape()[1];
        Ok(self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                let mut ga = vec![0.0; m * k];
                matmul_nt_raw(g.data(), values[b.0].data(), m, n, k, &mut ga);
                sink.add(a, Tensor::new(a_shape.clone(), ga).expect("grad shape"));
                let mut gb = vec![0.0; k * n];
                matmul_tn_raw(values[a.0].data(), g.data(), m, k, n, &mut gb);
                sink.add(b, Tensor::new(vec![k, n], gb).expect("grad shape"));
            })),
        ))
    }

    /// Batched product `a[B,m,k] * b[B,k,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CoreError::ShapeMismatch(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_raw(
                &self.values[a.0].data()[i * m * k..(i + 1) * m * k],
                &self.values[b.0].data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                let mut ga = vec![0.0; bsz * m * k];
                let mut gb = vec![0.0; bsz * k * n];
                for i in 0..bsz {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    matmul_nt_raw(
                        gi,
                        &values[b.0].data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                    matmul_tn_raw(
                        &values[a.0].data()[i * m * k..(i + 1) * m * k],
                        gi,
                        m,
                        k,
                        n,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                sink.add(a, Tensor::new(vec![bsz, m, k], ga).expect("grad shape"));
                sink.add(b, Tensor::new(vec![bsz, k, n], gb).expect("grad shape"));
            })),
        ))
    }

    /// Batched product against a transposed rhs: `a[B,m,d] * b[B,n,d]^T`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(CoreError::ShapeMismatch(format!("bmm_nt: {sa:?} x {sb:?}")));
        }
        let (bsz, m, d, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_nt_raw(
                &self.values[a.0].data()[i * m * d..(i + 1) * m * d],
                &self.values[b.0].data()[i * n * d..(i + 1) * n * d],
                m,
                d,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                let mut ga = vec![0.0; bsz * m * d];
                let mut gb = vec![0.0; bsz * n * d];
                for i in 0..bsz {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    matmul_raw(
                        gi,
                        &values[b.0].data()[i * n * d..(i + 1) * n * d],
                        m,
                        n,
                        d,
                        &mut ga[i * m * d..(i + 1) * m * d],
                    );
                    matmul_tn_raw(
                        gi,
                        &values[a.0].data()[i * m * d..(i + 1) * m * d],
                        m,
                        n,
                        d,
                        &mut gb[i * n * d..(i + 1) * n * d],
                    );
                }
                sink.add(a, Tensor::new(vec![bsz, m, d], ga).expect("grad shape"));
                sink.add(b, Tensor::new(vec![bsz, n, d], gb).expect("grad shape"));
            })),
        ))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].sub(&self.values[b.0])?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.scale(-1.0));
            })),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].mul(&self.values[b.0])?;
        Ok(self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                sink.add(a, g.mul(&values[b.0]).expect("grad shape"));
                sink.add(b, g.mul(&values[a.0]).expect("grad shape"));
            })),
        ))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.values[a.0].scale(k);
        self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(a, g.scale(k));
            })),
        )
    }

    /// Multiply each leading-dim block by its own scalar.
    pub fn scale_rows(&mut self, a: NodeId, scales: Vec<f64>) -> Result<NodeId> {
        let shape = self.values[a.0].shape().to_vec();
        if shape.is_empty() || shape[0] != scales.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "scale_rows: {} scales for shape {shape:?}",
                scales.len()
            )));
        }
        let block = self.values[a.0].numel() / shape[0];
        let mut data = self.values[a.0].data().to_vec();
        for (b, &s) in scales.iter().enumerate() {
            for v in &mut data[b * block..(b + 1) * block] {
                *v *= s;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut gd = g.data().to_vec();
                for (b, &s) in scales.iter().enumerate() {
                    for v in &mut gd[b * block..(b + 1) * block] {
                        *v *= s;
                    }
                }
                sink.add(a, Tensor::new(g.shape().to_vec(), gd).expect("grad shape"));
            })),
        ))
    }

    /// Broadcast-add a bias over the last dim: `x[.., d] + bias[d]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = match self.values[bias.0].shape() {
            [d] => *d,
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "add_bias: bias must be rank 1, got {s:?}"
                )))
            }
        };
        let xs = self.values[x.0].shape().to_vec();
        if xs.last() != Some(&d) {
            return Err(CoreError::ShapeMismatch(format!(
                "add_bias: x {xs:?} vs bias [{d}]"
            )));
        }
        let rows = self.values[x.0].numel() / d;
        let mut data = self.values[x.0].data().to_vec();
        for r in 0..rows {
            for (v, b) in data[r * d..(r + 1) * d]
                .iter_mut()
                .zip(self.values[bias.0].data())
            {
                *v += b;
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(x, g.clone());
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                sink.add(bias, Tensor::new(vec![d], gb).expect("grad shape"));
            })),
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let value = self.values[x.0].map(|v| {
            let u = C * (v + A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                let gx = values[x.0]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let u = C * (v + A * v * v * v);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                sink.add(
                    x,
                    Tensor::new(values[x.0].shape().to_vec(), gx).expect("grad shape"),
                );
            })),
        )
    }

    /// Layer normalization over the last dim with learnable gain and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let d = *xs.last().ok_or_else(|| {
            CoreError::ShapeMismatch("layer_norm: input must have rank >= 1".into())
        })?;
        if self.values[gamma.0].shape() != [d] || self.values[beta.0].shape() != [d] {
            return Err(CoreError::ShapeMismatch(format!(
                "layer_norm: gamma/beta must be [{d}]"
            )));
        }
        let rows = self.values[x.0].numel() / d;
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        {
            let xv = self.values[x.0].data();
            let gv = self.values[gamma.0].data();
            let bv = self.values[beta.0].data();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                for j in 0..d {
                    data[r * d + j] = gv[j] * (row[j] - mean) * rstd + bv[j];
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                let xv = values[x.0].data();
                let gammav = values[gamma.0].data();
                let mut gx = vec![0.0; rows * d];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let (mean, rstd) = (means[r], rstds[r]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gammav[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        ggamma[j] += grow[j] * xhat;
                        gbeta[j] += grow[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gammav[j];
                        gx[r * d + j] = rstd * (dxhat - m1 - xhat * m2);
                    }
                }
                sink.add(
                    x,
                    Tensor::new(values[x.0].shape().to_vec(), gx).expect("grad shape"),
                );
                sink.add(gamma, Tensor::new(vec![d], ggamma).expect("grad shape"));
                sink.add(beta, Tensor::new(vec![d], gbeta).expect("grad shape"));
            })),
        ))
    }

    /// Row-wise softmax over `[B, T, T]` score matrices with a causal mask:
    /// row `i` attends to columns `j <= i` only.
    pub fn softmax_causal(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let (bsz, t) = match xs.as_slice() {
            [b, t1, t2] if t1 == t2 => (*b, *t1),
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "softmax_causal expects [B,T,T], got {s:?}"
                )))
            }
        };
        let mut data = vec![0.0; bsz * t * t];
        {
            let xv = self.values[x.0].data();
            for b in 0..bsz {
                for i in 0..t {
                    let off = b * t * t + i * t;
                    let row = &xv[off..off + i + 1];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        let e = (v - max).exp();
                        data[off + j] = e;
                        sum += e;
                    }
                    for v in &mut data[off..off + i + 1] {
                        *v /= sum;
                    }
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        let out_id = NodeId(self.values.len());
        Ok(self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                let yv = values[out_id.0].data();
                let mut gx = vec![0.0; bsz * t * t];
                for b in 0..bsz {
                    for i in 0..t {
                        let off = b * t * t + i * t;
                        let mut s = 0.0;
                        for j in 0..=i {
                            s += g.data()[off + j] * yv[off + j];
                        }
                        for j in 0..=i {
                            gx[off + j] = yv[off + j] * (g.data()[off + j] - s);
                        }
                    }
                }
                sink.add(x, Tensor::new(vec![bsz, t, t], gx).expect("grad shape"));
            })),
        ))
    }

    // ── shape plumbing ──────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.values[x.0].reshape(shape)?;
        let orig = self.values[x.0].shape().to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(x, g.reshape(&orig).expect("grad shape"));
            })),
        ))
    }

    /// Swap axes 1 and 2 of a rank-4 tensor.
    pub fn swap_axes12(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 4 {
            return Err(CoreError::ShapeMismatch(format!(
                "swap_axes12 expects rank 4, got {s:?}"
            )));
        }
        let (d0, d1, d2, d3) = (s[0], s[1], s[2], s[3]);
        let value = swap12(&self.values[x.0], d0, d1, d2, d3);
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(x, swap12(g, d0, d2, d1, d3));
            })),
        ))
    }

    /// Contiguous column slice of the last dim.
    pub fn slice_last(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let d = *xs.last().unwrap();
        if lo >= hi || hi > d {
            return Err(CoreError::ShapeMismatch(format!(
                "slice_last {lo}..{hi} of last dim {d}"
            )));
        }
        let rows = self.values[x.0].numel() / d;
        let w = hi - lo;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w]
                .copy_from_slice(&self.values[x.0].data()[r * d + lo..r * d + hi]);
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = w;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    gx[r * d + lo..r * d + hi].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                sink.add(x, Tensor::new(xs.clone(), gx).expect("grad shape"));
            })),
        ))
    }

    /// Concatenate `[B, T_i, d]` tensors along the time dim.
    pub fn concat_time(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_time of zero parts".into()));
        }
        let first = self.values[parts[0].0].shape().to_vec();
        if first.len() != 3 {
            return Err(CoreError::ShapeMismatch("concat_time expects rank 3".into()));
        }
        let (bsz, d) = (first[0], first[2]);
        let mut times = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.values[p.0].shape();
            if s.len() != 3 || s[0] != bsz || s[2] != d {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat_time: incompatible part {s:?}"
                )));
            }
            times.push(s[1]);
        }
        let t_total: usize = times.iter().sum();
        let mut data = vec![0.0; bsz * t_total * d];
        for b in 0..bsz {
            let mut t_off = 0;
            for (&p, &tp) in parts.iter().zip(&times) {
                let src = &self.values[p.0].data()[b * tp * d..(b + 1) * tp * d];
                data[(b * t_total + t_off) * d..(b * t_total + t_off + tp) * d]
                    .copy_from_slice(src);
                t_off += tp;
            }
        }
        let value = Tensor::new(vec![bsz, t_total, d], data)?;
        let parts = parts.to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut t_off = 0;
                for (&p, &tp) in parts.iter().zip(&times) {
                    let mut gp = vec![0.0; bsz * tp * d];
                    for b in 0..bsz {
                        gp[b * tp * d..(b + 1) * tp * d].copy_from_slice(
                            &g.data()[(b * t_total + t_off) * d..(b * t_total + t_off + tp) * d],
                        );
                    }
                    sink.add(p, Tensor::new(vec![bsz, tp, d], gp).expect("grad shape"));
                    t_off += tp;
                }
            })),
        ))
    }

    /// Interleave two `[B, T, d]` tensors along time: `a_0 b_0 a_1 b_1 ...`.
    pub fn interleave_time(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.values[a.0].shape().to_vec();
        if sa.len() != 3 || self.values[b.0].shape() != sa.as_slice() {
            return Err(CoreError::ShapeMismatch(format!(
                "interleave_time: {:?} vs {:?}",
                sa,
                self.values[b.0].shape()
            )));
        }
        let (bsz, t, d) = (sa[0], sa[1], sa[2]);
        let mut data = vec![0.0; bsz * 2 * t * d];
        for bi in 0..bsz {
            for ti in 0..t {
                let src_a = &self.values[a.0].data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let src_b = &self.values[b.0].data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let base = (bi * 2 * t + 2 * ti) * d;
                data[base..base + d].copy_from_slice(src_a);
                data[base + d..base + 2 * d].copy_from_slice(src_b);
            }
        }
        let value = Tensor::new(vec![bsz, 2 * t, d], data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut ga = vec![0.0; bsz * t * d];
                let mut gb = vec![0.0; bsz * t * d];
                for bi in 0..bsz {
                    for ti in 0..t {
                        let base = (bi * 2 * t + 2 * ti) * d;
                        let dst = (bi * t + ti) * d;
                        ga[dst..dst + d].copy_from_slice(&g.data()[base..base + d]);
                        gb[dst..dst + d].copy_from_slice(&g.data()[base + d..base + 2 * d]);
                    }
                }
                sink.add(a, Tensor::new(vec![bsz, t, d], ga).expect("grad shape"));
                sink.add(b, Tensor::new(vec![bsz, t, d], gb).expect("grad shape"));
            })),
        ))
    }

    /// Select time positions from `[B, T, d]`.
    pub fn gather_time(&mut self, x: NodeId, positions: Vec<usize>) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(CoreError::ShapeMismatch("gather_time expects rank 3".into()));
        }
        let (bsz, t, d) = (xs[0], xs[1], xs[2]);
        if positions.iter().any(|&p| p >= t) {
            return Err(CoreError::Contract(format!(
                "gather_time: position out of range 0..{t}"
            )));
        }
        let p = positions.len();
        let mut data = vec![0.0; bsz * p * d];
        for bi in 0..bsz {
            for (pi, &pos) in positions.iter().enumerate() {
                let src = &self.values[x.0].data()[(bi * t + pos) * d..(bi * t + pos + 1) * d];
                data[(bi * p + pi) * d..(bi * p + pi + 1) * d].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![bsz, p, d], data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut gx = vec![0.0; bsz * t * d];
                for bi in 0..bsz {
                    for (pi, &pos) in positions.iter().enumerate() {
                        let src = &g.data()[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                        for (dst, s) in gx[(bi * t + pos) * d..(bi * t + pos + 1) * d]
                            .iter_mut()
                            .zip(src)
                        {
                            *dst += s;
                        }
                    }
                }
                sink.add(x, Tensor::new(vec![bsz, t, d], gx).expect("grad shape"));
            })),
        ))
    }

    /// `x[B,T,d] + v[B,d]` broadcast over time.
    pub fn add_row_bcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let vs = self.values[v.0].shape().to_vec();
        if xs.len() != 3 || vs.len() != 2 || xs[0] != vs[0] || xs[2] != vs[1] {
            return Err(CoreError::ShapeMismatch(format!(
                "add_row_bcast: {xs:?} + {vs:?}"
            )));
        }
        let (bsz, t, d) = (xs[0], xs[1], xs[2]);
        let mut data = self.values[x.0].data().to_vec();
        for bi in 0..bsz {
            let vrow = &self.values[v.0].data()[bi * d..(bi + 1) * d];
            for ti in 0..t {
                for (dst, s) in data[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                    .iter_mut()
                    .zip(vrow)
                {
                    *dst += s;
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(x, g.clone());
                let mut gv = vec![0.0; bsz * d];
                for bi in 0..bsz {
                    for ti in 0..t {
                        for (dst, s) in gv[bi * d..(bi + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d])
                        {
                            *dst += s;
                        }
                    }
                }
                sink.add(v, Tensor::new(vec![bsz, d], gv).expect("grad shape"));
            })),
        ))
    }

    /// `x[B,T,d] + pos[T,d]` broadcast over the batch.
    pub fn add_pos(&mut self, x: NodeId, pos: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let ps = self.values[pos.0].shape().to_vec();
        if xs.len() != 3 || ps.len() != 2 || xs[1] != ps[0] || xs[2] != ps[1] {
            return Err(CoreError::ShapeMismatch(format!("add_pos: {xs:?} + {ps:?}")));
        }
        let (bsz, t, d) = (xs[0], xs[1], xs[2]);
        let mut data = self.values[x.0].data().to_vec();
        for bi in 0..bsz {
            for (dst, s) in data[bi * t * d..(bi + 1) * t * d]
                .iter_mut()
                .zip(self.values[pos.0].data())
            {
                *dst += s;
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                sink.add(x, g.clone());
                let mut gp = vec![0.0; t * d];
                for bi in 0..bsz {
                    for (dst, s) in gp.iter_mut().zip(&g.data()[bi * t * d..(bi + 1) * t * d]) {
                        *dst += s;
                    }
                }
                sink.add(pos, Tensor::new(vec![t, d], gp).expect("grad shape"));
            })),
        ))
    }

    /// Replace whole `[T, d]` blocks of masked batch entries with a learned
    /// row broadcast over `T`. Used for goal masking.
    pub fn mask_rows(&mut self, x: NodeId, null_row: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let ns = self.values[null_row.0].shape().to_vec();
        if xs.len() != 3 || ns.len() != 1 || xs[2] != ns[0] || xs[0] != mask.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "mask_rows: x {xs:?}, null {ns:?}, mask len {}",
                mask.len()
            )));
        }
        let (bsz, t, d) = (xs[0], xs[1], xs[2]);
        let mut data = self.values[x.0].data().to_vec();
        for (bi, &m) in mask.iter().enumerate() {
            if m {
                for ti in 0..t {
                    data[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                        .copy_from_slice(self.values[null_row.0].data());
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut gx = vec![0.0; bsz * t * d];
                let mut gn = vec![0.0; d];
                for (bi, &m) in mask.iter().enumerate() {
                    if m {
                        for ti in 0..t {
                            for (dst, s) in gn
                                .iter_mut()
                                .zip(&g.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d])
                            {
                                *dst += s;
                            }
                        }
                    } else {
                        gx[bi * t * d..(bi + 1) * t * d]
                            .copy_from_slice(&g.data()[bi * t * d..(bi + 1) * t * d]);
                    }
                }
                sink.add(x, Tensor::new(vec![bsz, t, d], gx).expect("grad shape"));
                sink.add(null_row, Tensor::new(vec![d], gn).expect("grad shape"));
            })),
        ))
    }

    /// Concatenate rank-2 tensors along the feature (last) dim.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_last of zero parts".into()));
        }
        let rows = match self.values[parts[0].0].shape() {
            [r, _] => *r,
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat_last expects rank 2, got {s:?}"
                )))
            }
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.values[p.0].shape();
            if s.len() != 2 || s[0] != rows {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat_last: incompatible part {s:?}"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let parts = parts.to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut gp = vec![0.0; rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    sink.add(p, Tensor::new(vec![rows, w], gp).expect("grad shape"));
                    off += w;
                }
            })),
        ))
    }

    // ── stochastic / reductions ─────────────────────────────────────

    /// Inverted dropout; identity when the tape has no dropout stream.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.values[x.0].numel())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.values[x.0]
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.values[x.0].shape().to_vec(), data).expect("dropout shape");
        self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let gd: Vec<f64> = g.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                sink.add(x, Tensor::new(g.shape().to_vec(), gd).expect("grad shape"));
            })),
        )
    }

    /// Mean over all trailing dims, one value per leading-dim entry.
    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.is_empty() {
            return Err(CoreError::ShapeMismatch("row_mean on scalar".into()));
        }
        let bsz = xs[0];
        let block = self.values[x.0].numel() / bsz;
        let data: Vec<f64> = (0..bsz)
            .map(|b| {
                self.values[x.0].data()[b * block..(b + 1) * block]
                    .iter()
                    .sum::<f64>()
                    / block as f64
            })
            .collect();
        let value = Tensor::new(vec![bsz], data)?;
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let mut gx = vec![0.0; bsz * block];
                for b in 0..bsz {
                    let gv = g.data()[b] / block as f64;
                    gx[b * block..(b + 1) * block].fill(gv);
                }
                sink.add(x, Tensor::new(xs.clone(), gx).expect("grad shape"));
            })),
        ))
    }

    /// `(1/B) * sum_b w_b x_b` for `x[B]`.
    pub fn weighted_mean(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 1 || xs[0] != weights.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "weighted_mean: x {xs:?} vs {} weights",
                weights.len()
            )));
        }
        let bsz = xs[0];
        let value = Tensor::scalar(
            self.values[x.0]
                .data()
                .iter()
                .zip(&weights)
                .map(|(&v, &w)| v * w)
                .sum::<f64>()
                / bsz as f64,
        );
        Ok(self.push(
            value,
            Some(Box::new(move |_values, g, sink| {
                let gv = g.item();
                let gx: Vec<f64> = weights.iter().map(|&w| gv * w / bsz as f64).collect();
                sink.add(x, Tensor::new(vec![bsz], gx).expect("grad shape"));
            })),
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].numel();
        let value = Tensor::scalar(self.values[x.0].mean());
        self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                let gv = g.item() / n as f64;
                sink.add(x, Tensor::full(values[x.0].shape(), gv));
            })),
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.values[x.0].data().iter().sum());
        self.push(
            value,
            Some(Box::new(move |values, g, sink| {
                sink.add(x, Tensor::full(values[x.0].shape(), g.item()));
            })),
        )
    }
}

fn swap12(x: &Tensor, d0: usize, d1: usize, d2: usize, d3: usize) -> Tensor {
    let mut data = vec![0.0; x.numel()];
    let xv = x.data();
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let src = ((a * d1 + b) * d2 + c) * d3;
                let dst = ((a * d2 + c) * d1 + b) * d3;
                data[dst..dst + d3].copy_from_slice(&xv[src..src + d3]);
            }
        }
    }
    Tensor::new(vec![d0, d2, d1, d3], data).expect("swap12 shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::with_grad();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn grad_of_sum_of_matmul_is_outer_structure() {
        // loss = sum(x · W), x fixed => dL/dW[i][j] = sum over rows of x[., i].
        let mut params = ParamSet::new();
        let w = params
            .add("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let mut tape = Tape::with_grad();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap());
        let wn = tape.param(&params, w);
        let y = tape.matmul(x, wn).unwrap();
        let loss = tape.sum_all(y);
        let store = tape.backward(loss).unwrap();
        tape.write_param_grads(&store, &mut params);
        // dW[i][j] = sum_r x[r][i]
        let g = &params.get(w).grad;
        assert_eq!(g.data(), &[2.5, 2.5, -1.0, -1.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut params = ParamSet::new();
        let used = params.add("used", Tensor::scalar(2.0)).unwrap();
        let unused = params.add("unused", Tensor::scalar(5.0)).unwrap();
        let mut tape = Tape::with_grad();
        let u = tape.param(&params, used);
        let _ = tape.param(&params, unused);
        let loss = tape.sum_all(u);
        let store = tape.backward(loss).unwrap();
        tape.write_param_grads(&store, &mut params);
        assert_eq!(params.get(used).grad.item(), 1.0);
        assert_eq!(params.get(unused).grad.item(), 0.0);
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(params.add("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn rebinding_accumulates_through_one_node() {
        // y = w*w uses the same parameter twice; dy/dw = 2w.
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::with_grad();
        let a = tape.param(&params, w);
        let b = tape.param(&params, w);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(y);
        let store = tape.backward(loss).unwrap();
        tape.write_param_grads(&store, &mut params);
        assert_eq!(params.get(w).grad.item(), 6.0);
    }

    #[test]
    fn softmax_causal_rows_are_convex_weights() {
        let mut tape = Tape::with_grad();
        let x = tape.leaf(Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap());
        let y = tape.softmax_causal(x).unwrap();
        let v = tape.value(y);
        for i in 0..3 {
            let row = &v.data()[i * 3..(i + 1) * 3];
            let sum: f64 = row[..=i].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for &z in &row[i + 1..] {
                assert_eq!(z, 0.0);
            }
        }
    }
}

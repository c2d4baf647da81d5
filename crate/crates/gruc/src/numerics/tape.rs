//! Reverse-mode autodiff on an arena tape.
//!
//! Forward calls evaluate eagerly and append one [`Node`] each; [`Var`] is an
//! index into the arena. `backward` seeds the loss with 1 and sweeps the arena
//! once in reverse index order, which is a valid topological order because a
//! node can only refer to earlier nodes. Accumulation order is therefore fixed
//! by construction order, independent of thread count or hash-map iteration,
//! so gradients are bit-reproducible.
//!
//! Every produced value is checked for finiteness on the spot; a NaN or an
//! infinity surfaces as [`Error::NonFinite`] naming the operation (and the
//! parameter, for parameter leaves) instead of propagating silently.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tape node. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Constant leaf: instance data, masks, literals. Receives no gradient.
    Input,
    /// Trainable leaf bound to a named parameter.
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    /// `a * x + b` elementwise with constant a, b; only the scale matters
    /// for the backward pass.
    Affine(Var, f64),
    /// Vector scaled by a one-element tensor.
    ScaleBy(Var, Var),
    /// Matrix-vector product, matrix first.
    MatVec(Var, Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    /// Contiguous sub-vector `[start, start+len)` of the source.
    Slice(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    /// Numerically stable softmax over the whole vector.
    Softmax(Var),
    /// Numerically stable log(sum(exp(x))) reduced to one element.
    LogSumExp(Var),
    /// Sum of all elements, one-element result.
    Sum(Var),
    /// `sum_j coeffs[j] * items[j]` with vector items.
    WeightedSum(Var, Vec<Var>),
    /// Elementwise sum of same-length vectors.
    SumVecs(Vec<Var>),
    /// Clamp into `[lo, hi]`; gradient passes only through the interior.
    Clamp(Var, f64, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Parameter name for `Op::Param` leaves; names error messages and keys
    /// the gradient map.
    name: Option<Box<str>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter leaves already on this tape, so repeated lookups share one
    /// node and gradients accumulate in a single slot.
    bound: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, context: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(context.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            name: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- leaves ---------------------------------------------------------

    /// Constant leaf from an owned tensor.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Constant rank-1 leaf from a slice.
    pub fn input_vec(&mut self, values: &[f64]) -> Result<Var> {
        self.input(Tensor::vector(values.to_vec()))
    }

    /// Constant zero vector of length `len`.
    pub fn zeros(&mut self, len: usize) -> Result<Var> {
        self.input(Tensor::zeros(&[len]))
    }

    /// Binds the named parameter as a trainable leaf. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = params.get(name)?.clone();
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        self.nodes.push(Node {
            value,
            op: Op::Param,
            name: Some(name.into()),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, context: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dimension(context, format!("shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Mul(a, b), "mul")
    }

    /// `scale * x + shift` with constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        if !(scale.is_finite() && shift.is_finite()) {
            return Err(Error::NonFinite("affine constants".into()));
        }
        let data = self.value(x).data().iter().map(|v| scale * v + shift).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Affine(x, scale), "affine")
    }

    /// `x * s` where `s` is a one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let scale = self.value(s).item().map_err(|_| {
            Error::dimension("scale_by", format!("scale has shape {:?}", self.value(s).shape()))
        })?;
        let data = self.value(x).data().iter().map(|v| v * scale).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::ScaleBy(x, s), "scale_by")
    }

    // ----- linear algebra ---------------------------------------------------

    /// `w @ x` for rank-2 `w` and rank-1 `x`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let wname = self.nodes[w.0]
            .name
            .as_deref()
            .unwrap_or("matrix")
            .to_string();
        let (rows, cols) = (self.value(w).rows()?, self.value(w).cols()?);
        let xlen = self.value(x).len();
        if self.value(x).shape().len() != 1 || xlen != cols {
            return Err(Error::dimension(
                format!("matvec({wname})"),
                format!(
                    "matrix is {rows}x{cols}, vector has shape {:?}",
                    self.value(x).shape()
                ),
            ));
        }
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            *slot = row.iter().zip(xd).map(|(a, b)| a * b).sum();
        }
        self.push(Tensor::vector(out), Op::MatVec(w, x), &format!("matvec({wname})"))
    }

    /// Inner product of two same-length vectors, one-element result.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(v), Op::Dot(a, b), "dot")
    }

    // ----- structure --------------------------------------------------------

    /// Concatenation of rank-1 parts in the given order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::domain("concat", "no parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape().len() != 1 {
                return Err(Error::dimension(
                    "concat",
                    format!("part has shape {:?}", self.value(p).shape()),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat")
    }

    /// Sub-vector `[start, start+len)` of a rank-1 source.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.value(x).len();
        if self.value(x).shape().len() != 1 || start + len > total {
            return Err(Error::dimension(
                "slice",
                format!(
                    "[{start}, {}) of shape {:?}",
                    start + len,
                    self.value(x).shape()
                ),
            ));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        self.push(Tensor::vector(data), Op::Slice(x, start), "slice")
    }

    // ----- nonlinearities ---------------------------------------------------

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        // Branch keeps exp() off large positive arguments; both sides are
        // exact where they apply.
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Relu(x), "relu")
    }

    /// Natural log; rejects non-positive inputs rather than producing -inf.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("ln", "non-positive input"));
        }
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Ln(x), "ln")
    }

    /// Softmax over a rank-1 input. The max subtraction is a constant shift
    /// (softmax is shift-invariant), so the backward rule ignores it.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::domain("softmax", "empty input"));
        }
        let xd = self.value(x).data();
        let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xd.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data = exps.iter().map(|e| e / sum).collect();
        self.push(Tensor::vector(data), Op::Softmax(x), "softmax")
    }

    /// log(sum(exp(x))) over a rank-1 input, one-element result.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(Error::domain("logsumexp", "empty input"));
        }
        let xd = self.value(x).data();
        let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xd.iter().map(|v| (v - max).exp()).sum();
        self.push(Tensor::scalar(max + sum.ln()), Op::LogSumExp(x), "logsumexp")
    }

    /// Sum of all elements, one-element result.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x), "sum")
    }

    /// `sum_j coeffs[j] * items[j]`. `coeffs` is rank 1 with one entry per
    /// item; items are same-length rank-1 vectors.
    pub fn weighted_sum(&mut self, coeffs: Var, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::domain("weighted_sum", "no items"));
        }
        if self.value(coeffs).len() != items.len() {
            return Err(Error::dimension(
                "weighted_sum",
                format!("{} coefficients for {} items", self.value(coeffs).len(), items.len()),
            ));
        }
        let dim = self.value(items[0]).len();
        for &it in items {
            if self.value(it).shape() != [dim] {
                return Err(Error::dimension(
                    "weighted_sum",
                    format!("item shape {:?}, expected [{dim}]", self.value(it).shape()),
                ));
            }
        }
        let mut out = vec![0.0; dim];
        let cd = self.value(coeffs).data().to_vec();
        for (j, &it) in items.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.value(it).data()) {
                *o += cd[j] * v;
            }
        }
        self.push(
            Tensor::vector(out),
            Op::WeightedSum(coeffs, items.to_vec()),
            "weighted_sum",
        )
    }

    /// Elementwise sum of same-length vectors.
    pub fn sum_vecs(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::domain("sum_vecs", "no items"));
        }
        let dim = self.value(items[0]).len();
        let mut out = vec![0.0; dim];
        for &it in items {
            if self.value(it).shape() != [dim] {
                return Err(Error::dimension(
                    "sum_vecs",
                    format!("item shape {:?}, expected [{dim}]", self.value(it).shape()),
                ));
            }
            for (o, v) in out.iter_mut().zip(self.value(it).data()) {
                *o += v;
            }
        }
        self.push(Tensor::vector(out), Op::SumVecs(items.to_vec()), "sum_vecs")
    }

    /// Clamp into `[lo, hi]`. Gradient is identity strictly inside the
    /// interval and zero elsewhere.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::domain("clamp", format!("invalid interval [{lo}, {hi}]")));
        }
        let data = self.value(x).data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_shape(&shape, data)?, Op::Clamp(x, lo, hi), "clamp")
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so the
    /// expectation is unchanged; in eval mode this is the identity. The mask
    /// is drawn from `rng`, making masks a pure function of the stream.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::domain("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let m = self.input(Tensor::from_shape(&shape, mask)?)?;
        self.mul(x, m)
    }

    // ----- composite helpers ------------------------------------------------

    /// `W @ x`, plus `{name}.bias` when the parameter set has one.
    pub fn linear(&mut self, params: &ParameterSet, name: &str, x: Var) -> Result<Var> {
        let w = self.param(params, name)?;
        let y = self.matvec(w, x)?;
        let bias_name = format!("{name}.bias");
        if params.contains(&bias_name) {
            let b = self.param(params, &bias_name)?;
            self.add(y, b)
        } else {
            Ok(y)
        }
    }

    // ----- backward ---------------------------------------------------------

    /// Gradients of the one-element `loss` with respect to every node that
    /// influences it. Sweeps the arena once in reverse construction order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dimension(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            // Parents always precede children, so the incoming gradient lives
            // in `right[0]` and every accumulation target in `left`.
            let (left, right) = grads.split_at_mut(id);
            let Some(g) = right[0].as_ref() else { continue };
            let g = g.data();
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    accumulate(left, *a, self.value(*a).shape(), |d| add_scaled(d, g, 1.0));
                    accumulate(left, *b, self.value(*b).shape(), |d| add_scaled(d, g, 1.0));
                }
                Op::Sub(a, b) => {
                    accumulate(left, *a, self.value(*a).shape(), |d| add_scaled(d, g, 1.0));
                    accumulate(left, *b, self.value(*b).shape(), |d| add_scaled(d, g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    accumulate(left, *a, self.value(*a).shape(), |d| {
                        for ((s, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                            *s += gi * bi;
                        }
                    });
                    accumulate(left, *b, self.value(*b).shape(), |d| {
                        for ((s, gi), ai) in d.iter_mut().zip(g).zip(av) {
                            *s += gi * ai;
                        }
                    });
                }
                Op::Affine(x, scale) => {
                    accumulate(left, *x, self.value(*x).shape(), |d| add_scaled(d, g, *scale));
                }
                Op::ScaleBy(x, s) => {
                    let scale = self.value(*s).data()[0];
                    let xv = self.value(*x).data();
                    accumulate(left, *x, self.value(*x).shape(), |d| add_scaled(d, g, scale));
                    let ds: f64 = g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum();
                    accumulate(left, *s, &[1], |d| d[0] += ds);
                }
                Op::MatVec(w, x) => {
                    let cols = self.value(*w).cols().expect("validated at forward");
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    accumulate(left, *w, self.value(*w).shape(), |d| {
                        for (r, gi) in g.iter().enumerate() {
                            let row = &mut d[r * cols..(r + 1) * cols];
                            for (slot, xj) in row.iter_mut().zip(xv) {
                                *slot += gi * xj;
                            }
                        }
                    });
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for (r, gi) in g.iter().enumerate() {
                            let row = &wv[r * cols..(r + 1) * cols];
                            for (slot, wj) in d.iter_mut().zip(row) {
                                *slot += gi * wj;
                            }
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let gs = g[0];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    accumulate(left, *a, self.value(*a).shape(), |d| add_scaled(d, bv, gs));
                    accumulate(left, *b, self.value(*b).shape(), |d| add_scaled(d, av, gs));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let gp = &g[offset..offset + len];
                        accumulate(left, p, self.value(p).shape(), |d| add_scaled(d, gp, 1.0));
                        offset += len;
                    }
                }
                Op::Slice(x, start) => {
                    let len = node.value.len();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        add_scaled(&mut d[*start..start + len], g, 1.0);
                    });
                }
                Op::Tanh(x) => {
                    let yv = node.value.data();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for ((s, gi), yi) in d.iter_mut().zip(g).zip(yv) {
                            *s += gi * (1.0 - yi * yi);
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for ((s, gi), yi) in d.iter_mut().zip(g).zip(yv) {
                            *s += gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for ((s, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                            if *xi > 0.0 {
                                *s += gi;
                            }
                        }
                    });
                }
                Op::Ln(x) => {
                    let xv = self.value(*x).data();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for ((s, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                            *s += gi / xi;
                        }
                    });
                }
                Op::Softmax(x) => {
                    let yv = node.value.data();
                    let inner: f64 = g.iter().zip(yv).map(|(gi, yi)| gi * yi).sum();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for ((s, gi), yi) in d.iter_mut().zip(g).zip(yv) {
                            *s += yi * (gi - inner);
                        }
                    });
                }
                Op::LogSumExp(x) => {
                    // d/dx_i = softmax(x)_i, recovered as exp(x_i - lse).
                    let lse = node.value.data()[0];
                    let gs = g[0];
                    let xv = self.value(*x).data();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for (s, xi) in d.iter_mut().zip(xv) {
                            *s += gs * (xi - lse).exp();
                        }
                    });
                }
                Op::Sum(x) => {
                    let gs = g[0];
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for s in d.iter_mut() {
                            *s += gs;
                        }
                    });
                }
                Op::WeightedSum(coeffs, items) => {
                    let cv = self.value(*coeffs).data().to_vec();
                    for (j, &it) in items.iter().enumerate() {
                        let iv = self.value(it).data();
                        accumulate(left, it, self.value(it).shape(), |d| add_scaled(d, g, cv[j]));
                        let dc: f64 = g.iter().zip(iv).map(|(gi, vi)| gi * vi).sum();
                        accumulate(left, *coeffs, &[cv.len()], |d| d[j] += dc);
                    }
                }
                Op::SumVecs(items) => {
                    for &it in items {
                        accumulate(left, it, self.value(it).shape(), |d| add_scaled(d, g, 1.0));
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x).data();
                    accumulate(left, *x, self.value(*x).shape(), |d| {
                        for ((s, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                            if *lo < *xi && *xi < *hi {
                                *s += gi;
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of the bound parameters, keyed by name. Parameters that were
    /// bound but not reached by the loss get explicit zeros, so the map always
    /// covers exactly the bound set.
    pub fn param_grads(&self, grads: &Gradients) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (name, &var) in &self.bound {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(var).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Runs `f` on the gradient slot for `target`, materializing zeros first.
fn accumulate(
    slots: &mut [Option<Tensor>],
    target: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [f64]),
) {
    let slot = &mut slots[target.0];
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

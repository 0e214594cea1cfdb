//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A `Tape` records one forward pass; `backward` walks it in reverse and
//! accumulates gradients into every node that requires them. Nodes are
//! addressed by copyable [`Var`] handles. Parameters are bound by name with
//! [`Tape::param`] so the same tensor used twice accumulates into a single
//! node, and [`Tape::param_grads`] returns gradients keyed by those names.
//!
//! The tape is confined to one thread per forward/backward pass. Matmul
//! multiply-accumulate counts are tallied per tag (see [`Tape::set_tag`])
//! for operation-count instrumentation.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleBy { a: Var, s: Var },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Tanh { a: Var },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Detach,
}

struct Node {
    op: Op,
    value: Tensor,
    requires: bool,
    name: Option<String>,
}

pub struct Tape {
    nodes: Vec<Node>,
    by_name: HashMap<String, Var>,
    grads: Vec<Option<Vec<f64>>>,
    macs: BTreeMap<&'static str, u64>,
    tag: &'static str,
}

const GELU_C: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            by_name: HashMap::new(),
            grads: Vec::new(),
            macs: BTreeMap::new(),
            tag: "default",
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Anonymous differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a named parameter. Repeated binds of the same name return the
    /// same node so gradient contributions accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, trainable);
        self.nodes[v.0].name = Some(name.to_string());
        self.by_name.insert(name.to_string(), v);
        v
    }

    // ── MAC instrumentation ──────────────────────────────────────────

    /// Route subsequent matmul MAC counts to `tag`.
    pub fn set_tag(&mut self, tag: &'static str) {
        self.tag = tag;
    }

    pub fn current_tag(&self) -> &'static str {
        self.tag
    }

    fn count_macs(&mut self, n: u64) {
        *self.macs.entry(self.tag).or_insert(0) += n;
    }

    pub fn macs_for(&self, tag: &str) -> u64 {
        self.macs.get(tag).copied().unwrap_or(0)
    }

    pub fn macs_total(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn macs_by_tag(&self) -> &BTreeMap<&'static str, u64> {
        &self.macs
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Elementwise add. The rhs may have a shape that is a suffix of the
    /// lhs shape, in which case it broadcasts over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = broadcast_zip(va, vb, |x, y| x + y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    /// Elementwise multiply with the same broadcast rule as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = broadcast_zip(va, vb, |x, y| x * y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul { a, b }, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.grad = None;
        for x in &mut out.data {
            *x *= c;
        }
        let req = self.requires(a);
        self.push(out, Op::Scale { a, c }, req)
    }

    /// Multiply a tensor by a learnable scalar of shape [1].
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.numel() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a scalar of shape [1], got {:?}",
                sv.shape
            )));
        }
        let c = sv.data[0];
        let mut out = self.nodes[a.0].value.clone();
        out.grad = None;
        for x in &mut out.data {
            *x *= c;
        }
        let req = self.requires(a) || self.requires(s);
        Ok(self.push(out, Op::ScaleBy { a, s }, req))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                va.shape, vb.shape
            )));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let data = matmul_raw(&va.data, &vb.data, m, k, n);
        self.count_macs((m * k * n) as u64);
        let out = Tensor::new(vec![m, n], data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Matmul { a, b }, req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose expects a 2-D tensor, got {:?}",
                va.shape
            )));
        }
        let (m, n) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::Transpose { a }, req))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.grad = None;
        for x in &mut out.data {
            *x = x.tanh();
        }
        let req = self.requires(a);
        self.push(out, Op::Tanh { a }, req)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.grad = None;
        for x in &mut out.data {
            *x = crate::tensor::gelu_val(*x);
        }
        let req = self.requires(a);
        self.push(out, Op::Gelu { a }, req)
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (rows, cols) = va.rows_cols();
        if cols == 0 {
            return Err(Error::Shape("softmax over empty rows".into()));
        }
        let mut data = va.data.clone();
        for r in 0..rows {
            crate::tensor::softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(va.shape.clone(), data)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::SoftmaxRows { a }, req))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = *vx.shape.last().ok_or_else(|| {
            Error::Shape("layer_norm on rank-0 tensor".into())
        })?;
        if vg.shape != [d] || vb.shape != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} needs gain/bias of shape [{}], got {:?}/{:?}",
                vx.shape, d, vg.shape, vb.shape
            )));
        }
        let (rows, _) = vx.rows_cols();
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            crate::tensor::layer_norm_row(
                &vx.data[r * d..(r + 1) * d],
                &vg.data,
                &vb.data,
                eps,
                &mut data[r * d..(r + 1) * d],
            );
        }
        let out = Tensor::new(vx.shape.clone(), data)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, req))
    }

    /// Mean over rows of −log softmax(logits)[target]; returns shape [1].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if vl.rank() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects 2-D logits, got {:?}",
                vl.shape
            )));
        }
        let (n, vocab) = (vl.shape[0], vl.shape[1]);
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows but {} targets",
                n,
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index(format!(
                    "target {t} out of range for vocab {vocab}"
                )));
            }
            let row = &vl.data[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        let req = self.requires(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            req,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.numel() as f64;
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, req)
    }

    /// Concatenate along `axis`. All other axes must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut out_shape = first.shape.clone();
        for &p in &parts[1..] {
            let s = &self.nodes[p.0].value.shape;
            if s.len() != rank {
                return Err(Error::Shape(format!(
                    "concat rank mismatch: {:?} vs {:?}",
                    first.shape, s
                )));
            }
            for ax in 0..rank {
                if ax != axis && s[ax] != out_shape[ax] {
                    return Err(Error::Shape(format!(
                        "concat: shapes {:?} and {:?} differ off-axis",
                        out_shape, s
                    )));
                }
            }
            out_shape[axis] += s[axis];
        }
        // views: outer = product of axes before `axis`, inner = after
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let len_ax = v.shape[axis];
            for o in 0..outer {
                let src = &v.data[o * len_ax * inner..(o + 1) * len_ax * inner];
                let dst_start = (o * total_axis + offset) * inner;
                data[dst_start..dst_start + len_ax * inner].copy_from_slice(src);
            }
            offset += len_ax;
        }
        let out = Tensor::new(out_shape, data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    /// Rows start..end along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.rank() < 1 || end > va.shape[0] || start > end {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{end} out of range for {:?}",
                va.shape
            )));
        }
        let inner: usize = va.shape[1..].iter().product();
        let data = va.data[start * inner..end * inner].to_vec();
        let mut shape = va.shape.clone();
        shape[0] = end - start;
        let out = Tensor::new(shape, data)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::SliceRows { a, start }, req))
    }

    /// Columns start..end along the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let d = *va
            .shape
            .last()
            .ok_or_else(|| Error::Shape("slice_cols on rank-0 tensor".into()))?;
        if end > d || start > end {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} out of range for {:?}",
                va.shape
            )));
        }
        let (rows, _) = va.rows_cols();
        let w = end - start;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w]
                .copy_from_slice(&va.data[r * d + start..r * d + end]);
        }
        let mut shape = va.shape.clone();
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new(shape, data)?;
        let req = self.requires(a);
        Ok(self.push(out, Op::SliceCols { a, start }, req))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != va.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                va.shape, shape
            )));
        }
        let out = Tensor::new(shape.to_vec(), va.data.clone())?;
        let req = self.requires(a);
        Ok(self.push(out, Op::Reshape { a }, req))
    }

    /// Gather rows of `table` by token id; backward scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be 2-D, got {:?}",
                vt.shape
            )));
        }
        let (v, d) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "token id {id} out of range for table of {v} rows"
                )));
            }
            data.extend_from_slice(&vt.data[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let req = self.requires(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// Identity forward; exactly zero gradient flows upstream.
    pub fn detach(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.grad = None;
        self.push(out, Op::Detach, false)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of all requiring nodes
    /// are retained and can be read with `grad` / `param_grads`.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        if !lv.data[0].is_finite() {
            return Err(Error::Numeric(format!("loss is {}", lv.data[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires {
                continue;
            }
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads.clone();
        Ok(grads)
    }

    fn propagate(&mut self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.requires(a) {
                    self.accumulate(grads, a, gout);
                }
                if self.requires(b) {
                    let vb = &self.nodes[b.0].value;
                    if vb.numel() == gout.len() {
                        self.accumulate(grads, b, gout);
                    } else {
                        let reduced = reduce_to_suffix(gout, vb.numel());
                        self.accumulate(grads, b, &reduced);
                    }
                }
            }
            Op::Mul { a, b } => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                if self.requires(a) {
                    // dA = gout ∘ broadcast(B)
                    let mut g = vec![0.0; va.numel()];
                    for i in 0..g.len() {
                        g[i] = gout[i] * vb.data[i % vb.numel()];
                    }
                    self.accumulate(grads, a, &g);
                }
                if self.requires(b) {
                    let mut g = vec![0.0; vb.numel()];
                    for i in 0..gout.len() {
                        g[i % vb.numel()] += gout[i] * va.data[i];
                    }
                    self.accumulate(grads, b, &g);
                }
            }
            Op::Scale { a, c } => {
                if self.requires(a) {
                    let g: Vec<f64> = gout.iter().map(|x| x * c).collect();
                    self.accumulate(grads, a, &g);
                }
            }
            Op::ScaleBy { a, s } => {
                let sval = self.nodes[s.0].value.data[0];
                if self.requires(a) {
                    let g: Vec<f64> = gout.iter().map(|x| x * sval).collect();
                    self.accumulate(grads, a, &g);
                }
                if self.requires(s) {
                    let va = &self.nodes[a.0].value;
                    let g: f64 = gout.iter().zip(&va.data).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, s, &[g]);
                }
            }
            Op::Matmul { a, b } => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.requires(a) {
                    // dA = dC · Bᵀ
                    let g = matmul_nt_raw(gout, &vb.data, m, n, k);
                    self.count_macs((m * n * k) as u64);
                    self.accumulate(grads, a, &g);
                }
                if self.requires(b) {
                    // dB = Aᵀ · dC
                    let g = matmul_tn_raw(&va.data, gout, m, k, n);
                    self.count_macs((m * k * n) as u64);
                    self.accumulate(grads, b, &g);
                }
            }
            Op::Transpose { a } => {
                if self.requires(a) {
                    let vo = &self.nodes[idx].value; // [n, m]
                    let (n, m) = (vo.shape[0], vo.shape[1]);
                    let mut g = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            g[j * n + i] = gout[i * m + j];
                        }
                    }
                    self.accumulate(grads, a, &g);
                }
            }
            Op::Tanh { a } => {
                if self.requires(a) {
                    let vo = &self.nodes[idx].value;
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&vo.data)
                        .map(|(go, y)| go * (1.0 - y * y))
                        .collect();
                    self.accumulate(grads, a, &g);
                }
            }
            Op::Gelu { a } => {
                if self.requires(a) {
                    let va = &self.nodes[a.0].value;
                    let c = sqrt_2_over_pi();
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&va.data)
                        .map(|(go, &x)| {
                            let u = c * (x + GELU_C * x * x * x);
                            let t = u.tanh();
                            let du = c * (1.0 + 3.0 * GELU_C * x * x);
                            go * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    self.accumulate(grads, a, &g);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.requires(a) {
                    let vo = &self.nodes[idx].value;
                    let (rows, cols) = vo.rows_cols();
                    let mut g = vec![0.0; vo.numel()];
                    for r in 0..rows {
                        let p = &vo.data[r * cols..(r + 1) * cols];
                        let go = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(go).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            g[r * cols + j] = p[j] * (go[j] - dot);
                        }
                    }
                    self.accumulate(grads, a, &g);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.nodes[x.0].value.clone();
                let vg = self.nodes[gain.0].value.clone();
                let d = *vx.shape.last().unwrap();
                let (rows, _) = vx.rows_cols();
                let mut gx = vec![0.0; vx.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let row = &vx.data[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dyg: Vec<f64> =
                        go.iter().zip(&vg.data).map(|(a, b)| a * b).collect();
                    let mean_dyg = dyg.iter().sum::<f64>() / d as f64;
                    let mean_dyg_xhat =
                        dyg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] =
                            (dyg[j] - mean_dyg - xhat[j] * mean_dyg_xhat) * inv;
                        gg[j] += go[j] * xhat[j];
                        gb[j] += go[j];
                    }
                }
                if self.requires(x) {
                    self.accumulate(grads, x, &gx);
                }
                if self.requires(gain) {
                    self.accumulate(grads, gain, &gg);
                }
                if self.requires(bias) {
                    self.accumulate(grads, bias, &gb);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.requires(logits) {
                    let vl = &self.nodes[logits.0].value;
                    let (n, vocab) = (vl.shape[0], vl.shape[1]);
                    let scale = gout[0] / n as f64;
                    let mut g = vec![0.0; vl.numel()];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &vl.data[r * vocab..(r + 1) * vocab];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / sum;
                            g[r * vocab + j] =
                                scale * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(grads, logits, &g);
                }
            }
            Op::Sum { a } => {
                if self.requires(a) {
                    let n = self.nodes[a.0].value.numel();
                    let g = vec![gout[0]; n];
                    self.accumulate(grads, a, &g);
                }
            }
            Op::Mean { a } => {
                if self.requires(a) {
                    let n = self.nodes[a.0].value.numel();
                    let g = vec![gout[0] / n as f64; n];
                    self.accumulate(grads, a, &g);
                }
            }
            Op::Concat { parts, axis } => {
                let vo = &self.nodes[idx].value;
                let outer: usize = vo.shape[..axis].iter().product();
                let inner: usize = vo.shape[axis + 1..].iter().product();
                let total_axis = vo.shape[axis];
                let mut offset = 0;
                for &p in &parts {
                    let len_ax = self.nodes[p.0].value.shape[axis];
                    if self.requires(p) {
                        let mut g = vec![0.0; outer * len_ax * inner];
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            g[o * len_ax * inner..(o + 1) * len_ax * inner]
                                .copy_from_slice(
                                    &gout[src_start..src_start + len_ax * inner],
                                );
                        }
                        self.accumulate(grads, p, &g);
                    }
                    offset += len_ax;
                }
            }
            Op::SliceRows { a, start } => {
                if self.requires(a) {
                    let va = &self.nodes[a.0].value;
                    let inner: usize = va.shape[1..].iter().product();
                    let mut g = vec![0.0; va.numel()];
                    g[start * inner..start * inner + gout.len()].copy_from_slice(gout);
                    self.accumulate(grads, a, &g);
                }
            }
            Op::SliceCols { a, start } => {
                if self.requires(a) {
                    let va = &self.nodes[a.0].value;
                    let d = *va.shape.last().unwrap();
                    let (rows, _) = va.rows_cols();
                    let w = gout.len() / rows;
                    let mut g = vec![0.0; va.numel()];
                    for r in 0..rows {
                        g[r * d + start..r * d + start + w]
                            .copy_from_slice(&gout[r * w..(r + 1) * w]);
                    }
                    self.accumulate(grads, a, &g);
                }
            }
            Op::Reshape { a } => {
                if self.requires(a) {
                    self.accumulate(grads, a, gout);
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires(table) {
                    let vt = &self.nodes[table.0].value;
                    let d = vt.shape[1];
                    let mut g = vec![0.0; vt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gout[r * d + j];
                        }
                    }
                    self.accumulate(grads, table, &g);
                }
            }
            Op::Detach => {}
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        match &mut grads[v.0] {
            Some(buf) => {
                for (x, y) in buf.iter_mut().zip(g) {
                    *x += y;
                }
            }
            None => grads[v.0] = Some(g.to_vec()),
        }
    }

    /// Gradient of a node from the last `backward`, as a tensor.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref().map(|buf| {
                Tensor::new(self.nodes[v.0].value.shape.clone(), buf.clone()).unwrap()
            })
        })
    }

    /// Gradients of all named trainable parameters from the last `backward`.
    /// Parameters that did not participate are absent.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.by_name {
            if !self.nodes[v.0].requires {
                continue;
            }
            if let Some(t) = self.grad(v) {
                out.insert(name.clone(), t);
            }
        }
        out
    }
}

/// rhs broadcasts over leading axes when its shape is a suffix of lhs shape.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let ok = a.shape == b.shape
        || (b.shape.len() <= a.shape.len()
            && a.shape[a.shape.len() - b.shape.len()..] == b.shape[..]
            && b.numel() > 0);
    if !ok {
        return Err(Error::Shape(format!(
            "elementwise op: {:?} vs {:?} (rhs must equal lhs or be a suffix of it)",
            a.shape, b.shape
        )));
    }
    let bn = b.numel();
    let data: Vec<f64> = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % bn]))
        .collect();
    Tensor::new(a.shape.clone(), data)
}

/// Sum gout over leading axes down to `n` trailing elements.
fn reduce_to_suffix(gout: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &g) in gout.iter().enumerate() {
        out[i % n] += g;
    }
    out
}

/// Max relative discrepancy between analytic and central-difference
/// gradients of a scalar-valued tensor function at `x`.
///
/// The relative error for one coordinate is
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    // analytic
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.value(out).shape
        )));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(&x.shape));

    // central differences
    let mut max_rel = 0.0;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let fp = {
            let mut t = Tape::new();
            let v = t.constant(xp);
            let o = f(&mut t, v)?;
            t.scalar_value(o)
        };
        let fm = {
            let mut t = Tape::new();
            let v = t.constant(xm);
            let o = f(&mut t, v)?;
            t.scalar_value(o)
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn add_mul_forward() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let s = t.add(a, b).unwrap();
        let p = t.mul(a, b).unwrap();
        assert_eq!(t.value(s).data, vec![11.0, 22.0, 33.0, 44.0]);
        assert_eq!(t.value(p).data, vec![10.0, 40.0, 90.0, 160.0]);
    }

    #[test]
    fn suffix_broadcast_add_backward() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = t.leaf(Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap());
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(b).unwrap().data, vec![2.0, 2.0, 2.0]);
        assert_eq!(t.grad(a).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn matmul_macs_counted_per_tag() {
        let mut t = Tape::new();
        t.set_tag("base");
        let a = t.constant(Tensor::zeros(&[3, 4]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        t.matmul(a, b).unwrap();
        t.set_tag("gca");
        let c = t.constant(Tensor::zeros(&[2, 4]));
        t.matmul(c, b).unwrap();
        assert_eq!(t.macs_for("base"), 3 * 4 * 5);
        assert_eq!(t.macs_for("gca"), 2 * 4 * 5);
        assert_eq!(t.macs_total(), 3 * 4 * 5 + 2 * 4 * 5);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let d = t.detach(x);
        let y = t.mul(d, d).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn param_binding_accumulates_across_uses() {
        let w = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut t = Tape::new();
        let w1 = t.param("w", &w, true);
        let w2 = t.param("w", &w, true);
        assert_eq!(w1, w2);
        let y = t.mul(w1, w2).unwrap(); // w^2
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let grads = t.param_grads();
        assert_eq!(grads["w"].data, vec![6.0, 8.0]); // d(w^2)/dw = 2w
    }

    #[test]
    fn frozen_param_has_no_gradient() {
        let w = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut t = Tape::new();
        let v = t.param("frozen", &w, false);
        let y = t.mul(v, v).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert!(t.param_grads().is_empty());
        assert!(t.grad(v).is_none());
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(t.softmax_rows(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c).shape, vec![3, 2]);
        let back = t.slice_rows(c, 2, 3).unwrap();
        assert_eq!(t.value(back).data, vec![5.0, 6.0]);
        let col = t.slice_cols(c, 1, 2).unwrap();
        assert_eq!(t.value(col).data, vec![2.0, 4.0, 6.0]);
        let loss = t.sum(back);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(b).unwrap().data, vec![1.0, 1.0]);
        assert_eq!(t.grad(a).unwrap().data, vec![0.0; 4]);
    }

    #[test]
    fn concat_axis1() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2, 2], vec![2.0, 9.0, 4.0, 9.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).shape, vec![2, 3]);
        assert_eq!(t.value(c).data, vec![1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let table = Tensor::new(vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let mut t = Tape::new();
        let tv = t.param("emb", &table, true);
        let e = t.embedding(tv, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(e).data, vec![20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let loss = t.sum(e);
        t.backward(loss).unwrap();
        let g = t.grad(tv).unwrap();
        assert_eq!(g.data, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn grad_check_composite_network() {
        let mut rng = Rng::new(17);
        let x = Tensor::randn(&mut rng, &[3, 4], 0.7);
        let w = Tensor::randn(&mut rng, &[4, 5], 0.5);
        let gain = Tensor::new(vec![5], vec![1.1, 0.9, 1.0, 1.2, 0.8]).unwrap();
        let bias = Tensor::new(vec![5], vec![0.1, -0.1, 0.0, 0.2, -0.2]).unwrap();
        let rel = grad_check(
            |t, xv| {
                let wv = t.constant(w.clone());
                let gv = t.constant(gain.clone());
                let bv = t.constant(bias.clone());
                let h = t.matmul(xv, wv)?;
                let h = t.layer_norm(h, gv, bv, 1e-5)?;
                let h = t.gelu(h);
                t.cross_entropy(h, &[0, 3, 2])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "composite grad check rel err {rel}");
    }

    #[test]
    fn grad_check_softmax_attention_pattern() {
        let mut rng = Rng::new(23);
        let x = Tensor::randn(&mut rng, &[2, 3], 0.8);
        let v = Tensor::randn(&mut rng, &[3, 2], 0.6);
        let rel = grad_check(
            |t, xv| {
                let vv = t.constant(v.clone());
                let p = t.softmax_rows(xv)?;
                let o = t.matmul(p, vv)?;
                let o = t.tanh(o);
                Ok(t.mean(o))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "softmax grad check rel err {rel}");
    }

    #[test]
    fn grad_check_scale_by_gate() {
        let a = Tensor::new(vec![1], vec![0.3]).unwrap();
        let base = Tensor::new(vec![2, 2], vec![0.4, -0.7, 1.1, 0.2]).unwrap();
        let rel = grad_check(
            |t, av| {
                let x = t.constant(base.clone());
                let g = t.tanh(av);
                let y = t.scale_by(x, g)?;
                Ok(t.sum(y))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-8, "gate grad check rel err {rel}");
    }

    #[test]
    fn grad_check_transpose_and_slice() {
        let mut rng = Rng::new(31);
        let x = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let rel = grad_check(
            |t, xv| {
                let xt = t.transpose(xv)?;
                let part = t.slice_cols(xt, 1, 3)?;
                let sq = t.mul(part, part)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-7, "transpose/slice grad check rel err {rel}");
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
        let mut t2 = Tape::new();
        let bad = t2.leaf(Tensor::scalar(f64::NAN));
        assert!(matches!(t2.backward(bad), Err(Error::Numeric(_))));
    }
}

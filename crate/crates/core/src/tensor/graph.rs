//! Append-only compute tape. Every operation pushes one node holding its
//! output value; `backward` walks the nodes once in reverse.

use super::kernels::{mm_acc, mm_at_acc, mm_bt_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used as a negative control for
/// gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// ReLU passes half of the upstream gradient.
    HalfReluGrad,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    MulChannel { x: Var, scale: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    Concat { a: Var, b: Var },
    ConcatRows { parts: Vec<Var> },
    Gather { x: Var, index: Vec<usize>, weight: Vec<f64>, fan_in: usize },
    SegmentMax { x: Var, argmax: Vec<usize> },
    BroadcastRows { x: Var },
    Reshape { x: Var },
    Rms { x: Var },
    DivShifted { x: Var, s: Var, eps: f64 },
    Sum { x: Var },
    Mean { x: Var },
    BceWithLogits { x: Var, labels: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Reverse-mode tape. Confined to one thread for the duration of a pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<Fault>,
    branches: u64,
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(17)
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise choice made so far (ReLU signs, max positions).
    /// Two passes with equal signatures evaluated the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.push(t, Op::Leaf, true)
    }

    /// Leaf tracked according to the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` did not influence the loss.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }

    // ---- operations ---------------------------------------------------

    /// `a[.., k] · b[k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), sb[0], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, tracked))
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ai = &ta[i * m * k..(i + 1) * m * k];
            let bi = &tb[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                mm_bt_acc(ai, bi, oi, m, k, n);
            } else {
                mm_acc(ai, bi, oi, m, k, n);
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }, tracked))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok((t, self.tracked(a) || self.tracked(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, tr))
    }

    fn channel_op(&mut self, x: Var, c: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sc.len() != 1 || sc[0] != *sx.last().unwrap() {
            return Err(dim_err(name, sx, sc));
        }
        let cv = self.value(c).data();
        let d = cv.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, cv[i % d]))
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok((t, self.tracked(x) || self.tracked(c)))
    }

    /// `x[.., d] + bias[d]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, tr) = self.channel_op(x, bias, "add_bias", |v, b| v + b)?;
        Ok(self.push(t, Op::AddBias { x, bias }, tr))
    }

    /// `x[.., d] ⊙ scale[d]`
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (t, tr) = self.channel_op(x, scale, "mul_channel", |v, s| v * s)?;
        Ok(self.push(t, Op::MulChannel { x, scale }, tr))
    }

    /// `x · b + bias` with a shared weight matrix.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.map(x, |v| v * factor);
        let tr = self.tracked(x);
        self.push(t, Op::Scale { x, factor }, tr)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let branches = self.nodes[x.0].value.data().chunks(64).fold(self.branches, |h, chunk| {
            mix(h, chunk.iter().enumerate().fold(0, |b, (i, &v)| b | (((v > 0.0) as u64) << i)))
        });
        self.branches = branches;
        let tr = self.tracked(x);
        self.push(t, Op::Relu { x }, tr)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let tr = self.tracked(x);
        self.push(t, Op::Sigmoid { x }, tr)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax axis", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let tr = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, tr))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err("concat", sa, sb));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..ta.rows() {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b }, tr))
    }

    /// Stack 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows needs at least one part"))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != d {
                return Err(dim_err("concat_rows", self.shape(*first), t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let tr = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::ConcatRows { parts: parts.to_vec() }, tr))
    }

    /// Row gather: output row `r` is `Σ_j weight[r·fan_in + j] · x[index[r·fan_in + j]]`,
    /// where rows of `x` are its last-axis slices. `out_lead` gives the leading
    /// output axes; the channel axis is appended.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, weight: Vec<f64>, fan_in: usize, out_lead: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        let out_rows: usize = out_lead.iter().product();
        if index.len() != out_rows * fan_in || weight.len() != index.len() || fan_in == 0 {
            return Err(dim_err("gather", &[index.len(), weight.len()], &[out_rows, fan_in]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("gather index {bad} out of range for {rows} rows")));
        }
        let src = t.data();
        let mut out = vec![0.0; out_rows * d];
        for r in 0..out_rows {
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..fan_in {
                let (s, w) = (index[r * fan_in + j], weight[r * fan_in + j]);
                for (ov, &xv) in o.iter_mut().zip(&src[s * d..(s + 1) * d]) {
                    *ov += w * xv;
                }
            }
        }
        let mut shape = out_lead.to_vec();
        shape.push(d);
        let tr = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index, weight, fan_in }, tr))
    }

    /// Plain row selection.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = index.len();
        self.gather(x, index.to_vec(), vec![1.0; n], 1, &[n])
    }

    /// Channelwise max over the first `valid[g]` members of each group of `x[G, K, d]`.
    pub fn segment_max(&mut self, x: Var, valid: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || valid.len() != shape[0] {
            return Err(dim_err("segment_max", &shape, &[valid.len()]));
        }
        let (groups, k, d) = (shape[0], shape[1], shape[2]);
        if valid.iter().any(|&c| c == 0 || c > k) {
            return Err(Error::contract("segment_max valid counts must be in 1..=K"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; groups * d];
        let mut argmax = vec![0usize; groups * d];
        for g in 0..groups {
            for c in 0..d {
                let mut best = g * k * d + c;
                for j in 1..valid[g] {
                    let at = g * k * d + j * d + c;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out[g * d + c] = src[best];
                argmax[g * d + c] = best;
            }
        }
        self.branches = argmax.iter().fold(self.branches, |h, &a| mix(h, a as u64));
        let tr = self.tracked(x);
        Ok(self.push(Tensor::new(vec![groups, d], out)?, Op::SegmentMax { x, argmax }, tr))
    }

    /// Channelwise max over all rows of `x[N, d]`, giving `[d]`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("max_rows", &s, &[2]));
        }
        let as3 = self.reshape(x, &[1, s[0], s[1]])?;
        let m = self.segment_max(as3, &[s[0]])?;
        self.reshape(m, &[s[1]])
    }

    /// Repeat vector `x[c]` as `n` rows, giving `[n, c]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || n == 0 {
            return Err(dim_err("broadcast_rows", &s, &[n]));
        }
        let data = self.value(x).data().repeat(n);
        let tr = self.tracked(x);
        Ok(self.push(Tensor::new(vec![n, s[0]], data)?, Op::BroadcastRows { x }, tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::Reshape { x }, tr))
    }

    /// Root-mean-square over every element, as a scalar.
    pub fn rms(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let ms = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        let tr = self.tracked(x);
        self.push(Tensor::scalar(ms.sqrt()), Op::Rms { x }, tr)
    }

    /// `x / (s + eps)` for a scalar node `s`.
    pub fn div_shifted(&mut self, x: Var, s: Var, eps: f64) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err("div_shifted", self.shape(x), self.shape(s)));
        }
        let denom = self.value(s).data()[0] + eps;
        let t = self.map(x, |v| v / denom);
        let tr = self.tracked(x) || self.tracked(s);
        Ok(self.push(t, Op::DivShifted { x, s, eps }, tr))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tr = self.tracked(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, tr)
    }

    /// Mean binary cross-entropy of logits against 0/1 labels, in the
    /// stable form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, x: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != labels.len() {
            return Err(dim_err("bce_with_logits", t.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::contract("bce_with_logits on empty input"));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / labels.len() as f64;
        let tr = self.tracked(x);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { x, labels: labels.to_vec() }, tr))
    }

    /// `bce_with_logits(x) − bce_with_logits(base)` computed without cancellation,
    /// so finite differences near `base` resolve far below the loss's own rounding.
    /// Its gradient is the loss gradient.
    pub fn bce_increment(&mut self, x: Var, labels: &[f64], base: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != labels.len() || base.len() != labels.len() {
            return Err(dim_err("bce_increment", t.shape(), &[labels.len(), base.len()]));
        }
        if labels.is_empty() {
            return Err(Error::contract("bce_increment on empty input"));
        }
        let softplus = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
        let total: f64 = t
            .data()
            .iter()
            .zip(labels.iter().zip(base))
            .map(|(&z, (&y, &b))| {
                let dz = z - b;
                // softplus(b + dz) − softplus(b) = ln(1 + σ(b)·(e^dz − 1))
                let ds = if dz.abs() < 1.0 {
                    (sigmoid(b) * dz.exp_m1()).ln_1p()
                } else {
                    softplus(z) - softplus(b)
                };
                ds - y * dz
            })
            .sum();
        let loss = total / labels.len() as f64;
        let tr = self.tracked(x);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { x, labels: labels.to_vec() }, tr))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.tracked(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.tracked {
                node.value.grad = Some(g.clone().unwrap_or_else(|| vec![0.0; node.value.numel()]));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), tb.shape()[0], tb.shape()[1]);
                send(*a, &mut |ga| mm_bt_acc(g, tb.data(), ga, m, n, k));
                send(*b, &mut |gb| mm_at_acc(ta.data(), g, gb, m, k, n));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                let (ad, bd) = (ta.data(), tb.data());
                send(*a, &mut |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            mm_acc(gi, bi, gai, m, n, k);
                        } else {
                            mm_bt_acc(gi, bi, gai, m, n, k);
                        }
                    }
                });
                send(*b, &mut |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // b is [n, k]: gb = gᵀ · a
                            mm_at_acc(gi, ai, gbi, m, n, k);
                        } else {
                            mm_at_acc(ai, gi, gbi, m, k, n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                send(*a, &mut |ga| axpy(ga, g, 1.0));
                send(*b, &mut |gb| axpy(gb, g, 1.0));
            }
            Op::Sub { a, b } => {
                send(*a, &mut |ga| axpy(ga, g, 1.0));
                send(*b, &mut |gb| axpy(gb, g, -1.0));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                send(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                send(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                send(*x, &mut |gx| axpy(gx, g, 1.0));
                send(*bias, &mut |gb| {
                    let d = gb.len();
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                });
            }
            Op::MulChannel { x, scale } => {
                let (xd, sd) = (val(*x).data(), val(*scale).data());
                let d = sd.len();
                send(*x, &mut |gx| {
                    for (i, &gv) in g.iter().enumerate() {
                        gx[i] += gv * sd[i % d];
                    }
                });
                send(*scale, &mut |gs| {
                    for (i, &gv) in g.iter().enumerate() {
                        gs[i % d] += gv * xd[i];
                    }
                });
            }
            Op::Scale { x, factor } => send(*x, &mut |gx| axpy(gx, g, *factor)),
            Op::Relu { x } => {
                let pass = if self.fault == Some(Fault::HalfReluGrad) { 0.5 } else { 1.0 };
                let xd = val(*x).data();
                send(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += pass * g[i];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yd = out.data();
                send(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * yd[i] * (1.0 - yd[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let yd = out.data();
                send(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * yd[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += yd[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let (da, db) = (val(*a).cols(), val(*b).cols());
                let rows = out.rows();
                send(*a, &mut |ga| {
                    for r in 0..rows {
                        axpy(&mut ga[r * da..(r + 1) * da], &g[r * (da + db)..r * (da + db) + da], 1.0);
                    }
                });
                send(*b, &mut |gb| {
                    for r in 0..rows {
                        axpy(&mut gb[r * db..(r + 1) * db], &g[r * (da + db) + da..(r + 1) * (da + db)], 1.0);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    send(p, &mut |gp| axpy(gp, &g[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::Gather { x, index, weight, fan_in } => {
                let d = out.cols();
                send(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..*fan_in {
                            let (s, w) = (index[r * fan_in + j], weight[r * fan_in + j]);
                            axpy(&mut gx[s * d..(s + 1) * d], gr, w);
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => send(*x, &mut |gx| {
                for (i, &src) in argmax.iter().enumerate() {
                    gx[src] += g[i];
                }
            }),
            Op::BroadcastRows { x } => send(*x, &mut |gx| {
                let c = gx.len();
                for (i, &gv) in g.iter().enumerate() {
                    gx[i % c] += gv;
                }
            }),
            Op::Reshape { x } => send(*x, &mut |gx| axpy(gx, g, 1.0)),
            Op::Rms { x } => {
                let sigma = out.data()[0];
                if sigma > 0.0 {
                    let xd = val(*x).data();
                    let c = g[0] / (xd.len() as f64 * sigma);
                    send(*x, &mut |gx| axpy(gx, xd, c));
                }
            }
            Op::DivShifted { x, s, eps } => {
                let denom = val(*s).data()[0] + eps;
                send(*x, &mut |gx| axpy(gx, g, 1.0 / denom));
                let xd = val(*x).data();
                send(*s, &mut |gs| {
                    let dot: f64 = g.iter().zip(xd).map(|(a, b)| a * b).sum();
                    gs[0] -= dot / (denom * denom);
                });
            }
            Op::Sum { x } => send(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean { x } => {
                let c = g[0] / val(*x).numel() as f64;
                send(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += c));
            }
            Op::BceWithLogits { x, labels } => {
                let xd = val(*x).data();
                let c = g[0] / labels.len() as f64;
                send(*x, &mut |gx| {
                    for i in 0..labels.len() {
                        gx[i] += c * (sigmoid(xd[i]) - labels[i]);
                    }
                });
            }
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

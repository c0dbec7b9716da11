//! Reverse-mode autodiff on a linear tape.
//!
//! Ops append nodes that hold the forward value and a record of their
//! inputs. Because every input precedes its consumers, walking the tape
//! backwards visits nodes in reverse topological order; gradients
//! accumulate additively where a value fans out. One tape per computation;
//! independent tapes are safe on separate threads.

use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Transpose(VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    MulElem(VarId, VarId),
    MulScalar(VarId, f64),
    AddRows(VarId, VarId),
    MulRows(VarId, VarId),
    SoftmaxRows(VarId),
    LayerNormRows(VarId),
    Gelu(VarId),
    Mse(VarId, VarId),
    Sum(VarId),
    CrossEntropyLogits(VarId, usize),
    Concat { parts: Vec<VarId>, axis: usize },
    Slice { src: VarId, axis: usize, start: usize, len: usize },
    Pick(VarId, usize),
    Ln(VarId),
    ClampMin(VarId, f64),
    CosSim(VarId, VarId),
    L2Normalize(VarId),
    Reshape(VarId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current node count; pair with [`truncate`](Self::truncate) to reuse a
    /// tape across repeated inference calls without re-binding leaves.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.backward_done = false;
    }

    /// Record a tensor as a graph input; its `requires_grad` flag decides
    /// whether backward populates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        let t = if t.requires_grad() { t.detached() } else { t };
        self.push(Op::Leaf, t, false)
    }

    /// Trainable leaf: copies the parameter's current values onto the tape.
    pub fn param(&mut self, p: &Tensor) -> VarId {
        self.push(Op::Leaf, p.detached().with_requires_grad(), true)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient populated by [`backward`](Self::backward), if any.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node { op, value, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn out(&mut self, op_name: &'static str, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = self.op_inputs(&op).iter().any(|&i| self.nodes[i.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(op, value, rg))
    }

    fn op_inputs(&self, op: &Op) -> Vec<VarId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MulElem(a, b)
            | Op::AddRows(a, b)
            | Op::MulRows(a, b)
            | Op::Mse(a, b)
            | Op::CosSim(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::MulScalar(a, _)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::CrossEntropyLogits(a, _)
            | Op::Slice { src: a, .. }
            | Op::Pick(a, _)
            | Op::Ln(a)
            | Op::ClampMin(a, _)
            | Op::L2Normalize(a)
            | Op::Reshape(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    fn check_id(&self, op: &'static str, id: VarId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Invalid { what: format!("{op}: VarId from a different tape") });
        }
        Ok(())
    }

    fn want_2d(&self, op: &'static str, id: VarId) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::Shape { op, detail: format!("expected rank-2, got {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    fn want_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_id("matmul", a)?;
        self.check_id("matmul", b)?;
        let (m, ka) = self.want_2d("matmul", a)?;
        let (kb, n) = self.want_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::Shape { op: "matmul", detail: format!("inner dims {ka} vs {kb}") });
        }
        let c = mm(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.out("matmul", Op::MatMul(a, b), vec![m, n], c)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        self.check_id("transpose", a)?;
        let (r, c) = self.want_2d("transpose", a)?;
        let x = self.value(a).data();
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                y[j * r + i] = x[i * c + j];
            }
        }
        self.out("transpose", Op::Transpose(a), vec![c, r], y)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_id("add", a)?;
        self.check_id("add", b)?;
        self.want_same_shape("add", a, b)?;
        let y: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, z)| x + z).collect();
        let shape = self.value(a).shape().to_vec();
        self.out("add", Op::Add(a, b), shape, y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_id("sub", a)?;
        self.check_id("sub", b)?;
        self.want_same_shape("sub", a, b)?;
        let y: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, z)| x - z).collect();
        let shape = self.value(a).shape().to_vec();
        self.out("sub", Op::Sub(a, b), shape, y)
    }

    pub fn mul_elem(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_id("mul_elem", a)?;
        self.check_id("mul_elem", b)?;
        self.want_same_shape("mul_elem", a, b)?;
        let y: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, z)| x * z).collect();
        let shape = self.value(a).shape().to_vec();
        self.out("mul_elem", Op::MulElem(a, b), shape, y)
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.check_id("mul_scalar", a)?;
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "mul_scalar" });
        }
        let y: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.out("mul_scalar", Op::MulScalar(a, c), shape, y)
    }

    /// `x + bias` with `bias` broadcast across rows; explicit rather than a
    /// silent broadcasting rule.
    pub fn add_rows(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        self.check_id("add_rows", x)?;
        self.check_id("add_rows", bias)?;
        let (r, c) = self.want_2d("add_rows", x)?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape {
                op: "add_rows",
                detail: format!("bias {:?} vs cols {c}", self.value(bias).shape()),
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                y[i * c + j] = xv[i * c + j] + bv[j];
            }
        }
        self.out("add_rows", Op::AddRows(x, bias), vec![r, c], y)
    }

    /// `x * gain` with `gain` broadcast across rows.
    pub fn mul_rows(&mut self, x: VarId, gain: VarId) -> Result<VarId> {
        self.check_id("mul_rows", x)?;
        self.check_id("mul_rows", gain)?;
        let (r, c) = self.want_2d("mul_rows", x)?;
        if self.value(gain).shape() != [c] {
            return Err(Error::Shape {
                op: "mul_rows",
                detail: format!("gain {:?} vs cols {c}", self.value(gain).shape()),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                y[i * c + j] = xv[i * c + j] * gv[j];
            }
        }
        self.out("mul_rows", Op::MulRows(x, gain), vec![r, c], y)
    }

    /// Softmax over the last axis (each row independently).
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        self.check_id("softmax", x)?;
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or(Error::Shape { op: "softmax", detail: "rank-0 input".into() })?;
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for row in 0..xv.len() / c {
            let xs = &xv[row * c..(row + 1) * c];
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (xs[j] - m).exp();
                y[row * c + j] = e;
                z += e;
            }
            for j in 0..c {
                y[row * c + j] /= z;
            }
        }
        self.out("softmax", Op::SoftmaxRows(x), shape, y)
    }

    /// Per-row normalization to zero mean and unit variance (eps 1e-5), no
    /// affine part; compose with [`mul_rows`](Self::mul_rows) and
    /// [`add_rows`](Self::add_rows) for gain/bias.
    pub fn layer_norm(&mut self, x: VarId) -> Result<VarId> {
        self.check_id("layer_norm", x)?;
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or(Error::Shape { op: "layer_norm", detail: "rank-0 input".into() })?;
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for row in 0..xv.len() / c {
            let xs = &xv[row * c..(row + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                y[row * c + j] = (xs[j] - mean) * r;
            }
        }
        self.out("layer_norm", Op::LayerNormRows(x), shape, y)
    }

    /// GELU, tanh approximation (the GPT-2 variant).
    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        self.check_id("gelu", x)?;
        let shape = self.value(x).shape().to_vec();
        let y: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.out("gelu", Op::Gelu(x), shape, y)
    }

    /// Mean over all entries of the squared difference.
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_id("mse", a)?;
        self.check_id("mse", b)?;
        self.want_same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, z)| (x - z) * (x - z))
            .sum();
        self.out("mse", Op::Mse(a, b), vec![], vec![s / n])
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        self.check_id("sum", a)?;
        let s: f64 = self.value(a).data().iter().sum();
        self.out("sum", Op::Sum(a), vec![], vec![s])
    }

    /// Numerically stable `-log softmax(logits)[label]` for a rank-1 logit
    /// vector.
    pub fn cross_entropy_logits(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        self.check_id("cross_entropy_logits", logits)?;
        let s = self.value(logits).shape();
        if s.len() != 1 {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                detail: format!("expected rank-1 logits, got {s:?}"),
            });
        }
        let k = s[0];
        if label >= k {
            return Err(Error::Invalid { what: format!("label {label} out of range for {k} classes") });
        }
        let z = self.value(logits).data();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.out(
            "cross_entropy_logits",
            Op::CrossEntropyLogits(logits, label),
            vec![],
            vec![lse - z[label]],
        )
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Invalid { what: "concat of zero parts".into() });
        }
        for &p in parts {
            self.check_id("concat", p)?;
        }
        let rank = self.value(parts[0]).shape().len();
        if axis >= rank.max(1) || rank > 2 {
            return Err(Error::Shape { op: "concat", detail: format!("axis {axis} on rank {rank}") });
        }
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank {
                return Err(Error::Shape { op: "concat", detail: "mixed ranks".into() });
            }
            for d in 0..rank {
                if d != axis && s[d] != self.value(parts[0]).shape()[d] {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!("{:?} vs {:?}", s, self.value(parts[0]).shape()),
                    });
                }
            }
        }
        if rank <= 1 {
            let mut y = Vec::new();
            for &p in parts {
                y.extend_from_slice(self.value(p).data());
            }
            let n = y.len();
            return self.out("concat", Op::Concat { parts: parts.to_vec(), axis: 0 }, vec![n], y);
        }
        // rank-2
        let cols0 = self.value(parts[0]).shape()[1];
        if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.value(p).shape()[0]).sum();
            let mut y = Vec::with_capacity(rows * cols0);
            for &p in parts {
                y.extend_from_slice(self.value(p).data());
            }
            self.out("concat", Op::Concat { parts: parts.to_vec(), axis }, vec![rows, cols0], y)
        } else {
            let rows = self.value(parts[0]).shape()[0];
            let cols: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
            let mut y = vec![0.0; rows * cols];
            let mut off = 0;
            for &p in parts {
                let pc = self.value(p).shape()[1];
                let pv = self.value(p).data();
                for i in 0..rows {
                    y[i * cols + off..i * cols + off + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
                }
                off += pc;
            }
            self.out("concat", Op::Concat { parts: parts.to_vec(), axis }, vec![rows, cols], y)
        }
    }

    pub fn slice(&mut self, src: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        self.check_id("slice", src)?;
        let shape = self.value(src).shape().to_vec();
        let rank = shape.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::Shape { op: "slice", detail: format!("axis {axis} on shape {shape:?}") });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("range {start}..{} out of dim {}", start + len, shape[axis]),
            });
        }
        let x = self.value(src).data();
        if rank == 1 {
            let y = x[start..start + len].to_vec();
            return self.out("slice", Op::Slice { src, axis, start, len }, vec![len], y);
        }
        let (r, c) = (shape[0], shape[1]);
        if axis == 0 {
            let y = x[start * c..(start + len) * c].to_vec();
            self.out("slice", Op::Slice { src, axis, start, len }, vec![len, c], y)
        } else {
            let mut y = vec![0.0; r * len];
            for i in 0..r {
                y[i * len..(i + 1) * len].copy_from_slice(&x[i * c + start..i * c + start + len]);
            }
            self.out("slice", Op::Slice { src, axis, start, len }, vec![r, len], y)
        }
    }

    /// Extract one entry by flat index as a scalar.
    pub fn pick(&mut self, src: VarId, index: usize) -> Result<VarId> {
        self.check_id("pick", src)?;
        let n = self.value(src).numel();
        if index >= n {
            return Err(Error::Shape { op: "pick", detail: format!("index {index} out of {n}") });
        }
        let v = self.value(src).data()[index];
        self.out("pick", Op::Pick(src, index), vec![], vec![v])
    }

    pub fn ln(&mut self, x: VarId) -> Result<VarId> {
        self.check_id("ln", x)?;
        let shape = self.value(x).shape().to_vec();
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v.ln()).collect();
        self.out("ln", Op::Ln(x), shape, y)
    }

    pub fn clamp_min(&mut self, x: VarId, floor: f64) -> Result<VarId> {
        self.check_id("clamp_min", x)?;
        let shape = self.value(x).shape().to_vec();
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v.max(floor)).collect();
        self.out("clamp_min", Op::ClampMin(x, floor), shape, y)
    }

    /// Cosine similarity of two rank-1 vectors.
    pub fn cos_sim(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_id("cos_sim", a)?;
        self.check_id("cos_sim", b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sa != sb {
            return Err(Error::Shape { op: "cos_sim", detail: format!("{sa:?} vs {sb:?}") });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Invalid { what: "cos_sim of zero vector".into() });
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, z)| x * z).sum();
        self.out("cos_sim", Op::CosSim(a, b), vec![], vec![dot / (na * nb)])
    }

    /// Normalize the whole tensor to unit L2 norm.
    pub fn l2_normalize(&mut self, x: VarId) -> Result<VarId> {
        self.check_id("l2_normalize", x)?;
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).l2_norm();
        if n == 0.0 {
            return Err(Error::Invalid { what: "l2_normalize of zero vector".into() });
        }
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v / n).collect();
        self.out("l2_normalize", Op::L2Normalize(x), shape, y)
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        self.check_id("reshape", x)?;
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let y = self.value(x).data().to_vec();
        self.out("reshape", Op::Reshape(x), shape, y)
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of `loss` with respect to every reachable
    /// `requires_grad` tensor. `loss` must be scalar; calling twice on the
    /// same tape is an error.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        self.check_id("backward", loss)?;
        if self.backward_done {
            return Err(Error::Invalid { what: "backward called twice without reset".into() });
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue, // not on a path to the loss
            };
            let op = self.nodes[idx].op.clone();
            self.backprop_node(idx, &op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                self.nodes[idx].value.zero_grad();
                self.nodes[idx].value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        op: &Op,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Vec<f64>>], id: VarId, delta: Vec<f64>, nodes: &[Node]| {
            if !nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(buf) => {
                    for (b, d) in buf.iter_mut().zip(&delta) {
                        *b += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        let val = |id: VarId| self.nodes[id.0].value.data();
        let y = self.nodes[idx].value.data();

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                // dA = G B^T, dB = A^T G
                let da = mm_nt(g, val(*b), m, n, k);
                let db = mm_tn(val(*a), g, m, k, n);
                acc(grads, *a, da, &self.nodes);
                acc(grads, *b, db, &self.nodes);
            }
            Op::Transpose(a) => {
                let (c, r) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                acc(grads, *a, da, &self.nodes);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec(), &self.nodes);
                acc(grads, *b, g.to_vec(), &self.nodes);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec(), &self.nodes);
                acc(grads, *b, g.iter().map(|v| -v).collect(), &self.nodes);
            }
            Op::MulElem(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(gi, bv)| gi * bv).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(gi, av)| gi * av).collect();
                acc(grads, *a, da, &self.nodes);
                acc(grads, *b, db, &self.nodes);
            }
            Op::MulScalar(a, c) => {
                acc(grads, *a, g.iter().map(|v| v * c).collect(), &self.nodes);
            }
            Op::AddRows(x, bias) => {
                let cols = self.nodes[idx].value.cols();
                acc(grads, *x, g.to_vec(), &self.nodes);
                let mut db = vec![0.0; cols];
                for (i, gi) in g.iter().enumerate() {
                    db[i % cols] += gi;
                }
                acc(grads, *bias, db, &self.nodes);
            }
            Op::MulRows(x, gain) => {
                let cols = self.nodes[idx].value.cols();
                let gv = val(*gain);
                let xv = val(*x);
                let dx: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * gv[i % cols]).collect();
                let mut dg = vec![0.0; cols];
                for (i, gi) in g.iter().enumerate() {
                    dg[i % cols] += gi * xv[i];
                }
                acc(grads, *x, dx, &self.nodes);
                acc(grads, *gain, dg, &self.nodes);
            }
            Op::SoftmaxRows(x) => {
                let c = self.nodes[idx].value.cols();
                let mut dx = vec![0.0; y.len()];
                for row in 0..y.len() / c {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(grads, *x, dx, &self.nodes);
            }
            Op::LayerNormRows(x) => {
                let c = self.nodes[idx].value.cols();
                let xv = val(*x);
                let mut dx = vec![0.0; y.len()];
                for row in 0..y.len() / c {
                    let xs = &xv[row * c..(row + 1) * c];
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gmean = gs.iter().sum::<f64>() / c as f64;
                    let gymean = gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[row * c + j] = r * (gs[j] - gmean - ys[j] * gymean);
                    }
                }
                acc(grads, *x, dx, &self.nodes);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, gi)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gi * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect();
                acc(grads, *x, dx, &self.nodes);
            }
            Op::Mse(a, b) => {
                let n = val(*a).len() as f64;
                let s = 2.0 * g[0] / n;
                let da: Vec<f64> = val(*a).iter().zip(val(*b)).map(|(x, z)| s * (x - z)).collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                acc(grads, *a, da, &self.nodes);
                acc(grads, *b, db, &self.nodes);
            }
            Op::Sum(a) => {
                acc(grads, *a, vec![g[0]; val(*a).len()], &self.nodes);
            }
            Op::CrossEntropyLogits(a, label) => {
                let z = val(*a);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let zsum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let mut dz: Vec<f64> = z.iter().map(|v| g[0] * (v - m).exp() / zsum).collect();
                dz[*label] -= g[0];
                acc(grads, *a, dz, &self.nodes);
            }
            Op::Concat { parts, axis } => {
                let rank = self.nodes[idx].value.shape().len();
                if rank <= 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        acc(grads, p, g[off..off + n].to_vec(), &self.nodes);
                        off += n;
                    }
                } else {
                    let rows = self.nodes[idx].value.rows();
                    let cols = self.nodes[idx].value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        let mut dp = vec![0.0; rows * pc];
                        for i in 0..rows {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * cols + off..i * cols + off + pc]);
                        }
                        acc(grads, p, dp, &self.nodes);
                        off += pc;
                    }
                }
            }
            Op::Slice { src, axis, start, len } => {
                let sshape = self.nodes[src.0].value.shape().to_vec();
                let mut ds = vec![0.0; self.nodes[src.0].value.numel()];
                if sshape.len() == 1 {
                    ds[*start..start + len].copy_from_slice(g);
                } else {
                    let (_, c) = (sshape[0], sshape[1]);
                    if *axis == 0 {
                        ds[start * c..(start + len) * c].copy_from_slice(g);
                    } else {
                        let r = sshape[0];
                        for i in 0..r {
                            ds[i * c + start..i * c + start + len]
                                .copy_from_slice(&g[i * len..(i + 1) * len]);
                        }
                    }
                }
                acc(grads, *src, ds, &self.nodes);
            }
            Op::Pick(src, index) => {
                let mut ds = vec![0.0; self.nodes[src.0].value.numel()];
                ds[*index] = g[0];
                acc(grads, *src, ds, &self.nodes);
            }
            Op::Ln(x) => {
                let dx: Vec<f64> = val(*x).iter().zip(g).map(|(v, gi)| gi / v).collect();
                acc(grads, *x, dx, &self.nodes);
            }
            Op::ClampMin(x, floor) => {
                let dx: Vec<f64> =
                    val(*x).iter().zip(g).map(|(v, gi)| if *v > *floor { *gi } else { 0.0 }).collect();
                acc(grads, *x, dx, &self.nodes);
            }
            Op::CosSim(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let c = y[0];
                let da: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(ai, bi)| g[0] * (bi / (na * nb) - c * ai / (na * na)))
                    .collect();
                let db: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(ai, bi)| g[0] * (ai / (na * nb) - c * bi / (nb * nb)))
                    .collect();
                acc(grads, *a, da, &self.nodes);
                acc(grads, *b, db, &self.nodes);
            }
            Op::L2Normalize(x) => {
                let r = self.nodes[x.0].value.l2_norm();
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                let dx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| (gi - yi * dot) / r).collect();
                acc(grads, *x, dx, &self.nodes);
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.to_vec(), &self.nodes);
            }
        }
        Ok(())
    }
}

// Row-major matmul kernels; ikj order keeps the inner loop contiguous.

pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// a (m×n) times b^T where b is (k×n): result m×k.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(x, z)| x * z).sum();
        }
    }
    c
}

/// a^T times b where a is (m×k) and b is (m×n): result k×n.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::gradcheck::{max_grad_err, FD_STEP};

    const TOL: f64 = 1e-6;

    fn randt(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut seeded(seed))
    }

    /// Reduce an arbitrary op output to a scalar with fixed random weights so
    /// every output entry contributes to the checked gradient.
    fn weighted(tape: &mut Tape, out: VarId, seed: u64) -> Result<VarId> {
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(Tensor::randn(shape, 1.0, &mut seeded(seed)));
        let prod = tape.mul_elem(out, w)?;
        tape.sum(prod)
    }

    fn assert_fd(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[VarId]) -> Result<VarId>) {
        let err = max_grad_err(f, inputs, FD_STEP).unwrap();
        assert!(err < TOL, "max rel err {err:.3e} >= {TOL:.0e}");
    }

    #[test]
    fn fd_matmul() {
        assert_fd(&[randt(vec![3, 4], 1), randt(vec![4, 2], 2)], &|t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted(t, y, 100)
        });
    }

    #[test]
    fn fd_transpose() {
        assert_fd(&[randt(vec![3, 4], 3)], &|t, ids| {
            let y = t.transpose(ids[0])?;
            weighted(t, y, 101)
        });
    }

    #[test]
    fn fd_add_sub_mul() {
        assert_fd(&[randt(vec![3, 4], 4), randt(vec![3, 4], 5)], &|t, ids| {
            let y = t.add(ids[0], ids[1])?;
            weighted(t, y, 102)
        });
        assert_fd(&[randt(vec![3, 4], 6), randt(vec![3, 4], 7)], &|t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            weighted(t, y, 103)
        });
        assert_fd(&[randt(vec![3, 4], 8), randt(vec![3, 4], 9)], &|t, ids| {
            let y = t.mul_elem(ids[0], ids[1])?;
            weighted(t, y, 104)
        });
    }

    #[test]
    fn fd_scalar_and_row_broadcasts() {
        assert_fd(&[randt(vec![3, 4], 10)], &|t, ids| {
            let y = t.mul_scalar(ids[0], -1.7)?;
            weighted(t, y, 105)
        });
        assert_fd(&[randt(vec![3, 4], 11), randt(vec![4], 12)], &|t, ids| {
            let y = t.add_rows(ids[0], ids[1])?;
            weighted(t, y, 106)
        });
        assert_fd(&[randt(vec![3, 4], 13), randt(vec![4], 14)], &|t, ids| {
            let y = t.mul_rows(ids[0], ids[1])?;
            weighted(t, y, 107)
        });
    }

    #[test]
    fn fd_softmax_layer_norm_gelu() {
        assert_fd(&[randt(vec![3, 4], 15)], &|t, ids| {
            let y = t.softmax(ids[0])?;
            weighted(t, y, 108)
        });
        assert_fd(&[randt(vec![3, 4], 16)], &|t, ids| {
            let y = t.layer_norm(ids[0])?;
            weighted(t, y, 109)
        });
        assert_fd(&[randt(vec![3, 4], 17)], &|t, ids| {
            let y = t.gelu(ids[0])?;
            weighted(t, y, 110)
        });
    }

    #[test]
    fn fd_reductions() {
        assert_fd(&[randt(vec![3, 4], 18), randt(vec![3, 4], 19)], &|t, ids| {
            t.mse(ids[0], ids[1])
        });
        assert_fd(&[randt(vec![3, 4], 20)], &|t, ids| t.sum(ids[0]));
        assert_fd(&[randt(vec![5], 21)], &|t, ids| t.cross_entropy_logits(ids[0], 2));
    }

    #[test]
    fn fd_concat_slice_pick_reshape() {
        assert_fd(&[randt(vec![2, 4], 22), randt(vec![3, 4], 23)], &|t, ids| {
            let y = t.concat(&[ids[0], ids[1]], 0)?;
            weighted(t, y, 111)
        });
        assert_fd(&[randt(vec![3, 2], 24), randt(vec![3, 4], 25)], &|t, ids| {
            let y = t.concat(&[ids[0], ids[1]], 1)?;
            weighted(t, y, 112)
        });
        assert_fd(&[randt(vec![3, 4], 26)], &|t, ids| {
            let y = t.slice(ids[0], 0, 1, 2)?;
            weighted(t, y, 113)
        });
        assert_fd(&[randt(vec![3, 4], 27)], &|t, ids| {
            let y = t.slice(ids[0], 1, 1, 3)?;
            weighted(t, y, 114)
        });
        assert_fd(&[randt(vec![3, 4], 28)], &|t, ids| t.pick(ids[0], 7));
        assert_fd(&[randt(vec![3, 4], 29)], &|t, ids| {
            let y = t.reshape(ids[0], vec![4, 3])?;
            weighted(t, y, 115)
        });
    }

    #[test]
    fn fd_ln_clamp() {
        // positive inputs away from zero for ln; clamp floor between values
        let mut pos = randt(vec![3, 4], 30);
        for v in pos.data_mut() {
            *v = v.abs() + 0.5;
        }
        assert_fd(&[pos.clone()], &|t, ids| {
            let y = t.ln(ids[0])?;
            weighted(t, y, 116)
        });
        assert_fd(&[pos], &|t, ids| {
            let y = t.clamp_min(ids[0], 1.0)?;
            weighted(t, y, 117)
        });
    }

    #[test]
    fn fd_cosine_and_normalize() {
        assert_fd(&[randt(vec![6], 31), randt(vec![6], 32)], &|t, ids| {
            t.cos_sim(ids[0], ids[1])
        });
        assert_fd(&[randt(vec![6], 33)], &|t, ids| {
            let y = t.l2_normalize(ids[0])?;
            weighted(t, y, 118)
        });
    }

    #[test]
    fn fd_two_layer_composite() {
        // f(x) = sum(gelu(W x)) against finite differences
        assert_fd(&[randt(vec![4, 3], 34), randt(vec![3, 2], 35)], &|t, ids| {
            let h = t.matmul(ids[0], ids[1])?;
            let a = t.gelu(h)?;
            t.sum(a)
        });
    }

    #[test]
    fn matmul_identity_returns_input() {
        let a = randt(vec![3, 4], 36);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let iv = tape.constant(Tensor::identity(4));
        let y = tape.matmul(av, iv).unwrap();
        assert_eq!(tape.value(y).data(), a.data());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&randt(vec![3, 4], 37));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn mse_single_element_hand_case() {
        // loss = mse([2], [0]) = 4 with d/dx = 2x = 4
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![1], vec![2.0]).unwrap());
        let z = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let loss = tape.mse(x, z).unwrap();
        assert_eq!(tape.value(loss).item(), 4.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // f(x) = sum(2x) + sum(gelu(x)): grad equals the sum of branch grads
        let x = randt(vec![3, 4], 38);

        let branch = |scale: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.param(&x);
            let y = if scale { tape.mul_scalar(xv, 2.0).unwrap() } else { tape.gelu(xv).unwrap() };
            let loss = tape.sum(y).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(xv).unwrap().to_vec()
        };
        let ga = branch(true);
        let gb = branch(false);

        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let a = tape.mul_scalar(xv, 2.0).unwrap();
        let b = tape.gelu(xv).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(xv).unwrap();
        for i in 0..g.len() {
            assert!((g[i] - (ga[i] + gb[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(&randt(vec![4, 4], 39));
            let b = tape.param(&randt(vec![4, 4], 40));
            let h = tape.matmul(a, b).unwrap();
            let n = tape.layer_norm(h).unwrap();
            let act = tape.gelu(n).unwrap();
            let sm = tape.softmax(act).unwrap();
            let loss = tape.sum(sm).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                tape.grad(a).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(&randt(vec![2], 41));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Invalid { .. })));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(&randt(vec![2, 2], 42));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(randt(vec![2, 3], 43));
        let b = tape.constant(randt(vec![2, 2], 44));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.matmul(a, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_forward_is_reported_with_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        match tape.ln(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "ln"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn foreign_var_id_is_an_error() {
        let mut other = Tape::new();
        let foreign = other.constant(randt(vec![2], 45));
        let _ = other.constant(randt(vec![2], 46));
        let mut tape = Tape::new();
        assert!(matches!(tape.sum(foreign), Err(Error::Invalid { .. })));
    }

    #[test]
    fn truncate_reuses_bound_leaves() {
        let mut tape = Tape::new();
        let w = tape.constant(randt(vec![4, 4], 47));
        let mark = tape.mark();
        let mut first = None;
        for _ in 0..3 {
            tape.truncate(mark);
            let x = tape.constant(randt(vec![4, 4], 48));
            let y = tape.matmul(x, w).unwrap();
            let s = tape.sum(y).unwrap();
            let v = tape.value(s).item();
            if let Some(f) = first {
                assert_eq!(f, v);
            }
            first = Some(v);
            assert_eq!(tape.len(), mark + 3);
        }
    }
}

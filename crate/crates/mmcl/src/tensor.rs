//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks the recording in reverse and accumulates gradients into every node
//! that requires them. Tensors are double precision, row major. Scalars have
//! the empty shape `[]`.
//!
//! The tape is rebuilt per batch: parameters live outside it (see
//! [`crate::optim::ParameterRegistry`]) and are inserted as leaves each time.

use crate::error::{Error, Result};

/// A dense value buffer with shape metadata and an optional gradient.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad, grad: None })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddRow { m: TensorId, row: TensorId },
    Relu { a: TensorId },
    Tanh { a: TensorId },
    Softplus { a: TensorId },
    ScaleConst { a: TensorId, c: f64 },
    ScaleByScalar { a: TensorId, s: TensorId },
    Softmax { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    Concat1d { parts: Vec<TensorId> },
    StackScalars { parts: Vec<TensorId> },
    Index1d { a: TensorId, index: usize },
    Slice1d { a: TensorId, start: usize, len: usize },
    LogSumExp { a: TensorId },
    CosineSim { a: TensorId, b: TensorId },
    Reshape { a: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Append-only recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += aip * row[j];
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).tensor.shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).tensor.requires_grad
    }

    /// Gradient buffer of a node, present after [`Tape::backward`] for every
    /// node with `requires_grad`.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).tensor.grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.node(id).tensor.data[0]
    }

    // ── Leaf constructors ───────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let t = Tensor::new(data, shape, requires_grad)?;
        Ok(self.push(t, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(
            Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None },
            Op::Leaf,
        )
    }

    // ── Forward operations ──────────────────────────────────────────

    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} requires a 2-d tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dims disagree: {k} vs {k2}")));
        }
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor { shape: vec![m, n], data, requires_grad: rg, grad: None },
            Op::MatMul { a, b },
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor { shape: vec![c, r], data, requires_grad: rg, grad: None },
            Op::Transpose { a },
        ))
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name} operand shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Sub { a, b }))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Mul { a, b }))
    }

    /// `[n, d]` matrix plus `[d]` row vector, broadcast over rows.
    pub fn add_row(&mut self, m: TensorId, row: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(m, "add_row matrix")?;
        let rs = self.shape(row);
        if rs != [d] {
            return Err(Error::Dimension(format!(
                "add_row expects row shape [{d}], got {rs:?}"
            )));
        }
        let mv = self.value(m);
        let rv = self.value(row);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = mv[i * d + j] + rv[j];
            }
        }
        let rg = self.requires_grad(m) || self.requires_grad(row);
        Ok(self.push(
            Tensor { shape: vec![n, d], data, requires_grad: rg, grad: None },
            Op::AddRow { m, row },
        ))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Relu { a }))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Tanh { a }))
    }

    /// `ln(1 + exp(x))`, evaluated in the overflow-free form.
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Softplus { a }))
    }

    pub fn scale_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::ScaleConst { a, c }))
    }

    /// Multiply every element of `a` by the scalar tensor `s`.
    pub fn scale_by_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if !self.node(s).tensor.is_scalar() {
            return Err(Error::Dimension(format!(
                "scale_by_scalar needs a scalar, got shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.scalar_value(s);
        let data: Vec<f64> = self.value(a).iter().map(|&x| x * sv).collect();
        let rg = self.requires_grad(a) || self.requires_grad(s);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor { shape, data, requires_grad: rg, grad: None },
            Op::ScaleByScalar { a, s },
        ))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, lanes, inner) = lane_split(&shape, axis);
        let src = self.value(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| o * lanes * inner + l * inner + i;
                let max = (0..lanes).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..lanes {
                    let e = (src[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    sum += e;
                }
                for l in 0..lanes {
                    data[idx(l)] /= sum;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Softmax { a, axis }))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "mean_axis axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyAxis(format!("mean over zero-length axis {axis}")));
        }
        let (outer, lanes, inner) = lane_split(&shape, axis);
        let src = self.value(a);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for l in 0..lanes {
                    s += src[o * lanes * inner + l * inner + i];
                }
                data[o * inner + i] = s / lanes as f64;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor { shape: out_shape, data, requires_grad: rg, grad: None },
            Op::MeanAxis { a, axis },
        ))
    }

    /// Sum of all elements; result is a scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor { shape: vec![], data: vec![s], requires_grad: rg, grad: None },
            Op::SumAll { a },
        ))
    }

    /// Concatenate 1-d tensors.
    pub fn concat1d(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat1d needs at least one part".into()));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Dimension(format!(
                    "concat1d expects 1-d parts, got shape {:?}",
                    self.shape(p)
                )));
            }
            data.extend_from_slice(self.value(p));
            rg |= self.requires_grad(p);
        }
        let n = data.len();
        Ok(self.push(
            Tensor { shape: vec![n], data, requires_grad: rg, grad: None },
            Op::Concat1d { parts: parts.to_vec() },
        ))
    }

    /// Stack scalar tensors into a 1-d tensor.
    pub fn stack_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_scalars needs at least one part".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            if !self.node(p).tensor.is_scalar() {
                return Err(Error::Dimension(format!(
                    "stack_scalars expects scalars, got shape {:?}",
                    self.shape(p)
                )));
            }
            data.push(self.scalar_value(p));
            rg |= self.requires_grad(p);
        }
        let n = data.len();
        Ok(self.push(
            Tensor { shape: vec![n], data, requires_grad: rg, grad: None },
            Op::StackScalars { parts: parts.to_vec() },
        ))
    }

    /// Pick one coordinate of a 1-d tensor as a scalar.
    pub fn index1d(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(Error::Dimension(format!("index1d expects a 1-d tensor, got {s:?}")));
        }
        if index >= s[0] {
            return Err(Error::Dimension(format!("index {index} out of range for length {}", s[0])));
        }
        let v = self.value(a)[index];
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor { shape: vec![], data: vec![v], requires_grad: rg, grad: None },
            Op::Index1d { a, index },
        ))
    }

    /// Contiguous sub-range of a 1-d tensor.
    pub fn slice1d(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(Error::Dimension(format!("slice1d expects a 1-d tensor, got {s:?}")));
        }
        if start + len > s[0] {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for length {}",
                start + len,
                s[0]
            )));
        }
        let data = self.value(a)[start..start + len].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor { shape: vec![len], data, requires_grad: rg, grad: None },
            Op::Slice1d { a, start, len },
        ))
    }

    /// `ln Σ exp(x_i)` over a 1-d tensor, max-subtracted; result is a scalar.
    pub fn log_sum_exp(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::Dimension(format!(
                "log_sum_exp expects a nonempty 1-d tensor, got {s:?}"
            )));
        }
        let v = self.value(a);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor { shape: vec![], data: vec![lse], requires_grad: rg, grad: None },
            Op::LogSumExp { a },
        ))
    }

    /// Cosine similarity of two equal-length 1-d vectors; result in [-1, 1].
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 || sa != sb {
            return Err(Error::Dimension(format!(
                "cosine_sim expects equal-length 1-d vectors, got {sa:?} and {sb:?}"
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let na = dot(va, va).sqrt();
        let nb = dot(vb, vb).sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector("cosine_sim of a zero vector".into()));
        }
        let c = dot(va, vb) / (na * nb);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor { shape: vec![], data: vec![c], requires_grad: rg, grad: None },
            Op::CosineSim { a, b },
        ))
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).tensor.numel() {
            return Err(Error::Dimension(format!(
                "reshape to {:?} changes element count from {}",
                shape,
                self.node(a).tensor.numel()
            )));
        }
        let data = self.value(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Reshape { a }))
    }

    /// Row `i` of a 2-d tensor as a 1-d vector. Convenience over slice/reshape.
    pub fn row(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let (n, d) = self.dims2(a, "row")?;
        if i >= n {
            return Err(Error::Dimension(format!("row {i} out of range for {n} rows")));
        }
        let flat = self.reshape(a, vec![n * d])?;
        self.slice1d(flat, i * d, d)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Every node with
    /// `requires_grad` reachable from the loss receives its accumulated
    /// gradient; unreachable ones get zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.node(loss).tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            } else {
                node.tensor.grad = None;
            }
        }
        if !self.node(loss).tensor.requires_grad {
            // Loss does not depend on any differentiable input; all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].tensor.grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].tensor.grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let s = self.shape(a);
                        (s[0], s[1])
                    };
                    let n = self.shape(b)[1];
                    if self.requires_grad(a) {
                        // dA = G · Bᵀ
                        let bv = self.value(b);
                        let mut bt = vec![0.0; n * k];
                        for p in 0..k {
                            for j in 0..n {
                                bt[j * k + p] = bv[p * n + j];
                            }
                        }
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.requires_grad(b) {
                        // dB = Aᵀ · G
                        let av = self.value(a);
                        let mut at = vec![0.0; k * m];
                        for i2 in 0..m {
                            for p in 0..k {
                                at[p * m + i2] = av[i2 * k + p];
                            }
                        }
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose { a } => {
                    if self.requires_grad(a) {
                        let (r, c) = {
                            let s = self.shape(a);
                            (s[0], s[1])
                        };
                        let mut da = vec![0.0; r * c];
                        for i2 in 0..r {
                            for j in 0..c {
                                da[i2 * c + j] = grad[j * r + i2];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires_grad(a) {
                        self.accumulate(a, &grad);
                    }
                    if self.requires_grad(b) {
                        self.accumulate(b, &grad);
                    }
                }
                Op::Sub { a, b } => {
                    if self.requires_grad(a) {
                        self.accumulate(a, &grad);
                    }
                    if self.requires_grad(b) {
                        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                        self.accumulate(b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires_grad(a) {
                        let da: Vec<f64> = grad.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires_grad(b) {
                        let db: Vec<f64> = grad.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::AddRow { m, row } => {
                    if self.requires_grad(m) {
                        self.accumulate(m, &grad);
                    }
                    if self.requires_grad(row) {
                        let d = self.shape(row)[0];
                        let n = grad.len() / d;
                        let mut dr = vec![0.0; d];
                        for i2 in 0..n {
                            for j in 0..d {
                                dr[j] += grad[i2 * d + j];
                            }
                        }
                        self.accumulate(row, &dr);
                    }
                }
                Op::Relu { a } => {
                    if self.requires_grad(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(self.value(a))
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Tanh { a } => {
                    if self.requires_grad(a) {
                        let out = self.nodes[i].tensor.data.clone();
                        let da: Vec<f64> =
                            grad.iter().zip(&out).map(|(g, &t)| g * (1.0 - t * t)).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Softplus { a } => {
                    if self.requires_grad(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(self.value(a))
                            .map(|(g, &x)| g / (1.0 + (-x).exp()))
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::ScaleConst { a, c } => {
                    if self.requires_grad(a) {
                        let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::ScaleByScalar { a, s } => {
                    let sv = self.scalar_value(s);
                    if self.requires_grad(a) {
                        let da: Vec<f64> = grad.iter().map(|g| g * sv).collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires_grad(s) {
                        let ds = dot(&grad, self.value(a));
                        self.accumulate(s, &[ds]);
                    }
                }
                Op::Softmax { a, axis } => {
                    if self.requires_grad(a) {
                        let shape = self.nodes[i].tensor.shape.clone();
                        let out = self.nodes[i].tensor.data.clone();
                        let (outer, lanes, inner) = lane_split(&shape, axis);
                        let mut da = vec![0.0; out.len()];
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let idx = |l: usize| o * lanes * inner + l * inner + i2;
                                let mut acc = 0.0;
                                for l in 0..lanes {
                                    acc += grad[idx(l)] * out[idx(l)];
                                }
                                for l in 0..lanes {
                                    da[idx(l)] = out[idx(l)] * (grad[idx(l)] - acc);
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::MeanAxis { a, axis } => {
                    if self.requires_grad(a) {
                        let shape = self.shape(a).to_vec();
                        let (outer, lanes, inner) = lane_split(&shape, axis);
                        let mut da = vec![0.0; outer * lanes * inner];
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let g = grad[o * inner + i2] / lanes as f64;
                                for l in 0..lanes {
                                    da[o * lanes * inner + l * inner + i2] = g;
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::SumAll { a } => {
                    if self.requires_grad(a) {
                        let da = vec![grad[0]; self.node(a).tensor.numel()];
                        self.accumulate(a, &da);
                    }
                }
                Op::Concat1d { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.node(p).tensor.numel();
                        if self.requires_grad(p) {
                            let dp = grad[offset..offset + len].to_vec();
                            self.accumulate(p, &dp);
                        }
                        offset += len;
                    }
                }
                Op::StackScalars { parts } => {
                    for (j, p) in parts.into_iter().enumerate() {
                        if self.requires_grad(p) {
                            self.accumulate(p, &[grad[j]]);
                        }
                    }
                }
                Op::Index1d { a, index } => {
                    if self.requires_grad(a) {
                        let mut da = vec![0.0; self.node(a).tensor.numel()];
                        da[index] = grad[0];
                        self.accumulate(a, &da);
                    }
                }
                Op::Slice1d { a, start, len } => {
                    if self.requires_grad(a) {
                        let mut da = vec![0.0; self.node(a).tensor.numel()];
                        da[start..start + len].copy_from_slice(&grad);
                        self.accumulate(a, &da);
                    }
                }
                Op::LogSumExp { a } => {
                    if self.requires_grad(a) {
                        let v = self.value(a);
                        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        let da: Vec<f64> = exps.iter().map(|e| grad[0] * e / sum).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::CosineSim { a, b } => {
                    let va = self.value(a).to_vec();
                    let vb = self.value(b).to_vec();
                    let na = dot(&va, &va).sqrt();
                    let nb = dot(&vb, &vb).sqrt();
                    let c = dot(&va, &vb) / (na * nb);
                    let g = grad[0];
                    if self.requires_grad(a) {
                        let da: Vec<f64> = va
                            .iter()
                            .zip(&vb)
                            .map(|(&x, &y)| g * (y / (na * nb) - c * x / (na * na)))
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires_grad(b) {
                        let db: Vec<f64> = va
                            .iter()
                            .zip(&vb)
                            .map(|(&x, &y)| g * (x / (na * nb) - c * y / (nb * nb)))
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Reshape { a } => {
                    if self.requires_grad(a) {
                        self.accumulate(a, &grad);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        let g = self.nodes[id.0]
            .tensor
            .grad
            .get_or_insert_with(|| vec![0.0; delta.len()]);
        for (t, d) in g.iter_mut().zip(delta) {
            *t += d;
        }
    }
}

/// Split a shape at `axis` into (outer, axis length, inner) strides.
fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`]
//! replays them in reverse to accumulate gradients. The operation set is
//! exactly what the retrieval model needs: affine maps, sigmoid, softmax,
//! L2 normalization, elementwise product, matrix product, row means and
//! sums, concatenation, and the hinge. A tape and its parameters are
//! single-owner and single-threaded; backward is deterministic.
//!
//! Two conventions make the model's edge cases differentiable everywhere
//! they are used: `l2_normalize` maps the zero vector to zero with zero
//! gradient, and the hinge takes subgradient 0 at its kink.

use std::collections::BTreeMap;
use std::fmt;

use crate::tensorio::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
pub enum AutodiffError {
    ShapeMismatch { op: &'static str, detail: String },
    NonScalarLoss { shape: Vec<usize> },
    NonFiniteLoss,
    EmptyInput { op: &'static str },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutodiffError::ShapeMismatch { op, detail } => write!(f, "{op}: {detail}"),
            AutodiffError::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            AutodiffError::NonFiniteLoss => write!(f, "loss is not finite"),
            AutodiffError::EmptyInput { op } => write!(f, "{op}: empty input"),
        }
    }
}

impl std::error::Error for AutodiffError {}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { w: NodeId, x: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    L2Normalize { x: NodeId },
    NormalizeRows { x: NodeId },
    Mul { x: NodeId, y: NodeId },
    Matmul { a: NodeId, b: NodeId },
    MeanRows { x: NodeId },
    Concat { xs: Vec<NodeId> },
    Hinge { x: NodeId },
    Add { x: NodeId, y: NodeId },
    Sub { x: NodeId, y: NodeId },
    AddScalar { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Sum { x: NodeId },
    Dot { x: NodeId, y: NodeId },
    Transpose { x: NodeId },
    MulRows { x: NodeId, s: NodeId },
    ColSums { x: NodeId },
    AddRows { x: NodeId, v: NodeId },
    Reshape { x: NodeId },
}

/// Recorded computation graph in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Tensor>,
}

pub(crate) fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Scalar value of a shape-`[1]` node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0].data()[0]
    }

    /// Gradient of the last backward pass. Panics if backward has not run.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        assert!(!self.grads.is_empty(), "backward has not run on this tape");
        &self.grads[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    /// `W x + b` with `W: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (wv, xv, bv) = (self.value(w), self.value(x), self.value(b));
        if wv.rank() != 2 || xv.rank() != 1 || bv.rank() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                detail: format!(
                    "expected W [m,n], x [n], b [m]; got {:?}, {:?}, {:?}",
                    wv.shape(),
                    xv.shape(),
                    bv.shape()
                ),
            });
        }
        let (m, n) = (wv.rows(), wv.cols());
        if xv.len() != n || bv.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                detail: format!(
                    "W is [{m},{n}] but x has {} and b has {}",
                    xv.len(),
                    bv.len()
                ),
            });
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = wv.row(i);
            let mut acc = bv.data()[i];
            for j in 0..n {
                acc += row[j] * xv.data()[j];
            }
            out[i] = acc;
        }
        Ok(self.push(Tensor::vector(out), Op::Affine { w, x, b }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(),
        );
        self.push(out, Op::Sigmoid { x })
    }

    /// Softmax over the last axis: the whole vector for rank 1, each row for
    /// rank 2.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        match v.rank() {
            1 => {
                let mut out = vec![0.0; v.len()];
                softmax_slice(v.data(), &mut out);
                Ok(self.push(Tensor::vector(out), Op::Softmax { x }))
            }
            2 => {
                let (r, c) = (v.rows(), v.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    softmax_slice(v.row(i), &mut out[i * c..(i + 1) * c]);
                }
                Ok(self.push(Tensor::new(vec![r, c], out), Op::Softmax { x }))
            }
            _ => Err(AutodiffError::ShapeMismatch {
                op: "softmax",
                detail: format!("expected rank 1 or 2, got {:?}", v.shape()),
            }),
        }
    }

    /// Unit-normalizes a vector; the zero vector stays zero (and gets zero
    /// gradient in backward).
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "l2_normalize",
                detail: format!("expected rank 1, got {:?}", v.shape()),
            });
        }
        let norm = v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let out = if norm == 0.0 {
            v.clone()
        } else {
            Tensor::vector(v.data().iter().map(|a| a / norm).collect())
        };
        Ok(self.push(out, Op::L2Normalize { x }))
    }

    /// Unit-normalizes each row of a matrix; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "normalize_rows",
                detail: format!("expected rank 2, got {:?}", v.shape()),
            });
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row(i);
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            for j in 0..c {
                out[i * c + j] = if norm == 0.0 { row[j] } else { row[j] / norm };
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out), Op::NormalizeRows { x }))
    }

    fn same_shape(
        &self,
        op: &'static str,
        x: NodeId,
        y: NodeId,
    ) -> Result<(), AutodiffError> {
        if self.value(x).shape() != self.value(y).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!(
                    "operands have shapes {:?} and {:?}",
                    self.value(x).shape(),
                    self.value(y).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn mul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("elementwise_mul", x, y)?;
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(self.value(y).data()).map(|(a, b)| a * b).collect(),
        );
        Ok(self.push(out, Op::Mul { x, y }))
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("add", x, y)?;
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(self.value(y).data()).map(|(a, b)| a + b).collect(),
        );
        Ok(self.push(out, Op::Add { x, y }))
    }

    pub fn sub(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("sub", x, y)?;
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(self.value(y).data()).map(|(a, b)| a - b).collect(),
        );
        Ok(self.push(out, Op::Sub { x, y }))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&a| a + c).collect(),
        );
        self.push(out, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&a| a * c).collect(),
        );
        self.push(out, Op::Scale { x, c })
    }

    /// `A B` with `A: [r, k]`, `B: [k, c]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            });
        }
        let (r, k, c) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for kk in 0..k {
                let aik = av.at(i, kk);
                if aik == 0.0 {
                    continue;
                }
                let brow = bv.row(kk);
                for j in 0..c {
                    out[i * c + j] += aik * brow[j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out), Op::Matmul { a, b }))
    }

    /// Mean over rows: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean_rows",
                detail: format!("expected rank 2, got {:?}", v.shape()),
            });
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &a) in out.iter_mut().zip(v.row(i)) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows { x }))
    }

    /// Concatenates rank-1 nodes into one vector.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if xs.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "concat" });
        }
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    detail: format!("expected rank-1 parts, got {:?}", v.shape()),
                });
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat { xs: xs.to_vec() }))
    }

    /// Elementwise `max(0, x)`; the kink at 0 takes subgradient 0.
    pub fn hinge(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&a| a.max(0.0)).collect(),
        );
        self.push(out, Op::Hinge { x })
    }

    /// Sum of all elements, as a shape-`[1]` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Inner product of two equal-length vectors, as a shape-`[1]` node.
    pub fn dot(&mut self, x: NodeId, y: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.rank() != 1 || yv.rank() != 1 || xv.len() != yv.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                detail: format!("operands have shapes {:?} and {:?}", xv.shape(), yv.shape()),
            });
        }
        let s: f64 = xv.data().iter().zip(yv.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, y }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", v.shape()),
            });
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.at(i, j);
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out), Op::Transpose { x }))
    }

    /// Scales row `i` of `x` by `s[i]`.
    pub fn mul_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, sv) = (self.value(x), self.value(s));
        if xv.rank() != 2 || sv.rank() != 1 || sv.len() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_rows",
                detail: format!("matrix {:?} with row scales {:?}", xv.shape(), sv.shape()),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let si = sv.data()[i];
            for j in 0..c {
                out[i * c + j] = xv.at(i, j) * si;
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out), Op::MulRows { x, s }))
    }

    /// Per-column sums: `[r, c] -> [c]`.
    pub fn col_sums(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "col_sums",
                detail: format!("expected rank 2, got {:?}", v.shape()),
            });
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &a) in out.iter_mut().zip(v.row(i)) {
                *o += a;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::ColSums { x }))
    }

    /// Adds a length-`c` vector to every row of a `[r, c]` matrix.
    pub fn add_rows(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, vv) = (self.value(x), self.value(v));
        if xv.rank() != 2 || vv.rank() != 1 || vv.len() != xv.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_rows",
                detail: format!("matrix {:?} with row vector {:?}", xv.shape(), vv.shape()),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv.at(i, j) + vv.data()[j];
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out), Op::AddRows { x, v }))
    }

    /// Reinterprets `x` under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        let expect: usize = shape.iter().product();
        if expect != v.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", v.shape(), shape),
            });
        }
        let out = Tensor::new(shape, v.data().to_vec());
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Accumulates gradients of `loss` with respect to every node.
    ///
    /// Nodes outside the loss's ancestry keep exactly zero gradient. Two
    /// backward passes over the same graph produce identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        if !lv.data()[0].is_finite() {
            return Err(AutodiffError::NonFiniteLoss);
        }
        self.grads = self.values.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
        self.grads[loss.0].data_mut()[0] = 1.0;

        let values = &self.values;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let g = grads[i].clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Affine { w, x, b } => {
                    let (m, n) = (values[w.0].rows(), values[w.0].cols());
                    for r in 0..m {
                        let gr = g.data()[r];
                        if gr != 0.0 {
                            for c in 0..n {
                                grads[w.0].data_mut()[r * n + c] += gr * values[x.0].data()[c];
                            }
                        }
                    }
                    for c in 0..n {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += values[w.0].at(r, c) * g.data()[r];
                        }
                        grads[x.0].data_mut()[c] += acc;
                    }
                    for (o, &gr) in grads[b.0].data_mut().iter_mut().zip(g.data()) {
                        *o += gr;
                    }
                }
                Op::Sigmoid { x } => {
                    let y = &values[i];
                    for ((o, &gv), &yv) in
                        grads[x.0].data_mut().iter_mut().zip(g.data()).zip(y.data())
                    {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
                Op::Softmax { x } => {
                    let y = &values[i];
                    let c = y.cols();
                    for row in 0..y.rows() {
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let gs = &g.data()[row * c..(row + 1) * c];
                        let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        let out = &mut grads[x.0].data_mut()[row * c..(row + 1) * c];
                        for j in 0..c {
                            out[j] += ys[j] * (gs[j] - inner);
                        }
                    }
                }
                Op::L2Normalize { x } => {
                    let norm = values[x.0].data().iter().map(|a| a * a).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        let y = &values[i];
                        let inner: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in
                            grads[x.0].data_mut().iter_mut().zip(g.data()).zip(y.data())
                        {
                            *o += (gv - yv * inner) / norm;
                        }
                    }
                }
                Op::NormalizeRows { x } => {
                    let y = &values[i];
                    let c = y.cols();
                    for row in 0..y.rows() {
                        let xs = &values[x.0].data()[row * c..(row + 1) * c];
                        let norm = xs.iter().map(|a| a * a).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let gs = &g.data()[row * c..(row + 1) * c];
                        let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        let out = &mut grads[x.0].data_mut()[row * c..(row + 1) * c];
                        for j in 0..c {
                            out[j] += (gs[j] - ys[j] * inner) / norm;
                        }
                    }
                }
                Op::Mul { x, y } => {
                    let (xi, yi) = (x.0, y.0);
                    for k in 0..g.len() {
                        let gv = g.data()[k];
                        if gv != 0.0 {
                            let xv = values[xi].data()[k];
                            let yv = values[yi].data()[k];
                            grads[xi].data_mut()[k] += gv * yv;
                            grads[yi].data_mut()[k] += gv * xv;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (r, k, c) = (values[a.0].rows(), values[a.0].cols(), values[b.0].cols());
                    for i2 in 0..r {
                        for j in 0..c {
                            let gv = g.at(i2, j);
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                grads[a.0].data_mut()[i2 * k + kk] += gv * values[b.0].at(kk, j);
                                grads[b.0].data_mut()[kk * c + j] += gv * values[a.0].at(i2, kk);
                            }
                        }
                    }
                }
                Op::MeanRows { x } => {
                    let (r, c) = (values[x.0].rows(), values[x.0].cols());
                    let inv = 1.0 / r as f64;
                    for i2 in 0..r {
                        for j in 0..c {
                            grads[x.0].data_mut()[i2 * c + j] += g.data()[j] * inv;
                        }
                    }
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = values[x.0].len();
                        for k in 0..n {
                            grads[x.0].data_mut()[k] += g.data()[offset + k];
                        }
                        offset += n;
                    }
                }
                Op::Hinge { x } => {
                    for (k, (o, &gv)) in
                        grads[x.0].data_mut().iter_mut().zip(g.data()).enumerate()
                    {
                        if values[x.0].data()[k] > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Add { x, y } => {
                    for (k, &gv) in g.data().iter().enumerate() {
                        grads[x.0].data_mut()[k] += gv;
                        grads[y.0].data_mut()[k] += gv;
                    }
                }
                Op::Sub { x, y } => {
                    for (k, &gv) in g.data().iter().enumerate() {
                        grads[x.0].data_mut()[k] += gv;
                        grads[y.0].data_mut()[k] -= gv;
                    }
                }
                Op::AddScalar { x } => {
                    for (o, &gv) in grads[x.0].data_mut().iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
                Op::Scale { x, c } => {
                    for (o, &gv) in grads[x.0].data_mut().iter_mut().zip(g.data()) {
                        *o += c * gv;
                    }
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    for o in grads[x.0].data_mut() {
                        *o += gv;
                    }
                }
                Op::Dot { x, y } => {
                    let gv = g.data()[0];
                    let (xi, yi) = (x.0, y.0);
                    for k in 0..values[xi].len() {
                        let xv = values[xi].data()[k];
                        let yv = values[yi].data()[k];
                        grads[xi].data_mut()[k] += gv * yv;
                        grads[yi].data_mut()[k] += gv * xv;
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = (values[x.0].rows(), values[x.0].cols());
                    for i2 in 0..r {
                        for j in 0..c {
                            grads[x.0].data_mut()[i2 * c + j] += g.at(j, i2);
                        }
                    }
                }
                Op::MulRows { x, s } => {
                    let (r, c) = (values[x.0].rows(), values[x.0].cols());
                    for i2 in 0..r {
                        let sv = values[s.0].data()[i2];
                        let mut acc = 0.0;
                        for j in 0..c {
                            let gv = g.at(i2, j);
                            grads[x.0].data_mut()[i2 * c + j] += gv * sv;
                            acc += gv * values[x.0].at(i2, j);
                        }
                        grads[s.0].data_mut()[i2] += acc;
                    }
                }
                Op::ColSums { x } => {
                    let (r, c) = (values[x.0].rows(), values[x.0].cols());
                    for i2 in 0..r {
                        for j in 0..c {
                            grads[x.0].data_mut()[i2 * c + j] += g.data()[j];
                        }
                    }
                }
                Op::AddRows { x, v } => {
                    let (r, c) = (values[x.0].rows(), values[x.0].cols());
                    for i2 in 0..r {
                        for j in 0..c {
                            let gv = g.at(i2, j);
                            grads[x.0].data_mut()[i2 * c + j] += gv;
                            grads[v.0].data_mut()[j] += gv;
                        }
                    }
                }
                Op::Reshape { x } => {
                    for (o, &gv) in grads[x.0].data_mut().iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors with their gradient accumulators and Adam moment
/// buffers. Iteration order is the name order, so passes over the store are
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub(crate) slots: BTreeMap<String, Slot>,
    pub(crate) step: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Slot {
    pub(crate) value: Tensor,
    pub(crate) grad: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let shape = value.shape().to_vec();
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad_of(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            for g in slot.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Optimizer step counter (incremented by each Adam step).
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Creates one leaf per parameter on `tape`, in name order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let ids = self
            .slots
            .iter()
            .map(|(name, slot)| (name.clone(), tape.leaf(slot.value.clone())))
            .collect();
        Bound { ids }
    }
}

/// Parameter-name to tape-leaf mapping for one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Leaf node of a parameter; panics on unknown names, which are
    /// programming errors rather than data errors.
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }

    /// Adds the tape's leaf gradients into the store's accumulators.
    pub fn accumulate_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for (name, &id) in &self.ids {
            let g = tape.grad(id);
            let slot = store.slots.get_mut(name).expect("bound name missing from store");
            for (o, &gv) in slot.grad.data_mut().iter_mut().zip(g.data()) {
                *o += gv;
            }
        }
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Scalar parameters checked.
    pub checked: usize,
}

/// Compares analytic gradients of `build`'s loss against central finite
/// differences over every parameter element.
///
/// The relative error of one element is `|analytic - numeric| /
/// max(1e-6, |numeric|)`; the report carries the maximum. The floor keeps
/// near-zero gradients from being judged by f64 differencing noise, which
/// reaches ~1e-11 at the default step on unit-scale losses. `build` must
/// construct the loss from the bound parameters alone so that rebuilding
/// under perturbed values is meaningful.
pub fn grad_check<F>(
    params: &ParamStore,
    eps: f64,
    mut build: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&mut Tape, &Bound) -> Result<NodeId, AutodiffError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = bound
        .ids()
        .map(|(name, id)| (name.to_string(), tape.grad(id).data().to_vec()))
        .collect();

    let mut work = params.clone();
    let eval = |work: &ParamStore, build: &mut F| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let bound = work.bind(&mut tape);
        let loss = build(&mut tape, &bound)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(AutodiffError::NonFiniteLoss);
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, grads) in &analytic {
        for (k, &a) in grads.iter().enumerate() {
            let orig = work.get(name).unwrap().data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = orig + eps;
            let plus = eval(&work, &mut build)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig - eps;
            let minus = eval(&work, &mut build)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / numeric.abs().max(1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

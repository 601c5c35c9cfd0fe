//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Values are computed eagerly as nodes are recorded, so the tape doubles as
//! the forward evaluator. `backward` replays the recorded operations once,
//! in reverse order, accumulating vector-Jacobian products.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// out[i, j] = a[i, j] + bias[j]
    AddRowBias {
        input: NodeId,
        bias: NodeId,
    },
    /// [m, k] x [k, n] -> [m, n]
    Matmul(NodeId, NodeId),
    /// input [B, Cin, H, W], kernel [Cout, Cin, kh, kw], bias [Cout];
    /// valid padding, stride 1.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    /// 2x2 mean pooling with floor semantics; odd trailing rows/cols are
    /// dropped and receive zero gradient.
    MeanPool2(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    /// Mean over the batch of -log softmax(logits_b)[label_b].
    SoftmaxCrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// Mean over all elements.
    Mean(NodeId),
    /// Sum of squared elements.
    SumSquares(NodeId),
    /// Euclidean norm of each row of a rank-2 tensor.
    L2NormRows(NodeId),
    /// out[i, j] = cos(a_i, b_j) for rows of two rank-2 tensors.
    CosineMatrix(NodeId, NodeId),
    /// Stable log(sum(exp(row))) per row.
    LogSumExpRows(NodeId),
    /// Diagonal of a square rank-2 tensor.
    TakeDiag(NodeId),
    /// out_i = input_i - table[idx_i]; the table is a constant consumed at
    /// record time and receives no gradient.
    SubRowsIndexed(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    by_node: Vec<Tensor>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> &Tensor {
        &self.by_node[id.0]
    }
}

/// Linear record of primitive operations; also owns all forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input that requires no special treatment. Constants and
    /// parameters are identical on the tape; what makes something a
    /// parameter is that the caller asks for its gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Alias of [`Tape::constant`] that documents intent at call sites.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                expected: self.value(a).shape().to_vec(),
                got: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, data)?))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, data)?))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, data)?))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Scale(a, c), Tensor::new(shape, data)?))
    }

    pub fn add_row_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = rank2(self.value(input))?;
        let bs = self.value(bias).shape();
        if bs != [c] {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                got: bs.to_vec(),
            });
        }
        let mut data = self.value(input).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        Ok(self.push(Op::AddRowBias { input, bias }, Tensor::new(vec![r, c], data)?))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = rank2(self.value(a))?;
        let (k2, n) = rank2(self.value(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                expected: vec![k, n],
                got: vec![k2, n],
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::invalid("conv2d expects rank-4 input and kernel"));
        }
        let (bsz, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                expected: vec![cout, cin, kh, kw],
                got: kshape,
            });
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::ShapeMismatch {
                expected: vec![cout],
                got: self.value(bias).shape().to_vec(),
            });
        }
        if h < kh || w < kw {
            return Err(Error::invalid("conv2d input smaller than kernel"));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let iv = self.value(input).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; bsz * cout * oh * ow];
        for b in 0..bsz {
            for co in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                let irow = ((b * cin + ci) * h + oi + ki) * w + oj;
                                let krow = ((co * cin + ci) * kh + ki) * kw;
                                for kj in 0..kw {
                                    acc += iv[irow + kj] * kv[krow + kj];
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv2d { input, kernel, bias },
            Tensor::new(vec![bsz, cout, oh, ow], out)?,
        ))
    }

    pub fn mean_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid("mean_pool2 expects rank-4 input"));
        }
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("mean_pool2 input too small"));
        }
        let iv = self.value(input).data();
        let mut out = vec![0.0; bsz * c * oh * ow];
        for b in 0..bsz {
            for ch in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let base = (b * c + ch) * h;
                        let r0 = (base + 2 * oi) * w + 2 * oj;
                        let r1 = (base + 2 * oi + 1) * w + 2 * oj;
                        out[((b * c + ch) * oh + oi) * ow + oj] =
                            (iv[r0] + iv[r0 + 1] + iv[r1] + iv[r1 + 1]) * 0.25;
                    }
                }
            }
        }
        Ok(self.push(Op::MeanPool2(input), Tensor::new(vec![bsz, c, oh, ow], out)?))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.value(input).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        Ok(self.push(Op::Relu(input), Tensor::new(shape, data)?))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        Ok(self.push(Op::Reshape(input), value))
    }

    pub fn softmax_cross_entropy_mean(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId> {
        let (b, k) = rank2(self.value(logits))?;
        if labels.len() != b {
            return Err(Error::invalid("label count must equal batch size"));
        }
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::invalid("label out of range"));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Op::Mean(input), Tensor::scalar(m)))
    }

    pub fn sum_squares(&mut self, input: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(input).data().iter().map(|&x| x * x).sum();
        Ok(self.push(Op::SumSquares(input), Tensor::scalar(s)))
    }

    pub fn l2_norm_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let (r, c) = rank2(self.value(input))?;
        let iv = self.value(input).data();
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = iv[i * c..(i + 1) * c]
                .iter()
                .map(|&x| x * x)
                .sum::<f64>()
                .sqrt();
        }
        Ok(self.push(Op::L2NormRows(input), Tensor::new(vec![r], out)?))
    }

    /// Pairwise cosine similarity between rows of `a` and rows of `b`.
    /// Zero-norm rows are rejected so the result stays exact.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, d) = rank2(self.value(a))?;
        let (s, d2) = rank2(self.value(b))?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                expected: vec![r, d],
                got: vec![s, d2],
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let na: Vec<f64> = (0..r)
            .map(|i| av[i * d..(i + 1) * d].iter().map(|&x| x * x).sum::<f64>().sqrt())
            .collect();
        let nb: Vec<f64> = (0..s)
            .map(|j| bv[j * d..(j + 1) * d].iter().map(|&x| x * x).sum::<f64>().sqrt())
            .collect();
        if na.iter().chain(nb.iter()).any(|&n| n == 0.0) {
            return Err(Error::invalid("cosine of zero vector"));
        }
        let mut out = vec![0.0; r * s];
        for i in 0..r {
            for j in 0..s {
                let dot: f64 = (0..d).map(|p| av[i * d + p] * bv[j * d + p]).sum();
                out[i * s + j] = dot / (na[i] * nb[j]);
            }
        }
        Ok(self.push(Op::CosineMatrix(a, b), Tensor::new(vec![r, s], out)?))
    }

    pub fn log_sum_exp_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let (r, c) = rank2(self.value(input))?;
        let iv = self.value(input).data();
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &iv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out[i] = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        }
        Ok(self.push(Op::LogSumExpRows(input), Tensor::new(vec![r], out)?))
    }

    pub fn take_diag(&mut self, input: NodeId) -> Result<NodeId> {
        let (r, c) = rank2(self.value(input))?;
        if r != c {
            return Err(Error::invalid("take_diag expects a square matrix"));
        }
        let iv = self.value(input).data();
        let out: Vec<f64> = (0..r).map(|i| iv[i * c + i]).collect();
        Ok(self.push(Op::TakeDiag(input), Tensor::new(vec![r], out)?))
    }

    /// Subtract `table[idx_i]` from row i of `input`. The table receives no
    /// gradient, which is exactly the contract centroids need.
    pub fn sub_rows_indexed(
        &mut self,
        input: NodeId,
        table: Tensor,
        idx: &[usize],
    ) -> Result<NodeId> {
        let (r, d) = rank2(self.value(input))?;
        let (k, d2) = rank2(&table)?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                expected: vec![k, d],
                got: table.shape().to_vec(),
            });
        }
        if idx.len() != r {
            return Err(Error::invalid("index count must equal row count"));
        }
        if idx.iter().any(|&i| i >= k) {
            return Err(Error::invalid("row index out of table range"));
        }
        let iv = self.value(input).data();
        let tv = table.data();
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let t = &tv[idx[i] * d..(idx[i] + 1) * d];
            for p in 0..d {
                out[i * d + p] = iv[i * d + p] - t[p];
            }
        }
        Ok(self.push(Op::SubRowsIndexed(input), Tensor::new(vec![r, d], out)?))
    }

    /// Gradients of a scalar `loss` node with respect to every node on the
    /// tape. Nodes not on a path to the loss get zero gradients; a
    /// non-scalar loss is rejected.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid("backward expects a scalar loss"));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        let mut touched = vec![false; self.nodes.len()];
        grads[loss.0] = Tensor::scalar(1.0);
        touched[loss.0] = true;

        for i in (0..=loss.0).rev() {
            if !touched[i] {
                continue;
            }
            // Move the grad out to avoid aliasing while accumulating into
            // parents; it is restored below.
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(vec![1]));
            self.accumulate(i, &g, &mut grads, &mut touched);
            grads[i] = g;
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Tensor], touched: &mut [bool]) {
        let gv = g.data();
        let mut addto = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            touched[id.0] = true;
            f(grads[id.0].data_mut());
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                addto(*a, &mut |d| axpy(d, gv, 1.0));
                addto(*b, &mut |d| axpy(d, gv, 1.0));
            }
            Op::Sub(a, b) => {
                addto(*a, &mut |d| axpy(d, gv, 1.0));
                addto(*b, &mut |d| axpy(d, gv, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                addto(*a, &mut |d| {
                    for (x, (&gy, &y)) in d.iter_mut().zip(gv.iter().zip(bv.iter())) {
                        *x += gy * y;
                    }
                });
                addto(*b, &mut |d| {
                    for (x, (&gy, &y)) in d.iter_mut().zip(gv.iter().zip(av.iter())) {
                        *x += gy * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                addto(*a, &mut |d| axpy(d, gv, c));
            }
            Op::AddRowBias { input, bias } => {
                let (r, c) = rank2(self.value(*input)).expect("validated at record time");
                addto(*input, &mut |d| axpy(d, gv, 1.0));
                addto(*bias, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += gv[i * c + j];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = rank2(self.value(*a)).expect("validated");
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                // dA = g @ B^T
                addto(*a, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gv[i * n + j] * bv[p * n + j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T @ g
                addto(*b, &mut |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * gv[i * n + j];
                            }
                            d[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, bias } => {
                let ishape = self.value(*input).shape().to_vec();
                let kshape = self.value(*kernel).shape().to_vec();
                let (bsz, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (cout, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let iv = self.value(*input).data().to_vec();
                let kv = self.value(*kernel).data().to_vec();
                addto(*input, &mut |d| {
                    for b in 0..bsz {
                        for co in 0..cout {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let gy = gv[((b * cout + co) * oh + oi) * ow + oj];
                                    if gy == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ki in 0..kh {
                                            let irow = ((b * cin + ci) * h + oi + ki) * w + oj;
                                            let krow = ((co * cin + ci) * kh + ki) * kw;
                                            for kj in 0..kw {
                                                d[irow + kj] += gy * kv[krow + kj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                addto(*kernel, &mut |d| {
                    for b in 0..bsz {
                        for co in 0..cout {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let gy = gv[((b * cout + co) * oh + oi) * ow + oj];
                                    if gy == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ki in 0..kh {
                                            let irow = ((b * cin + ci) * h + oi + ki) * w + oj;
                                            let krow = ((co * cin + ci) * kh + ki) * kw;
                                            for kj in 0..kw {
                                                d[krow + kj] += gy * iv[irow + kj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                addto(*bias, &mut |d| {
                    for b in 0..bsz {
                        for co in 0..cout {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    d[co] += gv[((b * cout + co) * oh + oi) * ow + oj];
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanPool2(input) => {
                let shape = self.value(*input).shape().to_vec();
                let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                addto(*input, &mut |d| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let gy =
                                        gv[((b * c + ch) * oh + oi) * ow + oj] * 0.25;
                                    let base = (b * c + ch) * h;
                                    let r0 = (base + 2 * oi) * w + 2 * oj;
                                    let r1 = (base + 2 * oi + 1) * w + 2 * oj;
                                    d[r0] += gy;
                                    d[r0 + 1] += gy;
                                    d[r1] += gy;
                                    d[r1 + 1] += gy;
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(input) => {
                let iv = self.value(*input).data().to_vec();
                addto(*input, &mut |d| {
                    for (x, (&gy, &v)) in d.iter_mut().zip(gv.iter().zip(iv.iter())) {
                        if v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Reshape(input) => {
                addto(*input, &mut |d| axpy(d, gv, 1.0));
            }
            Op::SoftmaxCrossEntropyMean { logits, labels } => {
                let (b, k) = rank2(self.value(*logits)).expect("validated");
                let lv = self.value(*logits).data().to_vec();
                let scale = gv[0] / b as f64;
                let labels = labels.clone();
                addto(*logits, &mut |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &lv[i * k..(i + 1) * k];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::Mean(input) => {
                let n = self.value(*input).numel() as f64;
                let gy = gv[0] / n;
                addto(*input, &mut |d| {
                    for x in d.iter_mut() {
                        *x += gy;
                    }
                });
            }
            Op::SumSquares(input) => {
                let iv = self.value(*input).data().to_vec();
                let gy = gv[0];
                addto(*input, &mut |d| {
                    for (x, &v) in d.iter_mut().zip(iv.iter()) {
                        *x += 2.0 * v * gy;
                    }
                });
            }
            Op::L2NormRows(input) => {
                let (r, c) = rank2(self.value(*input)).expect("validated");
                let iv = self.value(*input).data().to_vec();
                let norms = self.nodes[i].value.data().to_vec();
                addto(*input, &mut |d| {
                    for row in 0..r {
                        if norms[row] == 0.0 {
                            continue; // subgradient 0 at the kink
                        }
                        let gy = gv[row] / norms[row];
                        for p in 0..c {
                            d[row * c + p] += gy * iv[row * c + p];
                        }
                    }
                });
            }
            Op::CosineMatrix(a, b) => {
                let (r, d_) = rank2(self.value(*a)).expect("validated");
                let s = self.value(*b).shape()[0];
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let sv = self.nodes[i].value.data().to_vec();
                let na: Vec<f64> = (0..r)
                    .map(|x| av[x * d_..(x + 1) * d_].iter().map(|&v| v * v).sum::<f64>().sqrt())
                    .collect();
                let nb: Vec<f64> = (0..s)
                    .map(|x| bv[x * d_..(x + 1) * d_].iter().map(|&v| v * v).sum::<f64>().sqrt())
                    .collect();
                addto(*a, &mut |d| {
                    for ii in 0..r {
                        for jj in 0..s {
                            let gy = gv[ii * s + jj];
                            if gy == 0.0 {
                                continue;
                            }
                            let c = sv[ii * s + jj];
                            for p in 0..d_ {
                                d[ii * d_ + p] += gy
                                    * (bv[jj * d_ + p] / (na[ii] * nb[jj])
                                        - c * av[ii * d_ + p] / (na[ii] * na[ii]));
                            }
                        }
                    }
                });
                addto(*b, &mut |d| {
                    for ii in 0..r {
                        for jj in 0..s {
                            let gy = gv[ii * s + jj];
                            if gy == 0.0 {
                                continue;
                            }
                            let c = sv[ii * s + jj];
                            for p in 0..d_ {
                                d[jj * d_ + p] += gy
                                    * (av[ii * d_ + p] / (na[ii] * nb[jj])
                                        - c * bv[jj * d_ + p] / (nb[jj] * nb[jj]));
                            }
                        }
                    }
                });
            }
            Op::LogSumExpRows(input) => {
                let (r, c) = rank2(self.value(*input)).expect("validated");
                let iv = self.value(*input).data().to_vec();
                addto(*input, &mut |d| {
                    for row in 0..r {
                        let gy = gv[row];
                        if gy == 0.0 {
                            continue;
                        }
                        let vals = &iv[row * c..(row + 1) * c];
                        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = vals.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..c {
                            d[row * c + j] += gy * (vals[j] - max).exp() / sum;
                        }
                    }
                });
            }
            Op::TakeDiag(input) => {
                let n = self.value(*input).shape()[0];
                addto(*input, &mut |d| {
                    for j in 0..n {
                        d[j * n + j] += gv[j];
                    }
                });
            }
            Op::SubRowsIndexed(input) => {
                addto(*input, &mut |d| axpy(d, gv, 1.0));
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += a * s;
    }
}

fn rank2(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("expected rank-2 tensor, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Central finite differences of a scalar function of the given parameter
/// tensors. Serves as the independent oracle against which the tape is
/// checked; it never touches the tape internals.
pub fn finite_diff_gradients(
    f: &dyn Fn(&[Tensor]) -> f64,
    params: &[Tensor],
    eps: f64,
) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut g = Tensor::zeros(p.shape().to_vec());
        for ei in 0..p.numel() {
            let mut plus: Vec<Tensor> = params.to_vec();
            plus[pi].data_mut()[ei] += eps;
            let mut minus: Vec<Tensor> = params.to_vec();
            minus[pi].data_mut()[ei] -= eps;
            g.data_mut()[ei] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // loss = p^2 at p = 3 -> dloss/dp = 6
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(p, p).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.of(p).scalar_value(), 6.0);
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(5.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let loss = tape.mul(c, c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(p).scalar_value(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        // 3 -> 3 -> 2 dense net with CE loss: 20 parameters.
        let w1 = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap();
        let b1 = Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
        let w2 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap();
        let b2 = Tensor::new(vec![2], (0..2).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.4, -0.7, 1.1]).unwrap();
        let params = vec![w1, b1, w2, b2];

        let build = |ps: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let w1 = tape.param(ps[0].clone());
            let b1 = tape.param(ps[1].clone());
            let w2 = tape.param(ps[2].clone());
            let b2 = tape.param(ps[3].clone());
            let h = tape.matmul(xn, w1).unwrap();
            let h = tape.add_row_bias(h, b1).unwrap();
            let h = tape.relu(h).unwrap();
            let o = tape.matmul(h, w2).unwrap();
            let o = tape.add_row_bias(o, b2).unwrap();
            let loss = tape.softmax_cross_entropy_mean(o, &[1]).unwrap();
            tape.scalar_value(loss)
        };
        let fd = finite_diff_gradients(&build, &params, 1e-5);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let h = tape.matmul(xn, ids[0]).unwrap();
        let h = tape.add_row_bias(h, ids[1]).unwrap();
        let h = tape.relu(h).unwrap();
        let o = tape.matmul(h, ids[2]).unwrap();
        let o = tape.add_row_bias(o, ids[3]).unwrap();
        let loss = tape.softmax_cross_entropy_mean(o, &[1]).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut max_rel = 0.0f64;
        for (id, fdg) in ids.iter().zip(fd.iter()) {
            for (a, b) in grads.of(*id).data().iter().zip(fdg.data().iter()) {
                let denom = a.abs().max(b.abs());
                if denom < 1e-6 {
                    continue;
                }
                max_rel = max_rel.max((a - b).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let p = tape.param(Tensor::new(vec![2, 2], vec![0.3, -1.0, 0.5, 2.0]).unwrap());
            let q = tape.param(Tensor::new(vec![2, 2], vec![1.5, 0.2, -0.4, 0.9]).unwrap());
            let m = tape.matmul(p, q).unwrap();
            let s = tape.sum_squares(m).unwrap();
            let g = tape.backward(s).unwrap();
            (g.of(p).clone(), g.of(q).clone())
        };
        let (a1, a2) = build();
        let (b1, b2) = build();
        assert!(a1.bit_eq(&b1) && a2.bit_eq(&b2));
    }
}

use crate::{AdError, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Elu(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanLast(NodeId),
    LogSumExp(NodeId),
    Conv3d(Conv3dOp),
}

#[derive(Clone, Copy, Debug)]
struct Conv3dOp {
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    stride: usize,
    pad: usize,
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every node's inputs precede it, so a single reverse sweep is a valid
/// topological order for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients of a scalar loss with respect to every registered parameter,
/// in registration order.
#[derive(Clone, Debug)]
pub struct Gradients {
    entries: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries
            .iter()
            .find_map(|(node, grad)| (*node == id).then_some(grad))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.entries.iter().map(|(id, g)| (*id, g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_vec(self) -> Vec<(NodeId, Tensor)> {
        self.entries
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registered trainable parameters in registration order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.params.push(id);
        id
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AdError::UnknownNode(id.0))
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.check(a)?.value.shape(), self.check(b)?.value.shape());
        if sa != sb {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let input = &self.check(a)?.value;
        let data = input.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_op(op_name, input.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(op, value, rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_op(op_name, va.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.check(a)?.value, &self.check(b)?.value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, &y)| *o += x * y);
            }
        }
        let value = Tensor::from_op("matmul", vec![m, n], out)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.check(x)?.value, &self.check(bias)?.value);
        let n = *vx.shape().last().expect("tensor shape is never empty");
        if vb.shape().len() != 1 || vb.shape()[0] != n {
            return Err(AdError::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let b = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::from_op("add_bias", vx.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(AdError::NonFinite { op: "scale" });
        }
        self.unary("scale", a, Op::Scale(a, factor), |x| x * factor)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs.first().ok_or(AdError::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.check(*first)?.value.shape().to_vec();
        if axis >= base.len() {
            return Err(AdError::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.check(id)?.value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let v = &self.nodes[id.0].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_op("concat", shape, data)?;
        let rg = self.grad_flag(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.check(a)?.value;
        let s = v.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(AdError::InvalidShape {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, size, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::from_op("slice", shape, data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = &self.check(a)?.value;
        if shape.iter().product::<usize>() != v.len() || shape.contains(&0) {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::from_op("reshape", shape, v.data().to_vec())?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("elu", a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("softplus", a, Op::Softplus(a), |x| {
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        })
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.check(a)?.value;
        let value = Tensor::from_op("sum", vec![1], vec![v.data().iter().sum()])?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Sum(a), value, rg))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.check(a)?.value;
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let value = Tensor::from_op("mean", vec![1], vec![m])?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Mean(a), value, rg))
    }

    /// Mean over the last axis, which is dropped from the shape.
    pub fn mean_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.check(a)?.value;
        let n = *v.shape().last().expect("tensor shape is never empty");
        let data = v
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let value = Tensor::from_op("mean_last", reduced_shape(v.shape()), data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::MeanLast(a), value, rg))
    }

    /// Numerically stable log-sum-exp over the last axis, which is dropped.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.check(a)?.value;
        let n = *v.shape().last().expect("tensor shape is never empty");
        let data = v
            .data()
            .chunks(n)
            .map(|c| {
                let m = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + c.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let value = Tensor::from_op("log_sum_exp", reduced_shape(v.shape()), data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::LogSumExp(a), value, rg))
    }

    /// 3D convolution with cubic kernels and zero padding.
    ///
    /// `input` is `[batch, c_in, d, h, w]`, `weight` is
    /// `[c_out, c_in, k, k, k]` and `bias` is `[c_out]`.
    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (x, w, b) = (
            &self.check(input)?.value,
            &self.check(weight)?.value,
            &self.check(bias)?.value,
        );
        let (xs, ws) = (x.shape(), w.shape());
        let valid = xs.len() == 5
            && ws.len() == 5
            && ws[1] == xs[1]
            && ws[2] == ws[3]
            && ws[3] == ws[4]
            && b.shape() == [ws[0]]
            && stride >= 1
            && (2..5).all(|d| xs[d] + 2 * pad >= ws[2]);
        if !valid {
            return Err(AdError::ShapeMismatch {
                op: "conv3d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let geo = ConvGeometry::new(xs, ws, stride, pad);
        let out = geo.forward(x.data(), w.data(), b.data());
        let value = Tensor::from_op("conv3d", geo.out_shape(), out)?;
        let rg = self.grad_flag(&[input, weight, bias]);
        Ok(self.push(
            Op::Conv3d(Conv3dOp {
                input,
                weight,
                bias,
                stride,
                pad,
            }),
            value,
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.check(loss)?.value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(AdError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let entries = self
            .params
            .iter()
            .map(|&id| {
                let v = &self.nodes[id.0].value;
                let data = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; v.len()]);
                Tensor::from_op("backward", v.shape().to_vec(), data).map(|t| (id, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { entries })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let elementwise = |grads: &mut [Option<Vec<f64>>], a: NodeId, d: &dyn Fn(usize) -> f64| {
            if self.wants(a) {
                accumulate(&mut grads[a.0], (0..g.len()).map(|i| g[i] * d(i)).collect());
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let db = self.val(*b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let da = self.val(*a);
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = da[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, &y)| *o += x * y);
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Add(a, b) => {
                elementwise(grads, *a, &|_| 1.0);
                elementwise(grads, *b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                elementwise(grads, *a, &|_| 1.0);
                elementwise(grads, *b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.val(*a), self.val(*b));
                elementwise(grads, *a, &|i| db[i]);
                elementwise(grads, *b, &|i| da[i]);
            }
            Op::AddBias(x, b) => {
                elementwise(grads, *x, &|_| 1.0);
                if self.wants(*b) {
                    let n = self.shape(*b)[0];
                    let mut gb = vec![0.0; n];
                    g.iter().enumerate().for_each(|(i, v)| gb[i % n] += v);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale(a, c) => elementwise(grads, *a, &|_| *c),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for id in inputs {
                    let width = self.shape(*id)[*axis];
                    if self.wants(*id) {
                        let mut gi = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[base..base + width * inner]);
                        }
                        accumulate(&mut grads[id.0], gi);
                    }
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.wants(*input) {
                    let src = self.shape(*input);
                    let (outer, size, inner) = split_axis(src, *axis);
                    let len = node.value.shape()[*axis];
                    let mut gi = vec![0.0; outer * size * inner];
                    for o in 0..outer {
                        let dst = (o * size + start) * inner;
                        let from = o * len * inner;
                        gi[dst..dst + len * inner].copy_from_slice(&g[from..from + len * inner]);
                    }
                    accumulate(&mut grads[input.0], gi);
                }
            }
            Op::Reshape(a) => elementwise(grads, *a, &|_| 1.0),
            Op::Elu(a) => {
                let x = self.val(*a);
                elementwise(grads, *a, &|i| if x[i] > 0.0 { 1.0 } else { out[i] + 1.0 });
            }
            Op::Softplus(a) => {
                let x = self.val(*a);
                elementwise(grads, *a, &|i| 1.0 / (1.0 + (-x[i]).exp()));
            }
            Op::Square(a) => {
                let x = self.val(*a);
                elementwise(grads, *a, &|i| 2.0 * x[i]);
            }
            Op::Exp(a) => elementwise(grads, *a, &|i| out[i]),
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.shape(*a).iter().product::<usize>();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    accumulate(&mut grads[a.0], vec![g[0] * scale; n]);
                }
            }
            Op::MeanLast(a) => {
                if self.wants(*a) {
                    let n = *self.shape(*a).last().expect("non-empty shape");
                    let gi = g
                        .iter()
                        .flat_map(|&v| std::iter::repeat(v / n as f64).take(n))
                        .collect();
                    accumulate(&mut grads[a.0], gi);
                }
            }
            Op::LogSumExp(a) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    let n = *self.shape(*a).last().expect("non-empty shape");
                    let gi = x
                        .chunks(n)
                        .zip(g.iter().zip(out))
                        .flat_map(|(row, (&gr, &lse))| row.iter().map(move |v| gr * (v - lse).exp()))
                        .collect();
                    accumulate(&mut grads[a.0], gi);
                }
            }
            Op::Conv3d(c) => {
                let geo = ConvGeometry::new(self.shape(c.input), self.shape(c.weight), c.stride, c.pad);
                let (gx, gw, gb) = geo.backward(
                    self.val(c.input),
                    self.val(c.weight),
                    g,
                    self.wants(c.input),
                    self.wants(c.weight) || self.wants(c.bias),
                );
                if let Some(gx) = gx {
                    accumulate(&mut grads[c.input.0], gx);
                }
                if let Some((gw, gb)) = gw.zip(gb) {
                    if self.wants(c.weight) {
                        accumulate(&mut grads[c.weight.0], gw);
                    }
                    if self.wants(c.bias) {
                        accumulate(&mut grads[c.bias.0], gb);
                    }
                }
            }
        }
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dims: [usize; 3],
    out: [usize; 3],
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let k = ws[2];
        let dims = [xs[2], xs[3], xs[4]];
        Self {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            k,
            stride,
            pad,
            dims,
            out: dims.map(|d| conv_out(d, k, stride, pad)),
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.out[0], self.out[1], self.out[2]]
    }

    fn in_vol(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    /// Input voxel feeding each `(output voxel, kernel tap)` pair, or `None`
    /// where the tap falls in the padding.
    fn tap_table(&self) -> Vec<Option<usize>> {
        let [d, h, w] = self.dims;
        let [od, oh, ow] = self.out;
        let k = self.k;
        let coord = |o: usize, k: usize, size: usize| -> Option<usize> {
            let i = (o * self.stride + k) as isize - self.pad as isize;
            (i >= 0 && (i as usize) < size).then_some(i as usize)
        };
        let mut table = Vec::with_capacity(self.out_vol() * k * k * k);
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    for kd in 0..k {
                        for kh in 0..k {
                            for kw in 0..k {
                                let tap = coord(z, kd, d)
                                    .zip(coord(y, kh, h))
                                    .zip(coord(x, kw, w))
                                    .map(|((iz, iy), ix)| (iz * h + iy) * w + ix);
                                table.push(tap);
                            }
                        }
                    }
                }
            }
        }
        table
    }

    /// Unfolds sample `n` into `[out_vol, c_in·k³]` patch rows.
    fn im2col(&self, x: &[f64], n: usize, table: &[Option<usize>], cols: &mut [f64]) {
        let (iv, kv) = (self.in_vol(), self.k.pow(3));
        let row_len = self.c_in * kv;
        for o in 0..self.out_vol() {
            let taps = &table[o * kv..(o + 1) * kv];
            let row = &mut cols[o * row_len..(o + 1) * row_len];
            for ci in 0..self.c_in {
                let src = &x[(n * self.c_in + ci) * iv..(n * self.c_in + ci + 1) * iv];
                for (dst, tap) in row[ci * kv..(ci + 1) * kv].iter_mut().zip(taps) {
                    *dst = tap.map_or(0.0, |i| src[i]);
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let ov = self.out_vol();
        let row_len = self.c_in * self.k.pow(3);
        let table = self.tap_table();
        let mut cols = vec![0.0; ov * row_len];
        let mut out = vec![0.0; self.batch * self.c_out * ov];
        for n in 0..self.batch {
            self.im2col(x, n, &table, &mut cols);
            for co in 0..self.c_out {
                let wrow = &w[co * row_len..(co + 1) * row_len];
                let dst = &mut out[(n * self.c_out + co) * ov..(n * self.c_out + co + 1) * ov];
                for (o, v) in dst.iter_mut().enumerate() {
                    let patch = &cols[o * row_len..(o + 1) * row_len];
                    *v = b[co] + wrow.iter().zip(patch).map(|(a, c)| a * c).sum::<f64>();
                }
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        want_input: bool,
        want_weight: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let (iv, ov, kv) = (self.in_vol(), self.out_vol(), self.k.pow(3));
        let row_len = self.c_in * kv;
        let table = self.tap_table();
        let mut cols = vec![0.0; ov * row_len];
        let mut gcols = vec![0.0; ov * row_len];
        let mut gx = want_input.then(|| vec![0.0; x.len()]);
        let mut gw = want_weight.then(|| vec![0.0; w.len()]);
        let mut gb = want_weight.then(|| vec![0.0; self.c_out]);
        for n in 0..self.batch {
            let gn = &g[n * self.c_out * ov..(n + 1) * self.c_out * ov];
            if let (Some(gw), Some(gb)) = (gw.as_mut(), gb.as_mut()) {
                self.im2col(x, n, &table, &mut cols);
                for co in 0..self.c_out {
                    let go = &gn[co * ov..(co + 1) * ov];
                    gb[co] += go.iter().sum::<f64>();
                    let gwrow = &mut gw[co * row_len..(co + 1) * row_len];
                    for (o, &gval) in go.iter().enumerate() {
                        if gval == 0.0 {
                            continue;
                        }
                        let patch = &cols[o * row_len..(o + 1) * row_len];
                        gwrow.iter_mut().zip(patch).for_each(|(a, c)| *a += gval * c);
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                gcols.iter_mut().for_each(|v| *v = 0.0);
                for co in 0..self.c_out {
                    let wrow = &w[co * row_len..(co + 1) * row_len];
                    for (o, &gval) in gn[co * ov..(co + 1) * ov].iter().enumerate() {
                        if gval == 0.0 {
                            continue;
                        }
                        let grow = &mut gcols[o * row_len..(o + 1) * row_len];
                        grow.iter_mut().zip(wrow).for_each(|(a, c)| *a += gval * c);
                    }
                }
                for o in 0..ov {
                    let taps = &table[o * kv..(o + 1) * kv];
                    for ci in 0..self.c_in {
                        let dst = &mut gx[(n * self.c_in + ci) * iv..(n * self.c_in + ci + 1) * iv];
                        let grow = &gcols[o * row_len + ci * kv..o * row_len + (ci + 1) * kv];
                        for (tap, &gv) in taps.iter().zip(grow) {
                            if let Some(i) = tap {
                                dst[*i] += gv;
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

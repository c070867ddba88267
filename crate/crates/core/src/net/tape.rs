//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation as it is evaluated. [`Graph::backward`]
//! walks the record in reverse and *adds* the resulting adjoints into the
//! gradient slots of the leaves, so repeated backward passes accumulate until
//! [`Graph::zero_grad`] is called. Operations are coarse (matrix products,
//! whole convolutions, fused losses) to keep the tape short.

use std::rc::Rc;

use super::tensor::Tensor;
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.3;

/// Added under the square root when normalizing rows, so an all-zero row
/// maps to zero instead of NaN.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    LeakyRelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    SliceLast {
        input: NodeId,
        start: usize,
    },
    Step {
        input: NodeId,
        index: usize,
    },
    AppendMean(NodeId),
    NodeMix {
        input: NodeId,
        matrix: Rc<Vec<f64>>,
    },
    AddCenter(NodeId),
    NormalizeRows(NodeId),
    CircleLoss {
        z: NodeId,
        targets: Rc<Vec<f64>>,
    },
    Similarity(NodeId, NodeId),
    ToeplitzLogits(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Rc<Vec<usize>>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any trainable leaf feeds this node.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Scale(a, s), tracked)
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|&x| leaky_relu(x)).collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(t, Op::LeakyRelu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Sigmoid(a), tracked)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Tanh(a), tracked)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshaped(shape)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::Reshape(a), tracked))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::from_vec(&[m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), tracked))
    }

    /// Adds `bias[n]` to every row of `[.., n]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(shape_err(format!(
                "bias {:?} for rows of {:?}",
                self.shape(bias),
                self.shape(a)
            )));
        }
        let b = self.data(bias);
        let data = self
            .data(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let tracked = self.tracked(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), tracked))
    }

    /// `x` = linear map `[m, in] × [in, out] + bias[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ---- convolutions -----------------------------------------------------

    /// Valid, stride-1 2D convolution.
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, KH, KW]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sx[2] < sw[2] || sx[3] < sw[3] {
            return Err(shape_err(format!("conv2d input {sx:?} kernel {sw:?}")));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err(format!("conv2d bias {:?}", self.shape(b))));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                let obase = (ni * cout + co) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bd[co];
                        for ci in 0..cin {
                            let xb = (ni * cin + ci) * h * wd;
                            let wb = (co * cin + ci) * kh * kw;
                            for ky in 0..kh {
                                let xr = &xd[xb + (oy + ky) * wd + ox..][..kw];
                                let wr = &wdat[wb + ky * kw..][..kw];
                                acc += dot(xr, wr);
                            }
                        }
                        out[obase + oy * ow + ox] = acc;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, oh, ow], out)?;
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { input: x, weight: w, bias: b }, tracked))
    }

    /// Valid 1D convolution with the given stride.
    /// `x: [N, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sx[2] < sw[2] || stride == 0 {
            return Err(shape_err(format!("conv1d input {sx:?} kernel {sw:?} stride {stride}")));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err(format!("conv1d bias {:?}", self.shape(b))));
        }
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let olen = (len - k) / stride + 1;
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; n * cout * olen];
        for ni in 0..n {
            for co in 0..cout {
                let orow = &mut out[(ni * cout + co) * olen..][..olen];
                orow.iter_mut().for_each(|v| *v = bd[co]);
                for ci in 0..cin {
                    let xrow = &xd[(ni * cin + ci) * len..][..len];
                    let wrow = &wdat[(co * cin + ci) * k..][..k];
                    for (o, acc) in orow.iter_mut().enumerate() {
                        *acc += dot(&xrow[o * stride..][..k], wrow);
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, olen], out)?;
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(
            t,
            Op::Conv1d {
                input: x,
                weight: w,
                bias: b,
                stride,
            },
            tracked,
        ))
    }

    // ---- indexing ---------------------------------------------------------

    /// `[.., n] → [.., len]`, keeping columns `start..start+len`.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("slice of a scalar"))?;
        if start + len > n {
            return Err(shape_err(format!("slice {start}..{} of {n}", start + len)));
        }
        let data = self
            .data(a)
            .chunks_exact(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let t = Tensor::from_vec(&out_shape, data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::SliceLast { input: a, start }, tracked))
    }

    /// `[N, T, F] → [N, F]` at time step `index`.
    pub fn step(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(shape_err(format!("step {index} of {s:?}")));
        }
        let (n, t, f) = (s[0], s[1], s[2]);
        let src = self.data(a);
        let mut data = Vec::with_capacity(n * f);
        for ni in 0..n {
            data.extend_from_slice(&src[(ni * t + index) * f..][..f]);
        }
        let out = Tensor::from_vec(&[n, f], data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Step { input: a, index }, tracked))
    }

    // ---- wheel-graph helpers ---------------------------------------------

    /// `[N, B, F] → [N, B+1, F]`, appending the mean of the `B` rows as an
    /// extra (center) row.
    pub fn append_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(shape_err(format!("append_mean of {s:?}")));
        }
        let (n, b, f) = (s[0], s[1], s[2]);
        let src = self.data(a);
        let mut data = Vec::with_capacity(n * (b + 1) * f);
        for ni in 0..n {
            let block = &src[ni * b * f..][..b * f];
            data.extend_from_slice(block);
            let mut mean = vec![0.0; f];
            for row in block.chunks_exact(f) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            data.extend(mean.into_iter().map(|m| m / b as f64));
        }
        let t = Tensor::from_vec(&[n, b + 1, f], data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::AppendMean(a), tracked))
    }

    /// Mixes graph nodes with a constant `n × n` matrix:
    /// `out[b, i, :] = Σ_j M[i][j] · x[b, j, :]` for `x: [N, n, F]`.
    pub fn node_mix(&mut self, a: NodeId, matrix: Rc<Vec<f64>>) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || matrix.len() != s[1] * s[1] {
            return Err(shape_err(format!("node_mix of {s:?} with {} weights", matrix.len())));
        }
        let (n, v, f) = (s[0], s[1], s[2]);
        let src = self.data(a);
        let mut out = vec![0.0; n * v * f];
        for ni in 0..n {
            for i in 0..v {
                let orow = &mut out[(ni * v + i) * f..][..f];
                for j in 0..v {
                    let m = matrix[i * v + j];
                    if m == 0.0 {
                        continue;
                    }
                    let xrow = &src[(ni * v + j) * f..][..f];
                    for (o, x) in orow.iter_mut().zip(xrow) {
                        *o += m * x;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, v, f], out)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::NodeMix { input: a, matrix }, tracked))
    }

    /// `[N, B+1, F] → [N, B, F]`, adding the last (center) row to every
    /// other row.
    pub fn add_center(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] < 2 {
            return Err(shape_err(format!("add_center of {s:?}")));
        }
        let (n, v, f) = (s[0], s[1], s[2]);
        let b = v - 1;
        let src = self.data(a);
        let mut data = Vec::with_capacity(n * b * f);
        for ni in 0..n {
            let center = &src[(ni * v + b) * f..][..f];
            for i in 0..b {
                let row = &src[(ni * v + i) * f..][..f];
                data.extend(row.iter().zip(center).map(|(x, c)| x + c));
            }
        }
        let t = Tensor::from_vec(&[n, b, f], data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::AddCenter(a), tracked))
    }

    /// Row-wise `x / sqrt(‖x‖² + ε)` for `[N, F]`.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("normalize_rows of {s:?}")));
        }
        let f = s[1];
        let data = self
            .data(a)
            .chunks_exact(f)
            .flat_map(|row| {
                let r = (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
                row.iter().map(move |v| v / r)
            })
            .collect();
        let t = Tensor::from_vec(&s, data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::NormalizeRows(a), tracked))
    }

    // ---- losses -----------------------------------------------------------

    /// Batch mean of `(sin θ − im)² + (cos θ − re)²` for `z: [N, 2]` holding
    /// `(re, im)` rows and target angles in radians.
    pub fn circle_loss(&mut self, z: NodeId, targets: &[f64]) -> Result<NodeId> {
        let s = self.shape(z);
        if s.len() != 2 || s[1] != 2 || s[0] != targets.len() || targets.is_empty() {
            return Err(shape_err(format!("circle loss on {s:?} with {} targets", targets.len())));
        }
        let zd = self.data(z);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let (sn, cs) = t.sin_cos();
                (sn - zd[2 * i + 1]).powi(2) + (cs - zd[2 * i]).powi(2)
            })
            .sum();
        let t = Tensor::scalar(total / targets.len() as f64);
        let tracked = self.tracked(&[z]);
        Ok(self.push(
            t,
            Op::CircleLoss {
                z,
                targets: Rc::new(targets.to_vec()),
            },
            tracked,
        ))
    }

    /// `Ξ[n, i, j] = 1 / (1 + ‖a[n, i] − b[n, j]‖₂)` for `a, b: [N, B, F]`.
    pub fn similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sa != sb {
            return Err(shape_err(format!("similarity {sa:?} vs {sb:?}")));
        }
        let (n, v, f) = (sa[0], sa[1], sa[2]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * v * v);
        for ni in 0..n {
            for i in 0..v {
                let ar = &ad[(ni * v + i) * f..][..f];
                for j in 0..v {
                    let br = &bd[(ni * v + j) * f..][..f];
                    let d2: f64 = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
                    out.push(1.0 / (1.0 + d2.sqrt()));
                }
            }
        }
        let t = Tensor::from_vec(&[n, v, v], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Similarity(a, b), tracked))
    }

    /// `[N, B, B] → [N, B]`, `logit[n, k] = Σ_i Ξ[n, i, (i − k) mod B]`.
    pub fn toeplitz_logits(&mut self, xi: NodeId) -> Result<NodeId> {
        let s = self.shape(xi).to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(shape_err(format!("toeplitz logits of {s:?}")));
        }
        let (n, v) = (s[0], s[1]);
        let d = self.data(xi);
        let mut out = vec![0.0; n * v];
        for ni in 0..n {
            for k in 0..v {
                out[ni * v + k] = (0..v).map(|i| d[(ni * v + i) * v + (i + v - k) % v]).sum();
            }
        }
        let t = Tensor::from_vec(&[n, v], out)?;
        let tracked = self.tracked(&[xi]);
        Ok(self.push(t, Op::ToeplitzLogits(xi), tracked))
    }

    /// Batch mean of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.is_empty() || targets.iter().any(|&t| t >= s[1]) {
            return Err(shape_err(format!("cross entropy on {s:?} with targets {targets:?}")));
        }
        let k = s[1];
        let d = self.data(logits);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -log_softmax(&d[i * k..(i + 1) * k])[t])
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let t = Tensor::scalar(self.data(a).iter().sum());
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.data(a).len().max(1) as f64;
        let t = Tensor::scalar(self.data(a).iter().sum::<f64>() / n);
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Mean(a), tracked)
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from the scalar `output` and adds the gradients into
    /// every trainable leaf.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::filled(self.shape(output), 1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, make: impl FnOnce() -> Tensor) {
        if !self.nodes[id.0].tracked {
            return;
        }
        let t = make();
        match &mut adj[id.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, || g.clone());
                self.accumulate(adj, *b, || g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(adj, *a, || map2(g, bv, |x, y| x * y));
                self.accumulate(adj, *b, || map2(g, av, |x, y| x * y));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(adj, *a, || map1(g, |x| x * s));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.accumulate(adj, *a, || {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    let bd = bv.data();
                    for i in 0..m {
                        let grow = &gd[i * n..][..n];
                        for p in 0..k {
                            da[i * k + p] = dot(grow, &bd[p * n..][..n]);
                        }
                    }
                    Tensor::from_vec(&[m, k], da).unwrap()
                });
                self.accumulate(adj, *b, || {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    let ad = av.data();
                    for i in 0..m {
                        let grow = &gd[i * n..][..n];
                        for p in 0..k {
                            let a = ad[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..][..n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                    Tensor::from_vec(&[k, n], db).unwrap()
                });
            }
            Op::AddBias(a, bias) => {
                self.accumulate(adj, *a, || g.clone());
                let n = self.value(*bias).len();
                self.accumulate(adj, *bias, || {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::from_vec(&[n], db).unwrap()
                });
            }
            Op::LeakyRelu(a) => {
                let av = self.value(*a);
                self.accumulate(adj, *a, || map2(g, av, |gv, x| if x >= 0.0 { gv } else { LEAKY_SLOPE * gv }));
            }
            Op::Sigmoid(a) => {
                self.accumulate(adj, *a, || {
                    let data = gd.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::Tanh(a) => {
                self.accumulate(adj, *a, || {
                    let data = gd.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    Tensor::from_vec(g.shape(), data).unwrap()
                });
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(adj, *a, || g.clone().reshaped(&shape).unwrap());
            }
            Op::Conv2d { input, weight, bias } => self.conv2d_backward(g, *input, *weight, *bias, adj),
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            } => self.conv1d_backward(g, *input, *weight, *bias, *stride, adj),
            Op::SliceLast { input, start } => {
                let shape = self.shape(*input).to_vec();
                let n = *shape.last().unwrap();
                let len = *g.shape().last().unwrap();
                let start = *start;
                self.accumulate(adj, *input, || {
                    let mut d = vec![0.0; shape.iter().product()];
                    for (drow, grow) in d.chunks_exact_mut(n).zip(gd.chunks_exact(len)) {
                        drow[start..start + len].copy_from_slice(grow);
                    }
                    Tensor::from_vec(&shape, d).unwrap()
                });
            }
            Op::Step { input, index } => {
                let s = self.shape(*input).to_vec();
                let (n, t, f) = (s[0], s[1], s[2]);
                let index = *index;
                self.accumulate(adj, *input, || {
                    let mut d = vec![0.0; n * t * f];
                    for ni in 0..n {
                        d[(ni * t + index) * f..][..f].copy_from_slice(&gd[ni * f..][..f]);
                    }
                    Tensor::from_vec(&s, d).unwrap()
                });
            }
            Op::AppendMean(a) => {
                let s = self.shape(*a).to_vec();
                let (n, b, f) = (s[0], s[1], s[2]);
                self.accumulate(adj, *a, || {
                    let mut d = vec![0.0; n * b * f];
                    for ni in 0..n {
                        let center = &gd[(ni * (b + 1) + b) * f..][..f];
                        for i in 0..b {
                            let src = &gd[(ni * (b + 1) + i) * f..][..f];
                            let dst = &mut d[(ni * b + i) * f..][..f];
                            for ((dv, sv), cv) in dst.iter_mut().zip(src).zip(center) {
                                *dv = sv + cv / b as f64;
                            }
                        }
                    }
                    Tensor::from_vec(&s, d).unwrap()
                });
            }
            Op::NodeMix { input, matrix } => {
                let s = self.shape(*input).to_vec();
                let (n, v, f) = (s[0], s[1], s[2]);
                self.accumulate(adj, *input, || {
                    let mut d = vec![0.0; n * v * f];
                    for ni in 0..n {
                        for i in 0..v {
                            let grow = &gd[(ni * v + i) * f..][..f];
                            for j in 0..v {
                                let m = matrix[i * v + j];
                                if m == 0.0 {
                                    continue;
                                }
                                let drow = &mut d[(ni * v + j) * f..][..f];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += m * gv;
                                }
                            }
                        }
                    }
                    Tensor::from_vec(&s, d).unwrap()
                });
            }
            Op::AddCenter(a) => {
                let s = self.shape(*a).to_vec();
                let (n, v, f) = (s[0], s[1], s[2]);
                let b = v - 1;
                self.accumulate(adj, *a, || {
                    let mut d = vec![0.0; n * v * f];
                    for ni in 0..n {
                        for i in 0..b {
                            let grow = &gd[(ni * b + i) * f..][..f];
                            d[(ni * v + i) * f..][..f].copy_from_slice(grow);
                            let crow = &mut d[(ni * v + b) * f..][..f];
                            for (c, gv) in crow.iter_mut().zip(grow) {
                                *c += gv;
                            }
                        }
                    }
                    Tensor::from_vec(&s, d).unwrap()
                });
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let f = av.shape()[1];
                self.accumulate(adj, *a, || {
                    let mut d = Vec::with_capacity(av.len());
                    for (x, gr) in av.data().chunks_exact(f).zip(gd.chunks_exact(f)) {
                        let s2 = x.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS;
                        let r = s2.sqrt();
                        let xg = dot(x, gr);
                        d.extend(x.iter().zip(gr).map(|(xv, gv)| gv / r - xv * xg / (r * s2)));
                    }
                    Tensor::from_vec(av.shape(), d).unwrap()
                });
            }
            Op::CircleLoss { z, targets } => {
                let zv = self.value(*z);
                let scale = gd[0] / targets.len() as f64;
                self.accumulate(adj, *z, || {
                    let zd = zv.data();
                    let mut d = vec![0.0; zd.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        let (sn, cs) = t.sin_cos();
                        d[2 * i] = 2.0 * (zd[2 * i] - cs) * scale;
                        d[2 * i + 1] = 2.0 * (zd[2 * i + 1] - sn) * scale;
                    }
                    Tensor::from_vec(zv.shape(), d).unwrap()
                });
            }
            Op::Similarity(a, b) => self.similarity_backward(g, NodeId(id), *a, *b, adj),
            Op::ToeplitzLogits(xi) => {
                let s = self.shape(*xi).to_vec();
                let (n, v) = (s[0], s[1]);
                self.accumulate(adj, *xi, || {
                    let mut d = vec![0.0; n * v * v];
                    for ni in 0..n {
                        for k in 0..v {
                            let gk = gd[ni * v + k];
                            for i in 0..v {
                                d[(ni * v + i) * v + (i + v - k) % v] += gk;
                            }
                        }
                    }
                    Tensor::from_vec(&s, d).unwrap()
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = gd[0] / targets.len() as f64;
                self.accumulate(adj, *logits, || {
                    let mut d = Vec::with_capacity(lv.len());
                    for (i, &t) in targets.iter().enumerate() {
                        let ls = log_softmax(&lv.data()[i * k..(i + 1) * k]);
                        for (j, l) in ls.iter().enumerate() {
                            let p = l.exp();
                            d.push((p - if j == t { 1.0 } else { 0.0 }) * scale);
                        }
                    }
                    Tensor::from_vec(lv.shape(), d).unwrap()
                });
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                let gv = gd[0];
                self.accumulate(adj, *a, || Tensor::filled(&s, gv));
            }
            Op::Mean(a) => {
                let s = self.shape(*a).to_vec();
                let n = s.iter().product::<usize>().max(1) as f64;
                let gv = gd[0] / n;
                self.accumulate(adj, *a, || Tensor::filled(&s, gv));
            }
        }
    }

    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        adj: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let gd = g.data();
        self.accumulate(adj, b, || {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    *d += gd[(ni * cout + co) * oh * ow..][..oh * ow].iter().sum::<f64>();
                }
            }
            Tensor::from_vec(&[cout], db).unwrap()
        });
        self.accumulate(adj, w, || {
            let mut dw = vec![0.0; wv.len()];
            let xd = xv.data();
            for ni in 0..n {
                for co in 0..cout {
                    let gb = (ni * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let xb = (ni * cin + ci) * h * wd;
                        let wb = (co * cin + ci) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let grow = &gd[gb + oy * ow..][..ow];
                                    let xrow = &xd[xb + (oy + ky) * wd + kx..][..ow];
                                    acc += dot(grow, xrow);
                                }
                                dw[wb + ky * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(sw, dw).unwrap()
        });
        self.accumulate(adj, x, || {
            let mut dx = vec![0.0; xv.len()];
            let wdat = wv.data();
            for ni in 0..n {
                for co in 0..cout {
                    let gb = (ni * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let xb = (ni * cin + ci) * h * wd;
                        let wb = (co * cin + ci) * kh * kw;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gd[gb + oy * ow + ox];
                                for ky in 0..kh {
                                    let drow = &mut dx[xb + (oy + ky) * wd + ox..][..kw];
                                    let wr = &wdat[wb + ky * kw..][..kw];
                                    for (d, wv) in drow.iter_mut().zip(wr) {
                                        *d += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(sx, dx).unwrap()
        });
    }

    fn conv1d_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        adj: &mut [Option<Tensor>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let olen = (len - k) / stride + 1;
        let gd = g.data();
        self.accumulate(adj, b, || {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    *d += gd[(ni * cout + co) * olen..][..olen].iter().sum::<f64>();
                }
            }
            Tensor::from_vec(&[cout], db).unwrap()
        });
        self.accumulate(adj, w, || {
            let mut dw = vec![0.0; wv.len()];
            let xd = xv.data();
            for ni in 0..n {
                for co in 0..cout {
                    let grow = &gd[(ni * cout + co) * olen..][..olen];
                    for ci in 0..cin {
                        let xrow = &xd[(ni * cin + ci) * len..][..len];
                        let wrow = &mut dw[(co * cin + ci) * k..][..k];
                        for (o, &gv) in grow.iter().enumerate() {
                            let xs = &xrow[o * stride..][..k];
                            for (d, xv) in wrow.iter_mut().zip(xs) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(sw, dw).unwrap()
        });
        self.accumulate(adj, x, || {
            let mut dx = vec![0.0; xv.len()];
            let wdat = wv.data();
            for ni in 0..n {
                for co in 0..cout {
                    let grow = &gd[(ni * cout + co) * olen..][..olen];
                    for ci in 0..cin {
                        let wrow = &wdat[(co * cin + ci) * k..][..k];
                        let drow = &mut dx[(ni * cin + ci) * len..][..len];
                        for (o, &gv) in grow.iter().enumerate() {
                            for (d, wv) in drow[o * stride..][..k].iter_mut().zip(wrow) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(sx, dx).unwrap()
        });
    }

    fn similarity_backward(
        &self,
        g: &Tensor,
        out: NodeId,
        a: NodeId,
        b: NodeId,
        adj: &mut [Option<Tensor>],
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let s = av.shape().to_vec();
        let (n, v, f) = (s[0], s[1], s[2]);
        let xi = self.value(out).data();
        let gd = g.data();
        // dΞ/d(a_i) = −Ξ² (a_i − b_j)/‖a_i − b_j‖; zero at coincident rows.
        let mut da = vec![0.0; av.len()];
        let mut db = vec![0.0; bv.len()];
        for ni in 0..n {
            for i in 0..v {
                let ar = &av.data()[(ni * v + i) * f..][..f];
                for j in 0..v {
                    let br = &bv.data()[(ni * v + j) * f..][..f];
                    let x = xi[(ni * v + i) * v + j];
                    let dist = 1.0 / x - 1.0;
                    if dist <= 0.0 {
                        continue;
                    }
                    let coef = -gd[(ni * v + i) * v + j] * x * x / dist;
                    for c in 0..f {
                        let diff = ar[c] - br[c];
                        da[(ni * v + i) * f + c] += coef * diff;
                        db[(ni * v + j) * f + c] -= coef * diff;
                    }
                }
            }
        }
        self.accumulate(adj, a, || Tensor::from_vec(&s, da).unwrap());
        self.accumulate(adj, b, || Tensor::from_vec(&s, db).unwrap());
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
}

fn map1(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

/// `x` for `x ≥ 0`, `0.3·x` otherwise.
pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

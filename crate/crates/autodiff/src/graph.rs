//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every input id is smaller than the
//! id of its consumer and the tape order is already a topological order.

use crate::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, exported so diagnostics can enumerate them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv3d,
    Relu,
    UpsampleNearest,
    ConcatChannels,
    SoftmaxChannels,
    Add,
    Mul,
    Div,
    Scale,
    AddScalar,
    Sum,
    Mean,
    SumPerChannel,
    Log,
    ClampMin,
    MomentInject,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv3d => "conv3d",
            OpKind::Relu => "relu",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumPerChannel => "sum_per_channel",
            OpKind::Log => "log",
            OpKind::ClampMin => "clamp_min",
            OpKind::MomentInject => "moment_inject",
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    Relu(NodeId),
    UpsampleNearest(NodeId, usize),
    ConcatChannels(NodeId, NodeId),
    SoftmaxChannels(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    SumPerChannel(NodeId),
    Log(NodeId),
    ClampMin(NodeId, T),
    MomentInject {
        input: NodeId,
        /// Target per-channel scale (standard deviation to transfer).
        gain: Vec<T>,
        mean: Vec<T>,
        sigma: Vec<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::Relu(_) => OpKind::Relu,
            Op::UpsampleNearest(..) => OpKind::UpsampleNearest,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::SoftmaxChannels(_) => OpKind::SoftmaxChannels,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumPerChannel(_) => OpKind::SumPerChannel,
            Op::Log(_) => OpKind::Log,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::MomentInject { .. } => OpKind::MomentInject,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    tag: Option<String>,
}

/// Differentiation tape. One graph per forward pass; single-threaded.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient populated by the last `backward`, if the node was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Marks `id` as a named capture point.
    pub fn tap(&mut self, id: NodeId, name: &str) {
        self.nodes[id.0].tag = Some(name.to_string());
    }

    pub fn tagged(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.tag.as_deref() == Some(name))
            .map(NodeId)
    }

    pub fn tag(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].tag.as_deref()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
            tag: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (parameters, attacked features).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            grad: None,
            tag: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf treated as data.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            grad: None,
            tag: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<NodeId> {
        let (value, geom) = conv3d_forward(
            &self.node(input)?.value,
            &self.node(weight)?.value,
            &self.node(bias)?.value,
            stride,
            padding,
        )?;
        Ok(self.push(
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            value,
            &[input, weight, bias],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.node(input)?.value.map(|v| v.max(T::zero()));
        Ok(self.push(Op::Relu(input), value, &[input]))
    }

    /// Nearest-neighbour replication by `factor` along every spatial axis of a 5-D tensor.
    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let s = x.shape();
        if s.len() != 5 || factor == 0 {
            return Err(TensorError::InvalidShape {
                shape: s.to_vec(),
                reason: "upsample expects (B, C, Z, Y, X) and factor >= 1".into(),
            });
        }
        let (bc, z, y, xw) = (s[0] * s[1], s[2], s[3], s[4]);
        let (oz, oy, ox) = (z * factor, y * factor, xw * factor);
        let mut out = Vec::with_capacity(bc * oz * oy * ox);
        for plane in x.data().chunks_exact(z * y * xw) {
            for iz in 0..oz {
                for iy in 0..oy {
                    let row = &plane[((iz / factor) * y + iy / factor) * xw..][..xw];
                    for &v in row {
                        for _ in 0..factor {
                            out.push(v);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], oz, oy, ox], out)?;
        Ok(self.push(Op::UpsampleNearest(input, factor), value, &[input]))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, ca, spatial) = va.bcs()?;
        let cb = sb[1];
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for bi in 0..batch {
            out.extend_from_slice(&va.data()[bi * ca * spatial..(bi + 1) * ca * spatial]);
            out.extend_from_slice(&vb.data()[bi * cb * spatial..(bi + 1) * cb * spatial]);
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(Op::ConcatChannels(a, b), value, &[a, b]))
    }

    /// Softmax over axis 1 independently at every (batch, voxel).
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let (batch, c, spatial) = x.bcs()?;
        let mut out = x.clone();
        let d = out.data_mut();
        for bi in 0..batch {
            let item = &mut d[bi * c * spatial..(bi + 1) * c * spatial];
            for s in 0..spatial {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(item[ch * spatial + s]);
                }
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (item[ch * spatial + s] - m).exp();
                    item[ch * spatial + s] = e;
                    total += e;
                }
                for ch in 0..c {
                    item[ch * spatial + s] = item[ch * spatial + s] / total;
                }
            }
        }
        Ok(self.push(Op::SoftmaxChannels(input), out, &[input]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self
            .node(a)?
            .value
            .zip_map(&self.node(b)?.value, "add", |p, q| p + q)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self
            .node(a)?
            .value
            .zip_map(&self.node(b)?.value, "mul", |p, q| p * q)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self
            .node(a)?
            .value
            .zip_map(&self.node(b)?.value, "div", |p, q| p / q)?;
        Ok(self.push(Op::Div(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId> {
        let value = self.node(input)?.value.map(|v| v * factor);
        Ok(self.push(Op::Scale(input, factor), value, &[input]))
    }

    pub fn add_scalar(&mut self, input: NodeId, offset: T) -> Result<NodeId> {
        let value = self.node(input)?.value.map(|v| v + offset);
        Ok(self.push(Op::AddScalar(input, offset), value, &[input]))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.node(input)?.value.sum());
        Ok(self.push(Op::Sum(input), value, &[input]))
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let value = Tensor::scalar(x.sum() / T::lit(x.len() as f64));
        Ok(self.push(Op::Mean(input), value, &[input]))
    }

    /// Reduces a `(B, C, ...)` tensor to per-channel sums of shape `(C)`.
    pub fn sum_per_channel(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let (batch, c, spatial) = x.bcs()?;
        let mut out = vec![T::zero(); c];
        for bi in 0..batch {
            for (ch, acc) in out.iter_mut().enumerate() {
                let start = (bi * c + ch) * spatial;
                *acc += x.data()[start..start + spatial].iter().copied().sum::<T>();
            }
        }
        let value = Tensor::from_vec(&[c], out)?;
        Ok(self.push(Op::SumPerChannel(input), value, &[input]))
    }

    pub fn log(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.node(input)?.value.map(|v| v.ln());
        Ok(self.push(Op::Log(input), value, &[input]))
    }

    /// `max(v, floor)`; the gradient passes only where `v > floor`.
    pub fn clamp_min(&mut self, input: NodeId, floor: T) -> Result<NodeId> {
        let value = self.node(input)?.value.map(|v| v.max(floor));
        Ok(self.push(Op::ClampMin(input, floor), value, &[input]))
    }

    /// Per-channel re-normalization `gain_c * (x - mean_c(x)) / (std_c(x) + eps) + offset_c`.
    ///
    /// Moments of `x` are taken over batch and spatial positions and participate in the
    /// gradient; `gain` and `offset` are constants.
    pub fn moment_inject(
        &mut self,
        input: NodeId,
        gain: &[T],
        offset: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let x = &self.node(input)?.value;
        let (batch, c, spatial) = x.bcs()?;
        if gain.len() != c || offset.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "moment_inject",
                lhs: x.shape().to_vec(),
                rhs: vec![gain.len(), offset.len()],
            });
        }
        let (mean, sigma) = channel_moments(x);
        let mut out = x.clone();
        let d = out.data_mut();
        for bi in 0..batch {
            for ch in 0..c {
                let start = (bi * c + ch) * spatial;
                let inv = T::one() / (sigma[ch] + eps);
                for v in &mut d[start..start + spatial] {
                    *v = gain[ch] * (*v - mean[ch]) * inv + offset[ch];
                }
            }
        }
        Ok(self.push(
            Op::MomentInject {
                input,
                gain: gain.to_vec(),
                mean,
                sigma,
                eps,
            },
            out,
            &[input],
        ))
    }

    /// Populates gradients of every node reachable from `loss`, replacing earlier gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_accumulate(loss)
    }

    /// Like [`Graph::backward`] but adds into gradients left by previous calls.
    pub fn backward_accumulate(&mut self, loss: NodeId) -> Result<()> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(root.value.map(|_| T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id];
        let val = |n: NodeId| &self.nodes[n.0].value;
        let needs = |n: NodeId| self.nodes[n.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = conv3d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g,
                    [needs(*input), needs(*weight), needs(*bias)],
                );
                let mut v = Vec::new();
                if let Some(t) = grads.input {
                    v.push((*input, t));
                }
                if let Some(t) = grads.weight {
                    v.push((*weight, t));
                }
                if let Some(t) = grads.bias {
                    v.push((*bias, t));
                }
                v
            }
            Op::Relu(a) => {
                let d = val(*a).zip_map(
                    g,
                    "relu",
                    |x, gy| if x > T::zero() { gy } else { T::zero() },
                )?;
                vec![(*a, d)]
            }
            Op::UpsampleNearest(a, factor) => {
                let s = val(*a).shape().to_vec();
                let (z, y, x) = (s[2], s[3], s[4]);
                let (oy, ox) = (y * factor, x * factor);
                let mut d = vec![T::zero(); s.iter().product()];
                let out_plane = z * factor * oy * ox;
                for (p, plane) in d.chunks_exact_mut(z * y * x).enumerate() {
                    let src = &g.data()[p * out_plane..(p + 1) * out_plane];
                    for iz in 0..z * factor {
                        for iy in 0..oy {
                            let row = &src[(iz * oy + iy) * ox..][..ox];
                            let dst = &mut plane[((iz / factor) * y + iy / factor) * x..][..x];
                            for (ix, &v) in row.iter().enumerate() {
                                dst[ix / factor] += v;
                            }
                        }
                    }
                }
                vec![(*a, Tensor::from_vec(&s, d)?)]
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                let (batch, ca, spatial) = val(*a).bcs()?;
                let cb = sb[1];
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for bi in 0..batch {
                    let base = bi * (ca + cb) * spatial;
                    da.extend_from_slice(&g.data()[base..base + ca * spatial]);
                    db.extend_from_slice(
                        &g.data()[base + ca * spatial..base + (ca + cb) * spatial],
                    );
                }
                vec![
                    (*a, Tensor::from_vec(&sa, da)?),
                    (*b, Tensor::from_vec(&sb, db)?),
                ]
            }
            Op::SoftmaxChannels(a) => {
                let y = &node.value;
                let (batch, c, spatial) = y.bcs()?;
                let mut d = g.clone();
                let dd = d.data_mut();
                for bi in 0..batch {
                    let base = bi * c * spatial;
                    for s in 0..spatial {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let k = base + ch * spatial + s;
                            dot += y.data()[k] * g.data()[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * spatial + s;
                            dd[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let mut v = Vec::new();
                if needs(*a) {
                    v.push((*a, g.zip_map(val(*b), "mul", |gy, q| gy * q)?));
                }
                if needs(*b) {
                    v.push((*b, g.zip_map(val(*a), "mul", |gy, p| gy * p)?));
                }
                v
            }
            Op::Div(a, b) => {
                let mut v = Vec::new();
                if needs(*a) {
                    v.push((*a, g.zip_map(val(*b), "div", |gy, q| gy / q)?));
                }
                if needs(*b) {
                    // d(p/q)/dq = -(p/q)/q
                    let ratio_over_q = node.value.zip_map(val(*b), "div", |r, q| r / q)?;
                    v.push((*b, g.zip_map(&ratio_over_q, "div", |gy, r| -gy * r)?));
                }
                v
            }
            Op::Scale(a, f) => vec![(*a, g.map(|gy| gy * *f))],
            Op::AddScalar(a, _) => vec![(*a, g.clone())],
            Op::Sum(a) => {
                let gy = g.item();
                vec![(*a, val(*a).map(|_| gy))]
            }
            Op::Mean(a) => {
                let gy = g.item() / T::lit(val(*a).len() as f64);
                vec![(*a, val(*a).map(|_| gy))]
            }
            Op::SumPerChannel(a) => {
                let x = val(*a);
                let (batch, c, spatial) = x.bcs()?;
                let mut d = x.zeros_like();
                for (k, slot) in d.data_mut().iter_mut().enumerate() {
                    let ch = (k / spatial) % c;
                    *slot = g.data()[ch];
                }
                debug_assert_eq!(d.len(), batch * c * spatial);
                vec![(*a, d)]
            }
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), "log", |gy, x| gy / x)?)],
            Op::ClampMin(a, floor) => {
                let f = *floor;
                let d =
                    val(*a).zip_map(g, "clamp_min", |x, gy| if x > f { gy } else { T::zero() })?;
                vec![(*a, d)]
            }
            Op::MomentInject {
                input,
                gain,
                mean,
                sigma,
                eps,
            } => vec![(
                *input,
                moment_inject_vjp(val(*input), g, gain, mean, sigma, *eps)?,
            )],
        };
        Ok(out)
    }
}

/// Per-channel mean and population standard deviation over batch and spatial axes.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (batch, c, spatial) = x.bcs().expect("tensor with channel axis");
    let n = T::lit((batch * spatial) as f64);
    let mut mean = vec![T::zero(); c];
    for bi in 0..batch {
        for (ch, m) in mean.iter_mut().enumerate() {
            let start = (bi * c + ch) * spatial;
            *m += x.data()[start..start + spatial].iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); c];
    for bi in 0..batch {
        for ch in 0..c {
            let start = (bi * c + ch) * spatial;
            var[ch] += x.data()[start..start + spatial]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<T>();
        }
    }
    let sigma = var.into_iter().map(|v| (v / n).sqrt()).collect();
    (mean, sigma)
}

fn moment_inject_vjp<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    gain: &[T],
    mean: &[T],
    sigma: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (batch, c, spatial) = x.bcs()?;
    let n = T::lit((batch * spatial) as f64);
    let mut d = x.zeros_like();
    for ch in 0..c {
        let s = sigma[ch] + eps;
        // gh = dL/dxhat, accumulate mean(gh) and sum(gh * u)
        let (mut sum_gh, mut sum_ghu) = (T::zero(), T::zero());
        for bi in 0..batch {
            let start = (bi * c + ch) * spatial;
            for k in start..start + spatial {
                let gh = g.data()[k] * gain[ch];
                sum_gh += gh;
                sum_ghu += gh * (x.data()[k] - mean[ch]);
            }
        }
        let mean_gh = sum_gh / n;
        let coupling = if sigma[ch] > T::zero() {
            sum_ghu / (n * sigma[ch] * s * s)
        } else {
            T::zero()
        };
        for bi in 0..batch {
            let start = (bi * c + ch) * spatial;
            for k in start..start + spatial {
                let gh = g.data()[k] * gain[ch];
                let u = x.data()[k] - mean[ch];
                d.data_mut()[k] = (gh - mean_gh) / s - u * coupling;
            }
        }
    }
    Ok(d)
}

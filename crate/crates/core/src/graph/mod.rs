//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records every operation of one forward pass; episodes vary in
//! size, so a fresh tape is built per pass instead of reusing a static graph.
//! Nodes are stored in insertion order, which is a topological order by
//! construction: every node's inputs precede it. One [`Graph::backward`] call
//! walks the tape in reverse and populates the gradient of every
//! requires-grad leaf reachable from the loss, summing contributions when a
//! tensor feeds several consumers.
//!
//! Repeated `backward` calls without re-recording accumulate gradients on the
//! leaves; the training loop rebuilds the tape each iteration so this only
//! matters for tests that call it deliberately.
//!
//! A graph and its tensors are confined to one thread. Parameters enter the
//! tape as named leaves (see [`Graph::leaf_param`]); after `backward` the
//! trainer moves leaf gradients back onto the owning [`crate::param::Param`].

mod conv;
mod elementwise;
mod gram;
mod norm;
mod pool;
mod structural;

pub use norm::BnStats;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Handle to a value recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) u32);

impl VarId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Constant,
    // elementwise / scalar
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    AddScalar { x: VarId },
    MulScalar { x: VarId, c: S },
    ScaleNode { x: VarId, s: VarId },
    OffsetNode { x: VarId, s: VarId },
    Neg { x: VarId },
    Exp { x: VarId },
    LogGuarded { x: VarId },
    Relu { x: VarId },
    Sigmoid { x: VarId },
    Softmax { x: VarId, axis: usize },
    // reductions
    Sum { x: VarId },
    FrobNorm { x: VarId },
    // structural
    Reshape { x: VarId },
    Transpose2 { x: VarId },
    Concat { axis: usize, inputs: Vec<VarId> },
    SliceAxis0 { x: VarId, start: usize },
    AggregateShots { x: VarId, shots: usize, mean: bool },
    PairConcat { support: VarId, query: VarId },
    BroadcastPairConcat { global: VarId, query: VarId },
    ChannelsToRows { x: VarId },
    // dense linear algebra
    Matmul { a: VarId, b: VarId },
    Linear { x: VarId, w: VarId, b: VarId },
    // nn
    Conv2d { x: VarId, w: VarId, b: VarId, dims: conv::ConvDims, col: Vec<S> },
    MaxPool2 { x: VarId, arg: Vec<u32> },
    GlobalMaxPool { x: VarId, arg: Vec<u32> },
    GlobalAvgPool { x: VarId },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, mean: Vec<S>, invstd: Vec<S>, train: bool },
    // streams
    NormalizeMaps { x: VarId, inv_sigma: Vec<S>, radius: Vec<S>, inv_radius: Vec<S> },
    Gram { x: VarId, channel: bool },
    PairFrobDist { a: VarId, b: VarId },
}

pub(crate) struct Node<S> {
    pub value: Tensor<S>,
    pub op: Op<S>,
}

pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    params: HashMap<String, VarId>,
    /// Count of degenerate (zero-variance) feature maps seen by
    /// `normalize_maps`; a constant map normalizes to all zeros.
    degenerate_norms: u32,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), degenerate_norms: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn degenerate_norms(&self) -> u32 {
        self.degenerate_norms
    }

    pub(crate) fn bump_degenerate_norms(&mut self) {
        self.degenerate_norms += 1;
    }

    /// Record a tensor that does not need gradients (inputs, targets).
    pub fn constant(&mut self, t: Tensor<S>) -> VarId {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Constant)
    }

    /// Record a gradient-carrying leaf.
    pub fn leaf(&mut self, t: Tensor<S>) -> VarId {
        let mut t = t;
        t.set_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Record a parameter as a leaf, reusing the node if the same parameter
    /// name was already bound in this pass.
    pub fn leaf_param(&mut self, p: &crate::param::Param<S>) -> VarId {
        if let Some(&id) = self.params.get(p.name()) {
            return id;
        }
        let id = self.leaf(p.tensor.clone());
        self.params.insert(p.name().to_string(), id);
        id
    }

    pub fn param_binding(&self, name: &str) -> Option<VarId> {
        self.params.get(name).copied()
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.idx()].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[S]> {
        self.nodes[id.idx()].value.grad()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>) -> VarId {
        let id = VarId(u32::try_from(self.nodes.len()).expect("tape overflow"));
        self.nodes.push(Node { value, op });
        id
    }

    pub(crate) fn push_dependent(&mut self, mut value: Tensor<S>, op: Op<S>, inputs: &[VarId]) -> VarId {
        let rg = inputs.iter().any(|i| self.nodes[i.idx()].value.requires_grad());
        value.set_requires_grad(rg);
        self.push(value, op)
    }

    pub(crate) fn data_of(&self, id: VarId) -> &[S] {
        self.nodes[id.idx()].value.data()
    }

    pub(crate) fn shape_of(&self, id: VarId) -> &[usize] {
        self.nodes[id.idx()].value.shape()
    }

    fn wants_grad(&self, id: VarId) -> bool {
        self.nodes[id.idx()].value.requires_grad()
    }

    /// Reverse pass from a scalar loss. Every requires-grad leaf reachable
    /// from `loss` receives dLoss/dLeaf.
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(
            self.nodes[loss.idx()].value.numel(),
            1,
            "backward: loss must be a scalar tensor (contract error)"
        );
        if !self.wants_grad(loss) {
            return; // nothing trainable feeds the loss
        }
        self.nodes[loss.idx()].value.accumulate_grad(&[S::one()]);

        for i in (0..=loss.idx()).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue; // leaf grads persist and accumulate across calls
            }
            let Some(gout) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contribs = self.local_grads(i, &gout);
            for (id, delta) in &contribs {
                self.nodes[id.idx()].value.accumulate_grad(delta);
            }
            // intermediate grads are transient: dropping them keeps repeated
            // backward calls from double-counting through stale values
        }
    }

    /// Gradient contributions of node `i` to each of its requires-grad inputs.
    fn local_grads(&self, i: usize, gout: &[S]) -> Vec<(VarId, Vec<S>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(VarId, Vec<S>)> = Vec::new();
        let mut emit = |id: VarId, v: Vec<S>| out.push((id, v));
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    emit(*a, gout.to_vec());
                }
                if self.wants_grad(*b) {
                    emit(*b, gout.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(*a) {
                    emit(*a, gout.to_vec());
                }
                if self.wants_grad(*b) {
                    emit(*b, gout.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    let bd = self.data_of(*b);
                    emit(*a, gout.iter().zip(bd).map(|(&g, &v)| g * v).collect());
                }
                if self.wants_grad(*b) {
                    let ad = self.data_of(*a);
                    emit(*b, gout.iter().zip(ad).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::AddScalar { x } => {
                if self.wants_grad(*x) {
                    emit(*x, gout.to_vec());
                }
            }
            Op::MulScalar { x, c } => {
                if self.wants_grad(*x) {
                    emit(*x, gout.iter().map(|&g| g * *c).collect());
                }
            }
            Op::ScaleNode { x, s } => {
                let sv = self.data_of(*s)[0];
                if self.wants_grad(*x) {
                    emit(*x, gout.iter().map(|&g| g * sv).collect());
                }
                if self.wants_grad(*s) {
                    let xd = self.data_of(*x);
                    let mut acc = S::zero();
                    for (g, v) in gout.iter().zip(xd) {
                        acc += *g * *v;
                    }
                    emit(*s, vec![acc]);
                }
            }
            Op::OffsetNode { x, s } => {
                if self.wants_grad(*x) {
                    emit(*x, gout.to_vec());
                }
                if self.wants_grad(*s) {
                    let mut acc = S::zero();
                    for g in gout {
                        acc += *g;
                    }
                    emit(*s, vec![acc]);
                }
            }
            Op::Neg { x } => {
                if self.wants_grad(*x) {
                    emit(*x, gout.iter().map(|&g| -g).collect());
                }
            }
            Op::Exp { x } => {
                if self.wants_grad(*x) {
                    let y = node.value.data();
                    emit(*x, gout.iter().zip(y).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::LogGuarded { x } => {
                if self.wants_grad(*x) {
                    let xd = self.data_of(*x);
                    let eps = elementwise::log_eps::<S>();
                    emit(
                        *x,
                        gout.iter().zip(xd).map(|(&g, &v)| g / v.max(eps)).collect(),
                    );
                }
            }
            Op::Relu { x } => {
                if self.wants_grad(*x) {
                    let y = node.value.data();
                    emit(
                        *x,
                        gout.iter()
                            .zip(y)
                            .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                            .collect(),
                    );
                }
            }
            Op::Sigmoid { x } => {
                if self.wants_grad(*x) {
                    let y = node.value.data();
                    emit(
                        *x,
                        gout.iter()
                            .zip(y)
                            .map(|(&g, &v)| g * v * (S::one() - v))
                            .collect(),
                    );
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants_grad(*x) {
                    emit(*x, elementwise::softmax_backward(node.value.shape(), node.value.data(), gout, *axis));
                }
            }
            Op::Sum { x } => {
                if self.wants_grad(*x) {
                    let n = self.nodes[x.idx()].value.numel();
                    emit(*x, vec![gout[0]; n]);
                }
            }
            Op::FrobNorm { x } => {
                if self.wants_grad(*x) {
                    let xd = self.data_of(*x);
                    let norm = node.value.data()[0];
                    if norm == S::zero() {
                        // subgradient 0 at the zero tensor
                        emit(*x, vec![S::zero(); xd.len()]);
                    } else {
                        let f = gout[0] / norm;
                        emit(*x, xd.iter().map(|&v| v * f).collect());
                    }
                }
            }
            Op::Reshape { x } => {
                if self.wants_grad(*x) {
                    emit(*x, gout.to_vec());
                }
            }
            Op::Transpose2 { x } => {
                if self.wants_grad(*x) {
                    let sh = self.shape_of(*x);
                    let (r, c) = (sh[0], sh[1]);
                    let mut gx = vec![S::zero(); r * c];
                    // gout has shape [c, r]
                    crate::gemm::transpose(gout, c, r, &mut gx);
                    emit(*x, gx);
                }
            }
            Op::Concat { axis, inputs } => {
                structural::concat_backward(self, *axis, inputs, node.value.shape(), gout, &mut emit);
            }
            Op::SliceAxis0 { x, start } => {
                if self.wants_grad(*x) {
                    let xsh = self.shape_of(*x);
                    let inner: usize = xsh[1..].iter().product();
                    let mut gx = vec![S::zero(); xsh.iter().product()];
                    gx[*start * inner..*start * inner + gout.len()].copy_from_slice(gout);
                    emit(*x, gx);
                }
            }
            Op::AggregateShots { x, shots, mean } => {
                if self.wants_grad(*x) {
                    emit(*x, structural::aggregate_backward(self.shape_of(*x), gout, *shots, *mean));
                }
            }
            Op::PairConcat { support, query } => {
                structural::pair_concat_backward(self, *support, *query, gout, &mut emit);
            }
            Op::BroadcastPairConcat { global, query } => {
                structural::broadcast_pair_concat_backward(self, *global, *query, gout, &mut emit);
            }
            Op::ChannelsToRows { x } => {
                if self.wants_grad(*x) {
                    emit(*x, structural::channels_to_rows_backward(self.shape_of(*x), gout));
                }
            }
            Op::Matmul { a, b } => {
                elementwise::matmul_backward(self, *a, *b, gout, &mut emit);
            }
            Op::Linear { x, w, b } => {
                elementwise::linear_backward(self, *x, *w, *b, gout, &mut emit);
            }
            Op::Conv2d { x, w, b, dims, col } => {
                conv::conv2d_backward(self, *x, *w, *b, dims, col, gout, &mut emit);
            }
            Op::MaxPool2 { x, arg } => {
                if self.wants_grad(*x) {
                    let n = self.nodes[x.idx()].value.numel();
                    let mut gx = vec![S::zero(); n];
                    for (g, &a) in gout.iter().zip(arg) {
                        gx[a as usize] += *g;
                    }
                    emit(*x, gx);
                }
            }
            Op::GlobalMaxPool { x, arg } => {
                if self.wants_grad(*x) {
                    let n = self.nodes[x.idx()].value.numel();
                    let mut gx = vec![S::zero(); n];
                    for (g, &a) in gout.iter().zip(arg) {
                        gx[a as usize] += *g;
                    }
                    emit(*x, gx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.wants_grad(*x) {
                    let xsh = self.shape_of(*x);
                    let hw = xsh[2] * xsh[3];
                    let inv = S::one() / S::from_usize(hw);
                    let mut gx = vec![S::zero(); xsh.iter().product()];
                    for (nc, g) in gout.iter().enumerate() {
                        let base = nc * hw;
                        let gv = *g * inv;
                        for v in &mut gx[base..base + hw] {
                            *v = gv;
                        }
                    }
                    emit(*x, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, train } => {
                norm::batchnorm_backward(self, *x, *gamma, *beta, mean, invstd, *train, gout, &mut emit);
            }
            Op::NormalizeMaps { x, inv_sigma, radius, inv_radius } => {
                if self.wants_grad(*x) {
                    emit(
                        *x,
                        norm::normalize_maps_backward(
                            self.shape_of(*x),
                            node.value.data(),
                            inv_sigma,
                            radius,
                            inv_radius,
                            gout,
                        ),
                    );
                }
            }
            Op::Gram { x, channel } => {
                if self.wants_grad(*x) {
                    emit(*x, gram::gram_backward(self.shape_of(*x), self.data_of(*x), gout, *channel));
                }
            }
            Op::PairFrobDist { a, b } => {
                gram::pair_frob_dist_backward(self, *a, *b, node.value.data(), gout, &mut emit);
            }
        }
        out
    }
}

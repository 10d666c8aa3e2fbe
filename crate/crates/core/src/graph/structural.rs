//! Shape-shuffling ops: concat, slicing, shot aggregation and the pairwise
//! concatenations used by the metric streams.

use super::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(&mut self, axis: usize, inputs: &[VarId]) -> VarId {
        assert!(!inputs.is_empty(), "concat: needs at least one input");
        let first = self.shape_of(inputs[0]).to_vec();
        assert!(axis < first.len(), "concat: axis {axis} out of range");
        let mut axis_total = 0usize;
        for &id in inputs {
            let sh = self.shape_of(id);
            assert_eq!(sh.len(), first.len(), "concat: rank mismatch (dimension error)");
            for (d, (a, b)) in sh.iter().zip(&first).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat: extent mismatch on axis {d} (dimension error)");
                }
            }
            axis_total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::zero(); shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0usize;
        for &id in inputs {
            let len = self.shape_of(id)[axis] * inner;
            let data = self.data_of(id);
            for o in 0..outer {
                out[o * row_out + offset..o * row_out + offset + len]
                    .copy_from_slice(&data[o * len..(o + 1) * len]);
            }
            offset += len;
        }
        let t = Tensor::from_vec(&shape, out);
        self.push_dependent(t, Op::Concat { axis, inputs: inputs.to_vec() }, inputs)
    }

    /// Contiguous slice of `len` entries along the first axis.
    pub fn slice_axis0(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let sh = self.shape_of(x).to_vec();
        assert!(start + len <= sh[0], "slice_axis0: out of range");
        let inner: usize = sh[1..].iter().product();
        let data = self.data_of(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = sh;
        shape[0] = len;
        let t = Tensor::from_vec(&shape, data);
        self.push_dependent(t, Op::SliceAxis0 { x, start }, &[x])
    }

    /// Combine the K shot feature maps of each class: [C*K, ...] -> [C, ...],
    /// summing (or averaging) over each group of K consecutive entries.
    /// K = 1 returns the input values unchanged.
    pub fn aggregate_shots(&mut self, x: VarId, shots: usize, mean: bool) -> VarId {
        assert!(shots >= 1, "aggregate_shots: empty class (K must be >= 1)");
        let sh = self.shape_of(x).to_vec();
        assert_eq!(sh[0] % shots, 0, "aggregate_shots: leading axis not divisible by K");
        let groups = sh[0] / shots;
        let inner: usize = sh[1..].iter().product();
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); groups * inner];
        for gi in 0..groups {
            let dst = &mut out[gi * inner..][..inner];
            for k in 0..shots {
                let src = &xd[(gi * shots + k) * inner..][..inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += *v;
                }
            }
            if mean && shots > 1 {
                let inv = S::one() / S::from_usize(shots);
                for d in dst.iter_mut() {
                    *d = *d * inv;
                }
            }
        }
        let mut shape = sh;
        shape[0] = groups;
        let t = Tensor::from_vec(&shape, out);
        self.push_dependent(t, Op::AggregateShots { x, shots, mean }, &[x])
    }

    /// Channel-concatenate every (class, query) pair:
    /// support [C,F,h,w] x query [n,F,h,w] -> [n*C, 2F, h, w], support
    /// channels first, pair index = query * C + class.
    pub fn pair_concat(&mut self, support: VarId, query: VarId) -> VarId {
        let ss = self.shape_of(support).to_vec();
        let qs = self.shape_of(query).to_vec();
        assert!(ss.len() == 4 && qs.len() == 4, "pair_concat: inputs must be 4-d");
        assert_eq!(ss[1..], qs[1..], "pair_concat: feature shapes must match (dimension error)");
        let (c, f, hw) = (ss[0], ss[1], ss[2] * ss[3]);
        let n = qs[0];
        let plane = f * hw;
        let sd = self.data_of(support);
        let qd = self.data_of(query);
        let mut out = vec![S::zero(); n * c * 2 * plane];
        for j in 0..n {
            for ci in 0..c {
                let base = (j * c + ci) * 2 * plane;
                out[base..base + plane].copy_from_slice(&sd[ci * plane..(ci + 1) * plane]);
                out[base + plane..base + 2 * plane].copy_from_slice(&qd[j * plane..(j + 1) * plane]);
            }
        }
        let t = Tensor::from_vec(&[n * c, 2 * f, ss[2], ss[3]], out);
        self.push_dependent(t, Op::PairConcat { support, query }, &[support, query])
    }

    /// Concatenate each query local feature with a class-global descriptor:
    /// global [C,F] x query [n,F,h,w] -> [n*C, 2F, h, w], query-local
    /// channels first, the global vector broadcast over positions after them.
    pub fn broadcast_pair_concat(&mut self, global: VarId, query: VarId) -> VarId {
        let gs = self.shape_of(global).to_vec();
        let qs = self.shape_of(query).to_vec();
        assert_eq!(gs.len(), 2, "broadcast_pair_concat: global must be [C,F]");
        assert_eq!(qs.len(), 4, "broadcast_pair_concat: query must be [n,F,h,w]");
        assert_eq!(gs[1], qs[1], "broadcast_pair_concat: feature dims must match");
        let (c, f) = (gs[0], gs[1]);
        let (n, h, w) = (qs[0], qs[2], qs[3]);
        let hw = h * w;
        let plane = f * hw;
        let gd = self.data_of(global);
        let qd = self.data_of(query);
        let mut out = vec![S::zero(); n * c * 2 * plane];
        for j in 0..n {
            for ci in 0..c {
                let base = (j * c + ci) * 2 * plane;
                out[base..base + plane].copy_from_slice(&qd[j * plane..(j + 1) * plane]);
                let dst = &mut out[base + plane..base + 2 * plane];
                for fi in 0..f {
                    let v = gd[ci * f + fi];
                    for p in 0..hw {
                        dst[fi * hw + p] = v;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n * c, 2 * f, h, w], out);
        self.push_dependent(t, Op::BroadcastPairConcat { global, query }, &[global, query])
    }

    /// Flatten spatial positions into rows: [N,C,H,W] -> [N*H*W, C].
    pub fn channels_to_rows(&mut self, x: VarId) -> VarId {
        let sh = self.shape_of(x).to_vec();
        assert_eq!(sh.len(), 4, "channels_to_rows: input must be 4-d");
        let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let src = &xd[(ni * c + ci) * hw..][..hw];
                for p in 0..hw {
                    out[(ni * hw + p) * c + ci] = src[p];
                }
            }
        }
        let t = Tensor::from_vec(&[n * hw, c], out);
        self.push_dependent(t, Op::ChannelsToRows { x }, &[x])
    }
}

pub(crate) fn concat_backward<S: Scalar>(
    g: &Graph<S>,
    axis: usize,
    inputs: &[VarId],
    out_shape: &[usize],
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let row_out = out_shape[axis] * inner;
    let mut offset = 0usize;
    for &id in inputs {
        let len = g.shape_of(id)[axis] * inner;
        if g.value(id).requires_grad() {
            let mut gx = vec![S::zero(); g.value(id).numel()];
            for o in 0..outer {
                gx[o * len..(o + 1) * len]
                    .copy_from_slice(&gout[o * row_out + offset..o * row_out + offset + len]);
            }
            emit(id, gx);
        }
        offset += len;
    }
}

pub(crate) fn aggregate_backward<S: Scalar>(
    in_shape: &[usize],
    gout: &[S],
    shots: usize,
    mean: bool,
) -> Vec<S> {
    let inner: usize = in_shape[1..].iter().product();
    let groups = in_shape[0] / shots;
    let scale = if mean && shots > 1 {
        S::one() / S::from_usize(shots)
    } else {
        S::one()
    };
    let mut gx = vec![S::zero(); in_shape.iter().product()];
    for gi in 0..groups {
        let src = &gout[gi * inner..][..inner];
        for k in 0..shots {
            let dst = &mut gx[(gi * shots + k) * inner..][..inner];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = *v * scale;
            }
        }
    }
    gx
}

pub(crate) fn pair_concat_backward<S: Scalar>(
    g: &Graph<S>,
    support: VarId,
    query: VarId,
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let ss = g.shape_of(support);
    let qs = g.shape_of(query);
    let (c, f, hw) = (ss[0], ss[1], ss[2] * ss[3]);
    let n = qs[0];
    let plane = f * hw;
    if g.value(support).requires_grad() {
        let mut gs = vec![S::zero(); c * plane];
        for j in 0..n {
            for ci in 0..c {
                let base = (j * c + ci) * 2 * plane;
                let dst = &mut gs[ci * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(&gout[base..base + plane]) {
                    *d += *v;
                }
            }
        }
        emit(support, gs);
    }
    if g.value(query).requires_grad() {
        let mut gq = vec![S::zero(); n * plane];
        for j in 0..n {
            for ci in 0..c {
                let base = (j * c + ci) * 2 * plane + plane;
                let dst = &mut gq[j * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(&gout[base..base + plane]) {
                    *d += *v;
                }
            }
        }
        emit(query, gq);
    }
}

pub(crate) fn broadcast_pair_concat_backward<S: Scalar>(
    g: &Graph<S>,
    global: VarId,
    query: VarId,
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let gs = g.shape_of(global);
    let qs = g.shape_of(query);
    let (c, f) = (gs[0], gs[1]);
    let (n, hw) = (qs[0], qs[2] * qs[3]);
    let plane = f * hw;
    if g.value(query).requires_grad() {
        let mut gq = vec![S::zero(); n * plane];
        for j in 0..n {
            for ci in 0..c {
                let base = (j * c + ci) * 2 * plane;
                let dst = &mut gq[j * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(&gout[base..base + plane]) {
                    *d += *v;
                }
            }
        }
        emit(query, gq);
    }
    if g.value(global).requires_grad() {
        let mut gg = vec![S::zero(); c * f];
        for j in 0..n {
            for ci in 0..c {
                let base = (j * c + ci) * 2 * plane + plane;
                for fi in 0..f {
                    let mut acc = S::zero();
                    for p in 0..hw {
                        acc += gout[base + fi * hw + p];
                    }
                    gg[ci * f + fi] += acc;
                }
            }
        }
        emit(global, gg);
    }
}

pub(crate) fn channels_to_rows_backward<S: Scalar>(in_shape: &[usize], gout: &[S]) -> Vec<S> {
    let (n, c, hw) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
    let mut gx = vec![S::zero(); gout.len()];
    for ni in 0..n {
        for ci in 0..c {
            let dst = &mut gx[(ni * c + ci) * hw..][..hw];
            for p in 0..hw {
                dst[p] = gout[(ni * hw + p) * c + ci];
            }
        }
    }
    gx
}

//! Correlation (Gram) matrices of normalized feature maps and the pairwise
//! Frobenius distances between them.

use super::{Graph, Op, VarId};
use crate::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Batched Gram matrices of feature maps [N, C, D].
    ///
    /// `channel = false`: F^T F per sample -> [N, D, D] (spatial relations).
    /// `channel = true`:  F F^T per sample -> [N, C, C] (style relations).
    pub fn gram(&mut self, x: VarId, channel: bool) -> VarId {
        let sh = self.shape_of(x).to_vec();
        assert_eq!(sh.len(), 3, "gram: input must be [N,C,D]");
        let (n, c, d) = (sh[0], sh[1], sh[2]);
        let m = if channel { c } else { d };
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); n * m * m];
        for i in 0..n {
            let f = &xd[i * c * d..][..c * d];
            let dst = &mut out[i * m * m..][..m * m];
            if channel {
                // F F^T: dot products of channel rows
                gemm::gemm_nt(f, f, dst, c, d, c);
            } else {
                // F^T F: rank-1 accumulation over channels
                gemm::gemm_tn(f, f, dst, d, c, d);
            }
        }
        let t = Tensor::from_vec(&[n, m, m], out);
        self.push_dependent(t, Op::Gram { x, channel }, &[x])
    }

    /// Pairwise Frobenius distances between two stacks of equally-shaped
    /// matrices: a [C, M, M] x b [n, M, M] -> [n, C] with
    /// out[j, c] = ||a_c - b_j||_F. Subgradient 0 where the distance is 0.
    pub fn pair_frob_dist(&mut self, a: VarId, b: VarId) -> VarId {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3, "pair_frob_dist: inputs must be 3-d");
        assert_eq!(sa[1..], sb[1..], "pair_frob_dist: matrix shapes must match");
        let (c, n, mm) = (sa[0], sb[0], sa[1] * sa[2]);
        let ad = self.data_of(a);
        let bd = self.data_of(b);
        let mut out = vec![S::zero(); n * c];
        for j in 0..n {
            let bj = &bd[j * mm..][..mm];
            for ci in 0..c {
                let ac = &ad[ci * mm..][..mm];
                let mut acc = S::zero();
                for (x, y) in ac.iter().zip(bj) {
                    let dv = *x - *y;
                    acc += dv * dv;
                }
                out[j * c + ci] = acc.sqrt();
            }
        }
        let t = Tensor::from_vec(&[n, c], out);
        self.push_dependent(t, Op::PairFrobDist { a, b }, &[a, b])
    }
}

pub(crate) fn gram_backward<S: Scalar>(
    in_shape: &[usize],
    x: &[S],
    gout: &[S],
    channel: bool,
) -> Vec<S> {
    let (n, c, d) = (in_shape[0], in_shape[1], in_shape[2]);
    let m = if channel { c } else { d };
    let mut gx = vec![S::zero(); x.len()];
    let mut sym = vec![S::zero(); m * m];
    for i in 0..n {
        let f = &x[i * c * d..][..c * d];
        let go = &gout[i * m * m..][..m * m];
        for r in 0..m {
            for s in 0..m {
                sym[r * m + s] = go[r * m + s] + go[s * m + r];
            }
        }
        let dst = &mut gx[i * c * d..][..c * d];
        if channel {
            // dF = (dG + dG^T) F
            gemm::gemm_nn(&sym, f, dst, c, c, d);
        } else {
            // dF = F (dG + dG^T)
            gemm::gemm_nn(f, &sym, dst, c, d, d);
        }
    }
    gx
}

pub(crate) fn pair_frob_dist_backward<S: Scalar>(
    g: &Graph<S>,
    a: VarId,
    b: VarId,
    dist: &[S],
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let sa = g.shape_of(a);
    let sb = g.shape_of(b);
    let (c, n, mm) = (sa[0], sb[0], sa[1] * sa[2]);
    let ad = g.data_of(a);
    let bd = g.data_of(b);
    let grad_a = g.value(a).requires_grad();
    let grad_b = g.value(b).requires_grad();
    let mut ga = vec![S::zero(); if grad_a { c * mm } else { 0 }];
    let mut gb = vec![S::zero(); if grad_b { n * mm } else { 0 }];
    for j in 0..n {
        let bj = &bd[j * mm..][..mm];
        for ci in 0..c {
            let dv = dist[j * c + ci];
            if dv == S::zero() {
                continue;
            }
            let f = gout[j * c + ci] / dv;
            let ac = &ad[ci * mm..][..mm];
            if grad_a {
                let dst = &mut ga[ci * mm..][..mm];
                for k in 0..mm {
                    dst[k] += f * (ac[k] - bj[k]);
                }
            }
            if grad_b {
                let dst = &mut gb[j * mm..][..mm];
                for k in 0..mm {
                    dst[k] -= f * (ac[k] - bj[k]);
                }
            }
        }
    }
    if grad_a {
        emit(a, ga);
    }
    if grad_b {
        emit(b, gb);
    }
}

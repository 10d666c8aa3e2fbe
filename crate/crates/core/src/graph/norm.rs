//! Batch normalization and the feature-map normalization used by the
//! correlation matrices.

use super::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::cell::RefCell;

/// Running statistics of one batch-norm layer. Confined to a single thread;
/// train-mode forwards update them in place, eval-mode forwards only read.
#[derive(Debug)]
pub struct BnStats<S> {
    pub running_mean: RefCell<Vec<S>>,
    pub running_var: RefCell<Vec<S>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BnStats<S> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: RefCell::new(vec![S::zero(); channels]),
            running_var: RefCell::new(vec![S::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.borrow().len()
    }
}

impl<S: Scalar> Graph<S> {
    /// Batch normalization over (N,H,W) per channel.
    ///
    /// Train mode normalizes with batch statistics and updates the running
    /// statistics (population mean, unbiased variance, momentum blend).
    /// Eval mode normalizes with the running statistics and is deterministic.
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        stats: &BnStats<S>,
        train: bool,
    ) -> VarId {
        let sx = self.shape_of(x).to_vec();
        assert_eq!(sx.len(), 4, "batchnorm: input must be [N,C,H,W] (dimension error)");
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert_eq!(self.value(gamma).numel(), c, "batchnorm: gamma must have C elements");
        assert_eq!(self.value(beta).numel(), c, "batchnorm: beta must have C elements");
        assert_eq!(stats.channels(), c, "batchnorm: running stats must have C elements");
        let m = n * h * w;
        let eps = S::from_f64(stats.eps);

        let (mean, invstd) = if train {
            assert!(m >= 2, "batchnorm: train mode needs at least 2 values per channel");
            let xd = self.data_of(x);
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            let hw = h * w;
            let minv = S::one() / S::from_usize(m);
            for ci in 0..c {
                let mut acc = S::zero();
                for ni in 0..n {
                    for v in &xd[(ni * c + ci) * hw..][..hw] {
                        acc += *v;
                    }
                }
                mean[ci] = acc * minv;
            }
            for ci in 0..c {
                let mu = mean[ci];
                let mut acc = S::zero();
                for ni in 0..n {
                    for v in &xd[(ni * c + ci) * hw..][..hw] {
                        let d = *v - mu;
                        acc += d * d;
                    }
                }
                var[ci] = acc * minv;
            }
            // momentum blend; running variance uses the unbiased estimate
            let mom = S::from_f64(stats.momentum);
            let keep = S::one() - mom;
            let unbias = S::from_usize(m) / S::from_usize(m - 1);
            {
                let mut rm = stats.running_mean.borrow_mut();
                let mut rv = stats.running_var.borrow_mut();
                for ci in 0..c {
                    rm[ci] = keep * rm[ci] + mom * mean[ci];
                    rv[ci] = keep * rv[ci] + mom * var[ci] * unbias;
                }
            }
            let invstd: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            (mean, invstd)
        } else {
            let mean = stats.running_mean.borrow().clone();
            let invstd = stats
                .running_var
                .borrow()
                .iter()
                .map(|&v| S::one() / (v + eps).sqrt())
                .collect();
            (mean, invstd)
        };

        let xd = self.data_of(x);
        let gd = self.data_of(gamma);
        let bd = self.data_of(beta);
        let hw = h * w;
        let mut out = vec![S::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, ga, be) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
                let src = &xd[(ni * c + ci) * hw..][..hw];
                let dst = &mut out[(ni * c + ci) * hw..][..hw];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = ga * (v - mu) * is + be;
                }
            }
        }
        let t = Tensor::from_vec(&sx, out);
        self.push_dependent(t, Op::BatchNorm { x, gamma, beta, mean, invstd, train }, &[x, gamma, beta])
    }

    /// Normalization of reshaped feature maps [N, C, D]: per sample, subtract
    /// the global scalar mean, divide by the global scalar std, then divide
    /// by the Frobenius norm of the result. Output maps have unit Frobenius
    /// norm; a constant map degenerates to all zeros and bumps the graph's
    /// degeneracy counter.
    pub fn normalize_maps(&mut self, x: VarId) -> VarId {
        let sx = self.shape_of(x).to_vec();
        assert_eq!(sx.len(), 3, "normalize_maps: input must be [N,C,D]");
        let per = sx[1] * sx[2];
        assert!(per >= 2, "normalize_maps: maps need at least 2 elements");
        let n = sx[0];
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); xd.len()];
        let mut inv_sigma = vec![S::zero(); n];
        let mut radius = vec![S::zero(); n];
        let mut inv_radius = vec![S::zero(); n];
        let mut degenerate = 0u32;
        let pinv = S::one() / S::from_usize(per);
        let var_eps = S::from_f64(VAR_EPS);
        let frob_eps = S::from_f64(FROB_EPS);
        for i in 0..n {
            let src = &xd[i * per..][..per];
            let dst = &mut out[i * per..][..per];
            let mut mu = S::zero();
            for v in src {
                mu += *v;
            }
            mu = mu * pinv;
            let mut var = S::zero();
            for v in src {
                let d = *v - mu;
                var += d * d;
            }
            var = var * pinv;
            if var.as_f64() < DEGENERATE_VAR {
                degenerate += 1;
            }
            let is = S::one() / (var + var_eps).sqrt();
            let mut sq = S::zero();
            for (o, &v) in dst.iter_mut().zip(src) {
                let z = (v - mu) * is;
                *o = z;
                sq += z * z;
            }
            let r = sq.sqrt();
            let ir = S::one() / r.max(frob_eps);
            for o in dst.iter_mut() {
                *o = *o * ir;
            }
            inv_sigma[i] = is;
            radius[i] = r;
            inv_radius[i] = ir;
        }
        for _ in 0..degenerate {
            self.bump_degenerate_norms();
        }
        let t = Tensor::from_vec(&sx, out);
        self.push_dependent(t, Op::NormalizeMaps { x, inv_sigma, radius, inv_radius }, &[x])
    }
}

const VAR_EPS: f64 = 1e-24;
const FROB_EPS: f64 = 1e-12;
const DEGENERATE_VAR: f64 = 1e-18;

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<S: Scalar>(
    g: &Graph<S>,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    mean: &[S],
    invstd: &[S],
    train: bool,
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let sx = g.shape_of(x);
    let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
    let m = n * hw;
    let xd = g.data_of(x);
    let gd = g.data_of(gamma);

    // per-channel sums of g and g*xhat
    let mut sum_g = vec![S::zero(); c];
    let mut sum_gx = vec![S::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is) = (mean[ci], invstd[ci]);
            let go = &gout[(ni * c + ci) * hw..][..hw];
            let xs = &xd[(ni * c + ci) * hw..][..hw];
            let mut a = S::zero();
            let mut b = S::zero();
            for (gv, xv) in go.iter().zip(xs) {
                a += *gv;
                b += *gv * (*xv - mu) * is;
            }
            sum_g[ci] += a;
            sum_gx[ci] += b;
        }
    }

    if g.value(beta).requires_grad() {
        emit(beta, sum_g.clone());
    }
    if g.value(gamma).requires_grad() {
        emit(gamma, sum_gx.clone());
    }
    if g.value(x).requires_grad() {
        let minv = S::one() / S::from_usize(m);
        let mut gx = vec![S::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, ga) = (mean[ci], invstd[ci], gd[ci]);
                let go = &gout[(ni * c + ci) * hw..][..hw];
                let xs = &xd[(ni * c + ci) * hw..][..hw];
                let dst = &mut gx[(ni * c + ci) * hw..][..hw];
                if train {
                    let mg = sum_g[ci] * minv;
                    let mgx = sum_gx[ci] * minv;
                    for ((d, gv), xv) in dst.iter_mut().zip(go).zip(xs) {
                        let xh = (*xv - mu) * is;
                        *d = ga * is * (*gv - mg - xh * mgx);
                    }
                } else {
                    for (d, gv) in dst.iter_mut().zip(go) {
                        *d = ga * is * *gv;
                    }
                }
            }
        }
        emit(x, gx);
    }
}

pub(crate) fn normalize_maps_backward<S: Scalar>(
    shape: &[usize],
    y: &[S],
    inv_sigma: &[S],
    radius: &[S],
    inv_radius: &[S],
    gout: &[S],
) -> Vec<S> {
    let per = shape[1] * shape[2];
    let n = shape[0];
    let pinv = S::one() / S::from_usize(per);
    let frob_eps = S::from_f64(FROB_EPS);
    let mut gx = vec![S::zero(); y.len()];
    for i in 0..n {
        let ys = &y[i * per..][..per];
        let gs = &gout[i * per..][..per];
        let dst = &mut gx[i * per..][..per];
        let (is, r, ir) = (inv_sigma[i], radius[i], inv_radius[i]);
        // back through y = z / max(||z||, eps)
        let clamped = r <= frob_eps;
        let mut gy_dot_y = S::zero();
        if !clamped {
            for (gv, yv) in gs.iter().zip(ys) {
                gy_dot_y += *gv * *yv;
            }
        }
        // gz and z (z = y / inv_r)
        let rinv_back = S::one() / ir;
        let mut mean_gz = S::zero();
        let mut mean_gzz = S::zero();
        for j in 0..per {
            let z = ys[j] * rinv_back;
            let gz = if clamped {
                gs[j] * ir
            } else {
                ir * (gs[j] - ys[j] * gy_dot_y)
            };
            dst[j] = gz; // stash gz
            mean_gz += gz;
            mean_gzz += gz * z;
        }
        mean_gz = mean_gz * pinv;
        mean_gzz = mean_gzz * pinv;
        // back through z = (x - mu) / sigma
        for j in 0..per {
            let z = ys[j] * rinv_back;
            dst[j] = is * (dst[j] - mean_gz - z * mean_gzz);
        }
    }
    gx
}

//! 3x3 convolution via im2col + GEMM.
//!
//! The column matrix is laid out `[positions, C_in*9]` with positions ordered
//! `(n, oh, ow)` and patch entries ordered `(c_in, ky, kx)`, matching the
//! flattened kernel layout. The forward product streams the large column
//! matrix once while the small weight matrix stays cache-resident; the column
//! matrix is kept on the tape for the weight gradient.

use super::{Graph, Op, VarId};
use crate::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad: usize,
}

impl<S: Scalar> Graph<S> {
    /// Cross-correlation with a 3x3 kernel, padding 0 or 1.
    ///
    /// x: [N, C_in, H, W], w: [C_out, C_in, 3, 3], b: [C_out]
    /// -> [N, C_out, H + 2*pad - 2, W + 2*pad - 2]
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, padding: usize) -> VarId {
        let (sx, sw, sb) = (
            self.shape_of(x).to_vec(),
            self.shape_of(w).to_vec(),
            self.shape_of(b).to_vec(),
        );
        assert_eq!(sx.len(), 4, "conv2d: input must be [N,C,H,W] (dimension error)");
        assert_eq!(sw.len(), 4, "conv2d: kernel must be [C_out,C_in,3,3] (dimension error)");
        assert_eq!((sw[2], sw[3]), (3, 3), "conv2d: kernel spatial size must be 3x3");
        assert!(padding <= 1, "conv2d: padding must be 0 or 1");
        assert_eq!(sx[1], sw[1], "conv2d: channel mismatch (dimension error)");
        assert_eq!(sb, [sw[0]], "conv2d: bias must match output channels");
        assert!(
            sx[2] + 2 * padding >= 3 && sx[3] + 2 * padding >= 3,
            "conv2d: input too small for 3x3 kernel"
        );

        let dims = ConvDims {
            n: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            oh: sx[2] + 2 * padding - 2,
            ow: sx[3] + 2 * padding - 2,
            pad: padding,
        };
        let col = im2col(self.data_of(x), &dims);
        let positions = dims.n * dims.oh * dims.ow;
        let patch = dims.c_in * 9;

        // weights as [patch, C_out] so the GEMM keeps them hot in cache
        let mut wt = vec![S::zero(); patch * dims.c_out];
        gemm::transpose(self.data_of(w), dims.c_out, patch, &mut wt);
        let mut out_pos = vec![S::zero(); positions * dims.c_out];
        gemm::gemm_nn(&col, &wt, &mut out_pos, positions, patch, dims.c_out);

        // scatter [positions, C_out] -> [N, C_out, OH, OW], adding bias
        let bias = self.data_of(b);
        let hw = dims.oh * dims.ow;
        let mut out = vec![S::zero(); dims.n * dims.c_out * hw];
        for ni in 0..dims.n {
            for p in 0..hw {
                let row = &out_pos[(ni * hw + p) * dims.c_out..][..dims.c_out];
                for (co, &v) in row.iter().enumerate() {
                    out[(ni * dims.c_out + co) * hw + p] = v + bias[co];
                }
            }
        }
        let t = Tensor::from_vec(&[dims.n, dims.c_out, dims.oh, dims.ow], out);
        self.push_dependent(t, Op::Conv2d { x, w, b, dims, col }, &[x, w, b])
    }
}

fn im2col<S: Scalar>(x: &[S], d: &ConvDims) -> Vec<S> {
    let positions = d.n * d.oh * d.ow;
    let patch = d.c_in * 9;
    let mut col = vec![S::zero(); positions * patch];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((ni * d.oh + oh) * d.ow + ow) * patch;
                for c in 0..d.c_in {
                    let chan = &x[(ni * d.c_in + c) * d.h * d.w..][..d.h * d.w];
                    let base = row + c * 9;
                    for ky in 0..3 {
                        let iy = (oh + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &chan[iy as usize * d.w..][..d.w];
                        for kx in 0..3 {
                            let ix = (ow + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            col[base + ky * 3 + kx] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<S: Scalar>(dcol: &[S], d: &ConvDims) -> Vec<S> {
    let patch = d.c_in * 9;
    let mut dx = vec![S::zero(); d.n * d.c_in * d.h * d.w];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((ni * d.oh + oh) * d.ow + ow) * patch;
                for c in 0..d.c_in {
                    let chan = &mut dx[(ni * d.c_in + c) * d.h * d.w..][..d.h * d.w];
                    let base = row + c * 9;
                    for ky in 0..3 {
                        let iy = (oh + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = iy as usize * d.w;
                        for kx in 0..3 {
                            let ix = (ow + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            chan[dst + ix as usize] += dcol[base + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &Graph<S>,
    x: VarId,
    w: VarId,
    b: VarId,
    d: &ConvDims,
    col: &[S],
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let positions = d.n * d.oh * d.ow;
    let patch = d.c_in * 9;
    let hw = d.oh * d.ow;

    // gather NCHW grad -> [positions, C_out]
    let mut g_pos = vec![S::zero(); positions * d.c_out];
    for ni in 0..d.n {
        for co in 0..d.c_out {
            let src = &gout[(ni * d.c_out + co) * hw..][..hw];
            for p in 0..hw {
                g_pos[(ni * hw + p) * d.c_out + co] = src[p];
            }
        }
    }

    if g.value(w).requires_grad() {
        // dWt[patch, C_out] = col^T * g_pos, then back to [C_out, patch]
        let mut dwt = vec![S::zero(); patch * d.c_out];
        gemm::gemm_tn(col, &g_pos, &mut dwt, patch, positions, d.c_out);
        let mut dw = vec![S::zero(); d.c_out * patch];
        gemm::transpose(&dwt, patch, d.c_out, &mut dw);
        emit(w, dw);
    }
    if g.value(b).requires_grad() {
        let mut db = vec![S::zero(); d.c_out];
        for row in g_pos.chunks_exact(d.c_out) {
            for (dv, gv) in db.iter_mut().zip(row) {
                *dv += *gv;
            }
        }
        emit(b, db);
    }
    if g.value(x).requires_grad() {
        // dcol[positions, patch] = g_pos * w_flat[C_out, patch]
        let mut dcol = vec![S::zero(); positions * patch];
        gemm::gemm_nn(&g_pos, g.data_of(w), &mut dcol, positions, d.c_out, patch);
        emit(x, col2im(&dcol, d));
    }
}

//! Max pooling (2x2, stride 2) and the global pools.
//!
//! Ties are broken toward the first maximum in row-major order so the routed
//! gradient is deterministic. An odd trailing row/column is truncated.

use super::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// 2x2 max pooling with stride 2 on [N,C,H,W].
    pub fn maxpool2(&mut self, x: VarId) -> VarId {
        let sx = self.shape_of(x).to_vec();
        assert_eq!(sx.len(), 4, "maxpool2: input must be [N,C,H,W] (dimension error)");
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "maxpool2: spatial size too small");
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut arg = vec![0u32; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &xd[nc * h * w..][..h * w];
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let iy = oy * 2 + dy;
                            let ix = ox * 2 + dx;
                            let idx = iy * w + ix;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    arg[obase + oy * ow + ox] = (nc * h * w + best_i) as u32;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, oh, ow], out);
        self.push_dependent(t, Op::MaxPool2 { x, arg }, &[x])
    }

    /// Per-channel max over all spatial positions: [N,C,H,W] -> [N,C].
    pub fn global_max_pool(&mut self, x: VarId) -> VarId {
        let sx = self.shape_of(x).to_vec();
        assert_eq!(sx.len(), 4, "global_max_pool: input must be [N,C,H,W]");
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); n * c];
        let mut arg = vec![0u32; n * c];
        for nc in 0..n * c {
            let plane = &xd[nc * hw..][..hw];
            let mut best = S::neg_infinity();
            let mut best_i = 0usize;
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[nc] = best;
            arg[nc] = (nc * hw + best_i) as u32;
        }
        let t = Tensor::from_vec(&[n, c], out);
        self.push_dependent(t, Op::GlobalMaxPool { x, arg }, &[x])
    }

    /// Per-channel mean over all spatial positions: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        let sx = self.shape_of(x).to_vec();
        assert_eq!(sx.len(), 4, "global_avg_pool: input must be [N,C,H,W]");
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let inv = S::one() / S::from_usize(hw);
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); n * c];
        for nc in 0..n * c {
            let mut acc = S::zero();
            for v in &xd[nc * hw..][..hw] {
                acc += *v;
            }
            out[nc] = acc * inv;
        }
        let t = Tensor::from_vec(&[n, c], out);
        self.push_dependent(t, Op::GlobalAvgPool { x }, &[x])
    }
}

//! Elementwise ops, activations, reductions, matmul and the fc layer.

use super::{Graph, Op, VarId};
use crate::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn log_eps<S: Scalar>() -> S {
    S::from_f64(1e-12)
}

impl<S: Scalar> Graph<S> {
    fn assert_same_shape(&self, a: VarId, b: VarId, what: &str) {
        assert_eq!(
            self.shape_of(a),
            self.shape_of(b),
            "{what}: operand shapes must match (dimension error)"
        );
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.assert_same_shape(a, b, "add");
        let data = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.shape_of(a), data);
        self.push_dependent(t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.assert_same_shape(a, b, "sub");
        let data = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.shape_of(a), data);
        self.push_dependent(t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.assert_same_shape(a, b, "mul");
        let data = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.shape_of(a), data);
        self.push_dependent(t, Op::Mul { a, b }, &[a, b])
    }

    pub fn add_scalar(&mut self, x: VarId, c: S) -> VarId {
        let data = self.data_of(x).iter().map(|&v| v + c).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::AddScalar { x }, &[x])
    }

    pub fn mul_scalar(&mut self, x: VarId, c: S) -> VarId {
        let data = self.data_of(x).iter().map(|&v| v * c).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::MulScalar { x, c }, &[x])
    }

    /// Multiply a tensor by a single-element node (broadcast).
    pub fn scale_by(&mut self, x: VarId, s: VarId) -> VarId {
        assert_eq!(self.value(s).numel(), 1, "scale_by: scale must be scalar");
        let sv = self.data_of(s)[0];
        let data = self.data_of(x).iter().map(|&v| v * sv).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::ScaleNode { x, s }, &[x, s])
    }

    /// Add a single-element node to every element (broadcast).
    pub fn offset_by(&mut self, x: VarId, s: VarId) -> VarId {
        assert_eq!(self.value(s).numel(), 1, "offset_by: offset must be scalar");
        let sv = self.data_of(s)[0];
        let data = self.data_of(x).iter().map(|&v| v + sv).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::OffsetNode { x, s }, &[x, s])
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        let data = self.data_of(x).iter().map(|&v| -v).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::Neg { x }, &[x])
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let data = self.data_of(x).iter().map(|&v| v.exp()).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::Exp { x }, &[x])
    }

    /// Natural log with the argument clamped to a small positive floor.
    pub fn log_guarded(&mut self, x: VarId) -> VarId {
        let eps = log_eps::<S>();
        let data = self.data_of(x).iter().map(|&v| v.max(eps).ln()).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::LogGuarded { x }, &[x])
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let data = self.data_of(x).iter().map(|&v| v.max(S::zero())).collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let one = S::one();
        let data = self
            .data_of(x)
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let t = Tensor::from_vec(self.shape_of(x), data);
        self.push_dependent(t, Op::Sigmoid { x }, &[x])
    }

    /// Softmax along `axis`, numerically stabilized by the lane max.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> VarId {
        let shape = self.shape_of(x).to_vec();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        let data = softmax_forward(&shape, self.data_of(x), axis);
        let t = Tensor::from_vec(&shape, data);
        self.push_dependent(t, Op::Softmax { x, axis }, &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = S::zero();
        for v in self.data_of(x) {
            acc += *v;
        }
        let t = Tensor::scalar(acc);
        self.push_dependent(t, Op::Sum { x }, &[x])
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.mul_scalar(s, S::one() / S::from_usize(n))
    }

    /// Frobenius norm over all elements; subgradient 0 at the zero tensor.
    pub fn frobenius_norm(&mut self, x: VarId) -> VarId {
        let mut acc = S::zero();
        for v in self.data_of(x) {
            acc += *v * *v;
        }
        let t = Tensor::scalar(acc.sqrt());
        self.push_dependent(t, Op::FrobNorm { x }, &[x])
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.value(x).numel(),
            "reshape: element count must be preserved (dimension error)"
        );
        let t = Tensor::from_vec(shape, self.data_of(x).to_vec());
        self.push_dependent(t, Op::Reshape { x }, &[x])
    }

    pub fn transpose2(&mut self, x: VarId) -> VarId {
        let sh = self.shape_of(x);
        assert_eq!(sh.len(), 2, "transpose2 expects a 2-d tensor");
        let (r, c) = (sh[0], sh[1]);
        let mut data = vec![S::zero(); r * c];
        gemm::transpose(self.data_of(x), r, c, &mut data);
        let t = Tensor::from_vec(&[c, r], data);
        self.push_dependent(t, Op::Transpose2 { x }, &[x])
    }

    /// 2-d matrix product a[m,k] * b[k,n].
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-d tensors");
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions must agree (dimension error)");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::zero(); m * n];
        gemm::gemm_nn(self.data_of(a), self.data_of(b), &mut data, m, k, n);
        let t = Tensor::from_vec(&[m, n], data);
        self.push_dependent(t, Op::Matmul { a, b }, &[a, b])
    }

    /// Fully connected layer: x[N,F_in] * w[F_out,F_in]^T + b[F_out].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (sx, sw, sb) = (
            self.shape_of(x).to_vec(),
            self.shape_of(w).to_vec(),
            self.shape_of(b).to_vec(),
        );
        assert!(sx.len() == 2 && sw.len() == 2, "linear expects 2-d input and weight");
        assert_eq!(sx[1], sw[1], "linear: inner dimensions must agree (dimension error)");
        assert_eq!(sb, [sw[0]], "linear: bias must match output features");
        let (n, fin, fout) = (sx[0], sx[1], sw[0]);
        let mut data = vec![S::zero(); n * fout];
        gemm::gemm_nt(self.data_of(x), self.data_of(w), &mut data, n, fin, fout);
        let bias = self.data_of(b);
        for row in data.chunks_exact_mut(fout) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += *bv;
            }
        }
        let t = Tensor::from_vec(&[n, fout], data);
        self.push_dependent(t, Op::Linear { x, w, b }, &[x, w, b])
    }
}

pub(crate) fn softmax_forward<S: Scalar>(shape: &[usize], x: &[S], axis: usize) -> Vec<S> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = S::neg_infinity();
            for l in 0..len {
                mx = mx.max(x[base + l * inner]);
            }
            let mut denom = S::zero();
            for l in 0..len {
                let e = (x[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                denom += e;
            }
            for l in 0..len {
                out[base + l * inner] = out[base + l * inner] / denom;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<S: Scalar>(shape: &[usize], y: &[S], gout: &[S], axis: usize) -> Vec<S> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut gx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dotgy = S::zero();
            for l in 0..len {
                let idx = base + l * inner;
                dotgy += gout[idx] * y[idx];
            }
            for l in 0..len {
                let idx = base + l * inner;
                gx[idx] = y[idx] * (gout[idx] - dotgy);
            }
        }
    }
    gx
}

pub(crate) fn matmul_backward<S: Scalar>(
    g: &Graph<S>,
    a: VarId,
    b: VarId,
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let (sa, sb) = (g.shape_of(a), g.shape_of(b));
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    if g.value(a).requires_grad() {
        // dA = gout * B^T
        let mut da = vec![S::zero(); m * k];
        gemm::gemm_nt(gout, g.data_of(b), &mut da, m, n, k);
        emit(a, da);
    }
    if g.value(b).requires_grad() {
        // dB = A^T * gout
        let mut db = vec![S::zero(); k * n];
        gemm::gemm_tn(g.data_of(a), gout, &mut db, k, m, n);
        emit(b, db);
    }
}

pub(crate) fn linear_backward<S: Scalar>(
    g: &Graph<S>,
    x: VarId,
    w: VarId,
    b: VarId,
    gout: &[S],
    emit: &mut impl FnMut(VarId, Vec<S>),
) {
    let (sx, sw) = (g.shape_of(x), g.shape_of(w));
    let (n, fin, fout) = (sx[0], sx[1], sw[0]);
    if g.value(x).requires_grad() {
        // dx = gout[n,fout] * w[fout,fin]
        let mut dx = vec![S::zero(); n * fin];
        gemm::gemm_nn(gout, g.data_of(w), &mut dx, n, fout, fin);
        emit(x, dx);
    }
    if g.value(w).requires_grad() {
        // dw = gout^T[fout,n] * x[n,fin]
        let mut dw = vec![S::zero(); fout * fin];
        gemm::gemm_tn(gout, g.data_of(x), &mut dw, fout, n, fin);
        emit(w, dw);
    }
    if g.value(b).requires_grad() {
        let mut db = vec![S::zero(); fout];
        for row in gout.chunks_exact(fout) {
            for (d, gv) in db.iter_mut().zip(row) {
                *d += *gv;
            }
        }
        emit(b, db);
    }
}

//! Per-stream losses, match targets, fixed-weight fusion and the
//! homoscedastic-uncertainty learned fusion; score fusion at inference.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::streams::StreamKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Cel,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "cel" | "ce" | "crossentropy" => Ok(LossKind::Cel),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Cel => "cel",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Fixed,
    Learned,
}

impl WeightMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fixed" => Ok(WeightMode::Fixed),
            "learned" | "auto" | "uncertainty" => Ok(WeightMode::Learned),
            other => Err(Error::Config(format!("unknown weight mode '{other}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            WeightMode::Fixed => "fixed",
            WeightMode::Learned => "learned",
        }
    }
}

/// Canonical stream order used for weight vectors and CSV columns.
pub fn stream_index(k: StreamKind) -> usize {
    match k {
        StreamKind::Appearance => 0,
        StreamKind::CorrChannel => 1,
        StreamKind::CorrSpatial => 2,
        StreamKind::Mi => 3,
    }
}

/// Fixed per-stream loss weights in (app, corrC, corrD, mi) order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedWeights(pub [f64; 4]);

impl FixedWeights {
    pub fn get(&self, k: StreamKind) -> f64 {
        self.0[stream_index(k)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("fixed stream weights must be >= 0".into()));
        }
        if self.0.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one fixed stream weight must be > 0".into()));
        }
        Ok(())
    }

    /// "4,2,1,2" -> weights in (app, corrC, corrD, mi) order.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "fixed weights need 4 comma-separated values (app,corrC,corrD,mi), got '{s}'"
            )));
        }
        let mut w = [0.0; 4];
        for (i, p) in parts.iter().enumerate() {
            w[i] = p
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad weight '{p}'")))?;
        }
        let fw = FixedWeights(w);
        fw.validate()?;
        Ok(fw)
    }
}

/// 0/1 match matrix [n_query, ways]: y[j, c] = 1 iff query j belongs to the
/// episode class in slot c. `query_slots[j]` is that slot.
pub fn match_targets<S: Scalar>(query_slots: &[usize], ways: usize) -> Tensor<S> {
    let n = query_slots.len();
    let mut data = vec![S::zero(); n * ways];
    for (j, &slot) in query_slots.iter().enumerate() {
        assert!(slot < ways, "query label outside episode classes");
        data[j * ways + slot] = S::one();
    }
    Tensor::from_vec(&[n, ways], data)
}

/// Per-stream loss on an [n, C] score matrix against 0/1 targets.
///
/// MSE: 0.5 * sum((y - p)^2). CEL: row-wise softmax over the C scores, then
/// -sum(y * log p~), log guarded away from zero.
pub fn stream_loss<S: Scalar>(
    g: &mut Graph<S>,
    scores: VarId,
    targets: VarId,
    kind: LossKind,
) -> VarId {
    assert_eq!(
        g.value(scores).shape(),
        g.value(targets).shape(),
        "stream_loss: score/target shapes must match (dimension error)"
    );
    match kind {
        LossKind::Mse => {
            let d = g.sub(targets, scores);
            let sq = g.mul(d, d);
            let s = g.sum(sq);
            g.mul_scalar(s, S::from_f64(0.5))
        }
        LossKind::Cel => {
            let p = g.softmax(scores, 1);
            let lp = g.log_guarded(p);
            let yl = g.mul(targets, lp);
            let s = g.sum(yl);
            g.neg(s)
        }
    }
}

/// L = sum_k w_k L_k over the streams present in `losses`.
pub fn fuse_fixed<S: Scalar>(
    g: &mut Graph<S>,
    losses: &[(StreamKind, VarId)],
    weights: &FixedWeights,
) -> VarId {
    assert!(!losses.is_empty(), "fuse_fixed: no stream losses");
    let mut acc: Option<VarId> = None;
    for &(kind, loss) in losses {
        let term = g.mul_scalar(loss, S::from_f64(weights.get(kind)));
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.unwrap()
}

/// Homoscedastic-uncertainty fusion with log-variances s_k:
/// L = sum_k exp(-s_k) L_k + 0.5 * sum_k s_k over the enabled streams.
/// The s_k enter the tape as trainable leaves.
pub fn fuse_uncertainty<S: Scalar>(
    g: &mut Graph<S>,
    losses: &[(StreamKind, VarId)],
    log_vars: &[Param<S>; 4],
) -> VarId {
    assert!(!losses.is_empty(), "fuse_uncertainty: no stream losses");
    let mut acc: Option<VarId> = None;
    let mut reg: Option<VarId> = None;
    for &(kind, loss) in losses {
        let s = g.leaf_param(&log_vars[stream_index(kind)]);
        let ns = g.neg(s);
        let w = g.exp(ns);
        let term = g.mul(w, loss);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
        reg = Some(match reg {
            None => s,
            Some(r) => g.add(r, s),
        });
    }
    let reg = g.mul_scalar(reg.unwrap(), S::from_f64(0.5));
    g.add(acc.unwrap(), reg)
}

/// Normalized weighted fusion of per-stream score matrices and the argmax
/// class predictions. `weights` are the effective per-stream weights (fixed
/// values, or exp(-s_k) in learned mode); only streams present in `scores`
/// participate. Ties resolve to the lowest class index.
pub fn fuse_scores<S: Scalar>(
    scores: &[(StreamKind, Tensor<S>)],
    weights: &[f64; 4],
) -> (Tensor<S>, Vec<usize>) {
    assert!(!scores.is_empty(), "fuse_scores: at least one stream required");
    let shape = scores[0].1.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let mut wsum = 0.0;
    for (kind, s) in scores {
        assert_eq!(s.shape(), &shape[..], "fuse_scores: stream shape mismatch");
        wsum += weights[stream_index(*kind)];
    }
    assert!(wsum > 0.0, "fuse_scores: effective weights sum to zero");
    let mut fused = vec![S::zero(); n * c];
    for (kind, s) in scores {
        let w = S::from_f64(weights[stream_index(*kind)] / wsum);
        for (f, v) in fused.iter_mut().zip(s.data()) {
            *f += w * *v;
        }
    }
    let mut preds = Vec::with_capacity(n);
    for j in 0..n {
        let row = &fused[j * c..(j + 1) * c];
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        preds.push(best);
    }
    (Tensor::from_vec(&[n, c], fused), preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_grads, t};

    #[test]
    fn match_targets_one_hot_rows() {
        let y = match_targets::<f64>(&[2, 0, 2], 5);
        assert_eq!(y.shape(), &[3, 5]);
        assert_eq!(&y.data()[..5], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&y.data()[5..10], &[1.0, 0.0, 0.0, 0.0, 0.0]);
        for j in 0..3 {
            let s: f64 = y.data()[j * 5..(j + 1) * 5].iter().sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn mse_loss_values() {
        let mut g = Graph::<f64>::new();
        // p = y exactly -> 0
        let y = g.constant(match_targets::<f64>(&[1], 5));
        let p = g.constant(match_targets::<f64>(&[1], 5));
        let l = stream_loss(&mut g, p, y, LossKind::Mse);
        assert_eq!(g.value(l).item(), 0.0);

        // p = 0.5 everywhere, 1 query, 5-way -> 0.5 * (0.25 * 5) = 0.625
        let p = g.constant(Tensor::full(&[1, 5], 0.5));
        let l = stream_loss(&mut g, p, y, LossKind::Mse);
        assert!((g.value(l).item() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn cel_uniform_is_ln_ways() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(match_targets::<f64>(&[3], 5));
        let p = g.constant(Tensor::full(&[1, 5], 0.5)); // softmax -> uniform
        let l = stream_loss(&mut g, p, y, LossKind::Cel);
        assert!((g.value(l).item() - 5.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            for kind in [LossKind::Mse, LossKind::Cel] {
                let p0: Vec<f64> = crate::check::rand_values(10, 77 + seed)
                    .iter()
                    .map(|v| 0.5 + 0.4 * v)
                    .collect();
                let build = move |g: &mut Graph<f64>, data: &[Vec<f64>]| {
                    let p = g.leaf(t(&[2, 5], &data[0]));
                    let y = g.constant(match_targets::<f64>(&[1, 4], 5));
                    let l = stream_loss(g, p, y, kind);
                    (l, vec![p])
                };
                check_grads(build, &[p0], 1e-4, 1e-8, None).unwrap();
            }
        }
    }

    #[test]
    fn fixed_fusion_weighted_sum() {
        let mut g = Graph::<f64>::new();
        let ones: Vec<VarId> = (0..4).map(|_| g.constant(Tensor::scalar(1.0))).collect();
        let losses: Vec<(StreamKind, VarId)> =
            StreamKind::ALL.iter().copied().zip(ones).collect();
        // paper's best fixed configuration: weights {4,2,1,2} on unit losses -> 9
        let w = FixedWeights([4.0, 2.0, 1.0, 2.0]);
        let l = fuse_fixed(&mut g, &losses, &w);
        assert_eq!(g.value(l).item(), 9.0);

        // only the appearance weight set -> L = L_a
        let w = FixedWeights([1.0, 0.0, 0.0, 0.0]);
        let l = fuse_fixed(&mut g, &losses[..1].to_vec(), &w);
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn fixed_weights_validation() {
        assert!(FixedWeights([0.0; 4]).validate().is_err());
        assert!(FixedWeights([1.0, -0.1, 0.0, 0.0]).validate().is_err());
        assert!(FixedWeights::parse("2,1,0,0").is_ok());
        assert!(FixedWeights::parse("2,1").is_err());
    }

    fn log_vars(vals: [f64; 4]) -> [Param<f64>; 4] {
        let mk = |i: usize, v: f64| Param::new(format!("s{i}"), Tensor::scalar(v));
        [mk(0, vals[0]), mk(1, vals[1]), mk(2, vals[2]), mk(3, vals[3])]
    }

    #[test]
    fn uncertainty_fusion_at_zero_logvars() {
        // all s_k = 0, all L_k = 1, 3 streams -> 3
        let mut g = Graph::<f64>::new();
        let lv = log_vars([0.0; 4]);
        let losses: Vec<(StreamKind, VarId)> = [
            StreamKind::Appearance,
            StreamKind::CorrChannel,
            StreamKind::Mi,
        ]
        .iter()
        .map(|&k| (k, g.constant(Tensor::scalar(1.0))))
        .collect();
        let l = fuse_uncertainty(&mut g, &losses, &lv);
        assert!((g.value(l).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_gradient_closed_form() {
        // dL/ds_k = -exp(-s_k) L_k + 0.5; at s = 0, L_k = 1 -> -0.5
        let lv = log_vars([0.0, 0.3, -0.7, 1.1]);
        let lvals = [1.0, 0.5, 2.0, 0.25];
        let mut g = Graph::<f64>::new();
        let losses: Vec<(StreamKind, VarId)> = StreamKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, g.constant(Tensor::scalar(lvals[i]))))
            .collect();
        let l = fuse_uncertainty(&mut g, &losses, &lv);
        g.backward(l);
        for (i, p) in lv.iter().enumerate() {
            let id = g.param_binding(p.name()).unwrap();
            let got = g.grad(id).unwrap()[0];
            let s = p.tensor.item();
            let want = -(-s).exp() * lvals[i] + 0.5;
            assert!((got - want).abs() < 1e-12, "stream {i}: {got} vs {want}");
        }
    }

    #[test]
    fn fused_score_invariants() {
        // one stream enabled: fused equals that stream
        let s = Tensor::from_vec(&[2, 3], vec![0.1, 0.9, 0.3, 0.6, 0.2, 0.2]);
        let (fused, preds) = fuse_scores(&[(StreamKind::Appearance, s.clone())], &[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(fused.data(), s.data());
        assert_eq!(preds, vec![1, 0]);

        // equal weights, scores p and 1-p -> fused 0.5 everywhere
        let inv = s.map(|v| 1.0 - v);
        let (fused, _) = fuse_scores(
            &[(StreamKind::Appearance, s.clone()), (StreamKind::Mi, inv)],
            &[1.0, 0.0, 0.0, 1.0],
        );
        for &v in fused.data() {
            assert!((v - 0.5f64).abs() < 1e-12);
        }

        // argmax invariant under scaling all weights by lambda > 0
        let s2 = Tensor::from_vec(&[2, 3], vec![0.3, 0.1, 0.8, 0.2, 0.9, 0.4]);
        let (_, p1) = fuse_scores(
            &[(StreamKind::Appearance, s.clone()), (StreamKind::Mi, s2.clone())],
            &[1.0, 0.0, 0.0, 3.0],
        );
        let (_, p2) = fuse_scores(
            &[(StreamKind::Appearance, s), (StreamKind::Mi, s2)],
            &[7.5, 0.0, 0.0, 22.5],
        );
        assert_eq!(p1, p2);
    }
}

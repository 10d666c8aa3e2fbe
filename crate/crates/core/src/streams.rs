//! The three metric-learning streams.
//!
//! Appearance: channel-concatenate the class feature map with the query map
//! and score the pair with a small CNN + fc(8) -> ReLU -> fc(1) -> sigmoid.
//!
//! Relation: compare unit-norm correlation (Gram) matrices of the two maps,
//! spatial (DxD) and channel (64x64) kinds, each scored by its own
//! scalar-affine + sigmoid head on the Frobenius distance.
//!
//! Mutual information: concatenate each query local feature with the globally
//! max-pooled class descriptor and estimate the local-global agreement with a
//! conv sub-network + two fc layers (pooled), or a per-location scoring head
//! whose sigmoid outputs are averaged over positions (dense).

use crate::embedding::ConvBlock;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::init;
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Appearance,
    CorrChannel,
    CorrSpatial,
    Mi,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Appearance,
        StreamKind::CorrChannel,
        StreamKind::CorrSpatial,
        StreamKind::Mi,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StreamKind::Appearance => "app",
            StreamKind::CorrChannel => "corrC",
            StreamKind::CorrSpatial => "corrD",
            StreamKind::Mi => "mi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "app" | "appearance" => Ok(StreamKind::Appearance),
            "corrC" | "corrc" | "channel" => Ok(StreamKind::CorrChannel),
            "corrD" | "corrd" | "spatial" => Ok(StreamKind::CorrSpatial),
            "mi" | "MI" => Ok(StreamKind::Mi),
            other => Err(Error::Config(format!("unknown stream '{other}'"))),
        }
    }
}

/// Which streams are scored, fused and trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSet {
    pub app: bool,
    pub corr_c: bool,
    pub corr_d: bool,
    pub mi: bool,
}

impl StreamSet {
    pub fn all() -> Self {
        StreamSet { app: true, corr_c: true, corr_d: true, mi: true }
    }

    pub fn none() -> Self {
        StreamSet { app: false, corr_c: false, corr_d: false, mi: false }
    }

    pub fn only(kind: StreamKind) -> Self {
        let mut s = Self::none();
        s.set(kind, true);
        s
    }

    pub fn contains(&self, k: StreamKind) -> bool {
        match k {
            StreamKind::Appearance => self.app,
            StreamKind::CorrChannel => self.corr_c,
            StreamKind::CorrSpatial => self.corr_d,
            StreamKind::Mi => self.mi,
        }
    }

    pub fn set(&mut self, k: StreamKind, on: bool) {
        match k {
            StreamKind::Appearance => self.app = on,
            StreamKind::CorrChannel => self.corr_c = on,
            StreamKind::CorrSpatial => self.corr_d = on,
            StreamKind::Mi => self.mi = on,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = StreamKind> + '_ {
        StreamKind::ALL.into_iter().filter(|&k| self.contains(k))
    }

    pub fn is_empty(&self) -> bool {
        self.iter().next().is_none()
    }

    /// Comma-separated stream labels, e.g. "app,corrC,corrD,mi".
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = Self::none();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set.set(StreamKind::parse(part)?, true);
        }
        if set.is_empty() {
            return Err(Error::Config("enabled stream set must not be empty".into()));
        }
        Ok(set)
    }

    pub fn to_string_list(&self) -> String {
        self.iter().map(|k| k.label()).collect::<Vec<_>>().join(",")
    }
}

/// Appearance stream head: two Conv-64F-style blocks (with pooling) over the
/// 2F-channel pair map, then fc(8) -> ReLU -> fc(1) -> sigmoid.
pub struct AppearanceHead<S> {
    pub block1: ConvBlock<S>,
    pub block2: ConvBlock<S>,
    pub fc1_w: Param<S>,
    pub fc1_b: Param<S>,
    pub fc2_w: Param<S>,
    pub fc2_b: Param<S>,
    flat: usize,
}

impl<S: Scalar> AppearanceHead<S> {
    pub fn new<R: Rng>(feature_h: usize, feature_w: usize, rng: &mut R) -> Result<Self> {
        let h1 = feature_h / 2;
        let w1 = feature_w / 2;
        let h2 = h1 / 2;
        let w2 = w1 / 2;
        if h2 == 0 || w2 == 0 {
            return Err(Error::Config(format!(
                "appearance stream needs feature maps of at least 4x4 for two poolings, got {feature_h}x{feature_w}"
            )));
        }
        let flat = 64 * h2 * w2;
        Ok(AppearanceHead {
            block1: ConvBlock::new("app.block1", 128, 64, true, rng),
            block2: ConvBlock::new("app.block2", 64, 64, true, rng),
            fc1_w: Param::new("app.fc1.weight", init::fc_weight(8, flat, rng)),
            fc1_b: Param::new("app.fc1.bias", Tensor::zeros(&[8])),
            fc2_w: Param::new("app.fc2.weight", init::fc_weight(1, 8, rng)),
            fc2_b: Param::new("app.fc2.bias", Tensor::zeros(&[1])),
            flat,
        })
    }

    /// pairs [P, 128, h, w] -> sigmoid scores [P, 1]
    pub fn forward(&self, g: &mut Graph<S>, pairs: VarId, train: bool) -> VarId {
        let y = self.block1.forward(g, pairs, train);
        let y = self.block2.forward(g, y, train);
        let p = g.value(y).shape()[0];
        let y = g.reshape(y, &[p, self.flat]);
        let (w1, b1) = (g.leaf_param(&self.fc1_w), g.leaf_param(&self.fc1_b));
        let y = g.linear(y, w1, b1);
        let y = g.relu(y);
        let (w2, b2) = (g.leaf_param(&self.fc2_w), g.leaf_param(&self.fc2_b));
        let y = g.linear(y, w2, b2);
        g.sigmoid(y)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.block1.visit_params(f);
        self.block2.visit_params(f);
        f(&mut self.fc1_w);
        f(&mut self.fc1_b);
        f(&mut self.fc2_w);
        f(&mut self.fc2_b);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        self.block1.visit_buffers(f);
        self.block2.visit_buffers(f);
    }
}

/// Relation stream head: one scalar affine map + sigmoid on the correlation
/// distance. Initialized to score = sigmoid(-distance) so the stream has a
/// nonzero gradient from the first step.
pub struct RelationHead<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> RelationHead<S> {
    pub fn new(name: &str) -> Self {
        RelationHead {
            weight: Param::new(format!("{name}.weight"), Tensor::scalar(S::from_f64(-1.0))),
            bias: Param::new(format!("{name}.bias"), Tensor::scalar(S::zero())),
        }
    }

    /// distances [n, C] -> sigmoid(w * d + b), elementwise
    pub fn forward(&self, g: &mut Graph<S>, dists: VarId) -> VarId {
        let w = g.leaf_param(&self.weight);
        let b = g.leaf_param(&self.bias);
        let y = g.scale_by(dists, w);
        let y = g.offset_by(y, b);
        g.sigmoid(y)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Mutual information head over local-global pair maps [P, 128, h, w].
///
/// Pooled mode: block1 (with pooling) -> block2 (pooling only when the input
/// map is at least 8x8) -> fc(8) -> ReLU -> fc(1) -> sigmoid.
/// Dense mode: fc(8) -> ReLU -> fc(1) -> sigmoid per location, then the mean
/// over locations.
pub struct MiHead<S> {
    pub block1: ConvBlock<S>,
    pub block2: ConvBlock<S>,
    pub fc1_w: Param<S>,
    pub fc1_b: Param<S>,
    pub fc2_w: Param<S>,
    pub fc2_b: Param<S>,
    flat: usize,
}

impl<S: Scalar> MiHead<S> {
    pub fn new<R: Rng>(feature_h: usize, feature_w: usize, rng: &mut R) -> Result<Self> {
        let pool2 = feature_h >= 8 && feature_w >= 8;
        let (h1, w1) = (feature_h / 2, feature_w / 2);
        if h1 == 0 || w1 == 0 {
            return Err(Error::Config(format!(
                "mi stream needs feature maps of at least 2x2, got {feature_h}x{feature_w}"
            )));
        }
        let (h2, w2) = if pool2 { (h1 / 2, w1 / 2) } else { (h1, w1) };
        let flat = 64 * h2 * w2;
        Ok(MiHead {
            block1: ConvBlock::new("mi.block1", 128, 64, true, rng),
            block2: ConvBlock::new("mi.block2", 64, 64, pool2, rng),
            fc1_w: Param::new("mi.fc1.weight", init::fc_weight(8, flat, rng)),
            fc1_b: Param::new("mi.fc1.bias", Tensor::zeros(&[8])),
            fc2_w: Param::new("mi.fc2.weight", init::fc_weight(1, 8, rng)),
            fc2_b: Param::new("mi.fc2.bias", Tensor::zeros(&[1])),
            flat,
        })
    }

    /// pair maps [P, 128, h, w] -> sigmoid scores [P, 1]
    pub fn forward(&self, g: &mut Graph<S>, pairs: VarId, train: bool) -> VarId {
        let y = self.block1.forward(g, pairs, train);
        let y = self.block2.forward(g, y, train);
        let p = g.value(y).shape()[0];
        let y = g.reshape(y, &[p, self.flat]);
        let (w1, b1) = (g.leaf_param(&self.fc1_w), g.leaf_param(&self.fc1_b));
        let y = g.linear(y, w1, b1);
        let y = g.relu(y);
        let (w2, b2) = (g.leaf_param(&self.fc2_w), g.leaf_param(&self.fc2_b));
        let y = g.linear(y, w2, b2);
        g.sigmoid(y)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.block1.visit_params(f);
        self.block2.visit_params(f);
        f(&mut self.fc1_w);
        f(&mut self.fc1_b);
        f(&mut self.fc2_w);
        f(&mut self.fc2_b);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        self.block1.visit_buffers(f);
        self.block2.visit_buffers(f);
    }
}

/// Per-location scoring head for dense MI.
pub struct DenseMiHead<S> {
    pub fc1_w: Param<S>,
    pub fc1_b: Param<S>,
    pub fc2_w: Param<S>,
    pub fc2_b: Param<S>,
}

impl<S: Scalar> DenseMiHead<S> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        DenseMiHead {
            fc1_w: Param::new("mi.dense.fc1.weight", init::fc_weight(8, 128, rng)),
            fc1_b: Param::new("mi.dense.fc1.bias", Tensor::zeros(&[8])),
            fc2_w: Param::new("mi.dense.fc2.weight", init::fc_weight(1, 8, rng)),
            fc2_b: Param::new("mi.dense.fc2.bias", Tensor::zeros(&[1])),
        }
    }

    /// pair maps [P, 128, h, w] -> mean over locations of per-location
    /// sigmoid scores -> [P, 1]
    pub fn forward(&self, g: &mut Graph<S>, pairs: VarId) -> VarId {
        let sh = g.value(pairs).shape().to_vec();
        let (p, h, w) = (sh[0], sh[2], sh[3]);
        let rows = g.channels_to_rows(pairs); // [P*h*w, 128]
        let (w1, b1) = (g.leaf_param(&self.fc1_w), g.leaf_param(&self.fc1_b));
        let y = g.linear(rows, w1, b1);
        let y = g.relu(y);
        let (w2, b2) = (g.leaf_param(&self.fc2_w), g.leaf_param(&self.fc2_b));
        let y = g.linear(y, w2, b2); // [P*h*w, 1]
        let y = g.sigmoid(y);
        let y = g.reshape(y, &[p, 1, h, w]);
        g.global_avg_pool(y) // [P, 1]
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.fc1_w);
        f(&mut self.fc1_b);
        f(&mut self.fc2_w);
        f(&mut self.fc2_b);
    }
}

/// Spec-level helpers on single feature maps, used by tests and the probes.
/// The batched episode path goes through the same graph ops.
pub mod ops {
    use super::*;

    /// norm(F) for one [C, D] map: subtract the global mean, divide by the
    /// global std, divide by the Frobenius norm of the result.
    pub fn normalize_map<S: Scalar>(g: &mut Graph<S>, f: VarId) -> VarId {
        let sh = g.value(f).shape().to_vec();
        assert_eq!(sh.len(), 2, "normalize_map expects [C,D]");
        let x = g.reshape(f, &[1, sh[0], sh[1]]);
        let y = g.normalize_maps(x);
        g.reshape(y, &[sh[0], sh[1]])
    }

    /// corr_D = norm(F)^T norm(F), for an already normalized [C,D] map.
    pub fn corr_spatial<S: Scalar>(g: &mut Graph<S>, fnorm: VarId) -> VarId {
        let sh = g.value(fnorm).shape().to_vec();
        let x = g.reshape(fnorm, &[1, sh[0], sh[1]]);
        let y = g.gram(x, false);
        g.reshape(y, &[sh[1], sh[1]])
    }

    /// corr_C = norm(F) norm(F)^T, for an already normalized [C,D] map.
    pub fn corr_channel<S: Scalar>(g: &mut Graph<S>, fnorm: VarId) -> VarId {
        let sh = g.value(fnorm).shape().to_vec();
        let x = g.reshape(fnorm, &[1, sh[0], sh[1]]);
        let y = g.gram(x, true);
        g.reshape(y, &[sh[0], sh[0]])
    }
}

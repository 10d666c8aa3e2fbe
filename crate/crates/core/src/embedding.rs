//! The Conv-64F embedding network shared by every stream.
//!
//! Four convolutional blocks with 64 filters each. Blocks 1-2:
//! conv 3x3 -> max pool 2x2 -> batch norm -> ReLU. Blocks 3-4 drop the pool.
//! Two pooling stages give a spatial downsample factor of 4: 84x84 inputs map
//! to 64x21x21 feature maps, 24x24 inputs to 64x6x6.

use crate::error::{Error, Result};
use crate::graph::{BnStats, Graph, VarId};
use crate::init;
use crate::param::{Param, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// conv 3x3 (padding 1) -> optional max pool -> batch norm -> ReLU
pub struct ConvBlock<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub bn: BnStats<S>,
    pub pool: bool,
    name: String,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, pool: bool, rng: &mut R) -> Self {
        ConvBlock {
            weight: Param::new(format!("{name}.conv.weight"), init::conv_weight(c_out, c_in, rng)),
            bias: Param::new(format!("{name}.conv.bias"), Tensor::zeros(&[c_out])),
            gamma: Param::new(format!("{name}.bn.gamma"), Tensor::ones(&[c_out])),
            beta: Param::new(format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
            bn: BnStats::new(c_out),
            pool,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: VarId, train: bool) -> VarId {
        let w = g.leaf_param(&self.weight);
        let b = g.leaf_param(&self.bias);
        let ga = g.leaf_param(&self.gamma);
        let be = g.leaf_param(&self.beta);
        let mut y = g.conv2d(x, w, b, 1);
        if self.pool {
            y = g.maxpool2(y);
        }
        let y = g.batchnorm(y, ga, be, &self.bn, train);
        g.relu(y)
    }

    /// weight + bias + bn affine terms
    pub fn param_elems(c_in: usize, c_out: usize) -> usize {
        c_out * c_in * 9 + c_out + 2 * c_out
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        f(&format!("{}.bn.running_mean", self.name), &mut self.bn.running_mean.borrow_mut());
        f(&format!("{}.bn.running_var", self.name), &mut self.bn.running_var.borrow_mut());
    }
}

pub struct EmbeddingNet<S> {
    blocks: Vec<ConvBlock<S>>,
    in_channels: usize,
}

pub const EMBED_CHANNELS: usize = 64;

impl<S: Scalar> EmbeddingNet<S> {
    pub fn new<R: Rng>(in_channels: usize, rng: &mut R) -> Self {
        let c = EMBED_CHANNELS;
        let blocks = vec![
            ConvBlock::new("embed.block1", in_channels, c, true, rng),
            ConvBlock::new("embed.block2", c, c, true, rng),
            ConvBlock::new("embed.block3", c, c, false, rng),
            ConvBlock::new("embed.block4", c, c, false, rng),
        ];
        let net = EmbeddingNet { blocks, in_channels };
        let expect = ConvBlock::<S>::param_elems(in_channels, c) + 3 * ConvBlock::<S>::param_elems(c, c);
        let mut total = 0;
        for b in &net.blocks {
            total += b.weight.tensor.numel()
                + b.bias.tensor.numel()
                + b.gamma.tensor.numel()
                + b.beta.tensor.numel();
        }
        assert_eq!(total, expect, "embedding parameter count drifted from closed form");
        net
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// images [N, channels, H, W] -> feature maps [N, 64, H/4, W/4]
    pub fn embed(&self, g: &mut Graph<S>, images: VarId, train: bool) -> Result<VarId> {
        let sh = g.value(images).shape().to_vec();
        if sh.len() != 4 || sh[1] != self.in_channels {
            return Err(Error::Config(format!(
                "embedding expects [N,{},H,W] images, got {:?}",
                self.in_channels, sh
            )));
        }
        if sh[2] % 4 != 0 || sh[3] % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} not divisible by 4",
                sh[2], sh[3]
            )));
        }
        let mut y = images;
        for b in &self.blocks {
            y = b.forward(g, y, train);
        }
        Ok(y)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        for b in &mut self.blocks {
            b.visit_buffers(f);
        }
    }
}

impl<S: Scalar> ParamSet<S> for EmbeddingNet<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        EmbeddingNet::visit_params(self, f)
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        EmbeddingNet::visit_buffers(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::rand_values;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn output_shapes_for_standard_resolutions() {
        let net = EmbeddingNet::<f64>::new(3, &mut rng());
        let mut g = Graph::new();
        let imgs = g.constant(Tensor::from_f64_slice(&[2, 3, 84, 84], &rand_values(2 * 3 * 84 * 84, 1)));
        let y = net.embed(&mut g, imgs, false).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 64, 21, 21]);

        let net = EmbeddingNet::<f64>::new(1, &mut rng());
        let mut g = Graph::new();
        let imgs = g.constant(Tensor::from_f64_slice(&[3, 1, 24, 24], &rand_values(3 * 24 * 24, 2)));
        let y = net.embed(&mut g, imgs, false).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 64, 6, 6]);
    }

    #[test]
    fn wrong_channel_count_is_config_error() {
        let net = EmbeddingNet::<f64>::new(3, &mut rng());
        let mut g = Graph::new();
        let imgs = g.constant(Tensor::<f64>::zeros(&[1, 1, 24, 24]));
        match net.embed(&mut g, imgs, false) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_equivariant() {
        let net = EmbeddingNet::<f64>::new(1, &mut rng());
        let a = rand_values(24 * 24, 3);
        let b = rand_values(24 * 24, 4);

        // two identical images in one batch give bit-identical features
        let mut g = Graph::new();
        let both: Vec<f64> = a.iter().chain(a.iter()).copied().collect();
        let imgs = g.constant(Tensor::from_f64_slice(&[2, 1, 24, 24], &both));
        let y = net.embed(&mut g, imgs, false).unwrap();
        let yd = g.value(y).data();
        let half = yd.len() / 2;
        assert_eq!(&yd[..half], &yd[half..]);

        // permuting the batch permutes the outputs, exactly
        let mut g1 = Graph::new();
        let ab: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let i1 = g1.constant(Tensor::from_f64_slice(&[2, 1, 24, 24], &ab));
        let y1 = net.embed(&mut g1, i1, false).unwrap();
        let mut g2 = Graph::new();
        let ba: Vec<f64> = b.iter().chain(a.iter()).copied().collect();
        let i2 = g2.constant(Tensor::from_f64_slice(&[2, 1, 24, 24], &ba));
        let y2 = net.embed(&mut g2, i2, false).unwrap();
        let d1 = g1.value(y1).data();
        let d2 = g2.value(y2).data();
        assert_eq!(&d1[..half], &d2[half..]);
        assert_eq!(&d1[half..], &d2[..half]);
    }

    #[test]
    fn aggregate_shots_contract() {
        // K=1 returns the map unchanged; identical maps double; K=5 matches a loop
        let mut g = Graph::<f64>::new();
        let m = rand_values(2 * 3 * 4, 5);
        let x = g.constant(Tensor::from_f64_slice(&[1, 2, 3, 4], &m));
        let y = g.aggregate_shots(x, 1, false);
        assert_eq!(g.value(y).data(), &m[..]);

        let two: Vec<f64> = m.iter().chain(m.iter()).copied().collect();
        let x = g.constant(Tensor::from_f64_slice(&[2, 2, 3, 4], &two));
        let y = g.aggregate_shots(x, 2, false);
        for (got, want) in g.value(y).data().iter().zip(&m) {
            assert!((got - 2.0 * want).abs() < 1e-15);
        }

        let five = rand_values(5 * 24, 6);
        let x = g.constant(Tensor::from_f64_slice(&[5, 2, 3, 4], &five));
        let y = g.aggregate_shots(x, 5, false);
        for i in 0..24 {
            let want: f64 = (0..5).map(|k| five[k * 24 + i]).sum();
            assert!((g.value(y).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "K must be >= 1")]
    fn aggregate_empty_class_panics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::<f64>::zeros(&[2, 2]));
        let _ = g.aggregate_shots(x, 0, false);
    }

    #[test]
    fn embedding_channel_count_is_64_and_param_count_checked() {
        // construction asserts the closed-form parameter count internally
        let mut net = EmbeddingNet::<f64>::new(1, &mut rng());
        assert_eq!(net.total_param_elems(), 64 * 9 + 64 + 128 + 3 * (64 * 64 * 9 + 64 + 128));
        let mut g = Graph::new();
        let imgs = g.constant(Tensor::from_f64_slice(&[1, 1, 8, 8], &rand_values(64, 8)));
        let y = net.embed(&mut g, imgs, false).unwrap();
        assert_eq!(g.value(y).shape()[1], 64);
    }
}

//! Small convolutional feature extractor.
//!
//! Each block is `conv3×3 (pad 1) → bias → relu → 2×2 average downsample`.
//! The final block may skip its downsample (higher-resolution maps for the
//! attention stream) and its relu (signed responses, so a sigmoid gate over
//! them can reach values below one half).

use serde::{Deserialize, Serialize};
use zsl_tensor::{Graph, Rng, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamVisitor;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub channel_widths: Vec<usize>,
    #[serde(default = "yes")]
    pub pool_final: bool,
    #[serde(default = "yes")]
    pub relu_final: bool,
}

impl BackboneConfig {
    pub fn new(input_size: usize, channel_widths: Vec<usize>) -> Self {
        BackboneConfig {
            input_size,
            channel_widths,
            pool_final: true,
            relu_final: true,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channel_widths.last().copied().unwrap_or(0)
    }

    /// Side length of the final feature maps.
    pub fn output_extent(&self) -> usize {
        let pools = self.channel_widths.len() - usize::from(!self.pool_final);
        self.input_size >> pools
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return Err(Error::config("backbone needs at least one block of positive width"));
        }
        let pools = self.channel_widths.len() - usize::from(!self.pool_final);
        if self.input_size % (1 << pools) != 0 {
            return Err(Error::config(format!(
                "input size {} is not divisible by 2^{pools}",
                self.input_size
            )));
        }
        if self.output_extent() < 4 {
            return Err(Error::config(format!(
                "final feature maps would be {0}x{0}; at least 4x4 is required",
                self.output_extent()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Parameter handles of a backbone recorded on a graph.
pub struct BoundBackbone {
    kernels: Vec<Var>,
    biases: Vec<Var>,
}

impl Backbone {
    /// Fan-in scaled normal kernels (std = sqrt(2 / fan_in)), zero biases.
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for &w in &config.channel_widths {
            let fan_in = (cin * 9) as f64;
            kernels.push(Tensor::randn(&[w, cin, 3, 3], (2.0 / fan_in).sqrt(), rng));
            biases.push(Tensor::zeros(&[w]));
            cin = w;
        }
        Ok(Backbone {
            config,
            kernels,
            biases,
        })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for &w in &config.channel_widths {
            kernels.push(Tensor::zeros(&[w, cin, 3, 3]));
            biases.push(Tensor::zeros(&[w]));
            cin = w;
        }
        Ok(Backbone {
            config,
            kernels,
            biases,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, (k, b)) in self.kernels.iter_mut().zip(&mut self.biases).enumerate() {
            v.visit(&format!("{prefix}.conv{i}.kernel"), k);
            v.visit(&format!("{prefix}.conv{i}.bias"), b);
        }
    }

    /// Registers the parameters on `g`; trainable when `train` is set.
    pub fn bind(&self, g: &mut Graph, prefix: &str, train: bool) -> Result<BoundBackbone> {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            if train {
                kernels.push(g.param(format!("{prefix}.conv{i}.kernel"), k)?);
                biases.push(g.param(format!("{prefix}.conv{i}.bias"), b)?);
            } else {
                kernels.push(g.constant(k.clone())?);
                biases.push(g.constant(b.clone())?);
            }
        }
        Ok(BoundBackbone { kernels, biases })
    }

    /// Feature maps [N,C,H',W'] of `images` [N,3,S,S].
    pub fn forward_features(&self, g: &mut Graph, bound: &BoundBackbone, images: Var) -> Result<Var> {
        let shape = g.shape(images);
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::config(format!(
                "backbone expects images [N,3,{s},{s}], got {shape:?}"
            )));
        }
        let last = self.kernels.len() - 1;
        let mut h = images;
        for (i, (&k, &b)) in bound.kernels.iter().zip(&bound.biases).enumerate() {
            h = g.conv2d(h, k, 1, 1)?;
            h = g.add_channel_bias(h, b)?;
            if i < last || self.config.relu_final {
                h = g.relu(h)?;
            }
            if i < last || self.config.pool_final {
                h = g.avg_pool2(h)?;
            }
        }
        Ok(h)
    }

    /// θ(x): global average of the feature maps, [N,C].
    pub fn forward_vector(&self, g: &mut Graph, bound: &BoundBackbone, images: Var) -> Result<Var> {
        let f = self.forward_features(g, bound, images)?;
        Ok(g.global_avg_pool(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use zsl_tensor::{grad_check, seeded_rng};

    #[test]
    fn zero_backbone_gives_zero_features() {
        let bb = Backbone::zeros(BackboneConfig::new(16, vec![4, 4])).unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g, "bb", false).unwrap();
        let x = g.constant(Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        let f = bb.forward_features(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(f), &[2, 4, 4, 4]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_three_blocks() {
        let cfg = BackboneConfig::new(64, vec![16, 32, 32]);
        assert_eq!(cfg.output_extent(), 8);
        let bb = Backbone::init(cfg, &mut seeded_rng(0)).unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g, "bb", false).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let f = bb.forward_features(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(f), &[1, 32, 8, 8]);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let bb = Backbone::init(BackboneConfig::new(16, vec![4]), &mut seeded_rng(0)).unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g, "bb", false).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        assert!(bb.forward_features(&mut g, &b, x).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::new(16, vec![4, 4, 4]).validate().is_err());
        assert!(BackboneConfig::new(16, vec![]).validate().is_err());
        let mut c = BackboneConfig::new(16, vec![4, 4]);
        c.pool_final = false;
        assert_eq!(c.output_extent(), 8);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = BackboneConfig::new(16, vec![4, 4]);
        let a = Backbone::init(cfg.clone(), &mut seeded_rng(3)).unwrap();
        let b = Backbone::init(cfg.clone(), &mut seeded_rng(3)).unwrap();
        let c = Backbone::init(cfg, &mut seeded_rng(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn kernel_std_matches_fan_in_scaling() {
        // 16→16 channels, 3×3: 2304 draws per kernel; pool several seeds
        let cfg = BackboneConfig::new(16, vec![16, 16]);
        let mut vals = Vec::new();
        for seed in 0..5 {
            let bb = Backbone::init(cfg.clone(), &mut seeded_rng(seed)).unwrap();
            vals.extend_from_slice(bb.kernels()[1].data());
        }
        assert!(vals.len() >= 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let expected = (2.0 / (16.0 * 9.0) as f64).sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.2);
    }

    #[test]
    fn gradient_of_mean_features_wrt_pixels() {
        let mut cfg = BackboneConfig::new(8, vec![3, 4]);
        cfg.pool_final = false;
        let bb = Backbone::init(cfg, &mut seeded_rng(1)).unwrap();
        let x = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut seeded_rng(2));
        let err = grad_check(
            |g, v| {
                let b = bb.bind(g, "bb", false)?;
                let f = bb.forward_features(g, &b, v)?;
                g.mean(f)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

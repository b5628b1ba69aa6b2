//! The full model: attention subnet, per-part crop nets, one backbone per
//! stream (whole image plus each part), per-stream embedding matrices and
//! class centers. Also the checkpoint format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zsl_tensor::{load_tensor, save_tensor, Graph, Rng, Tensor, Var};

use crate::attention::{self, AttentionHead, BoundHead, MultiAttentionConfig};
use crate::backbone::{Backbone, BackboneConfig, BoundBackbone};
use crate::cropping::{self, BoundCropNet, CropMode, CropNet};
use crate::embedding::{self, ClassCenters, EmbeddingMatrix, JointLossWeights, NegativeMode};
use crate::error::{Error, Result};
use crate::params::ParamVisitor;
use crate::synth::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartSource {
    /// Boxes regressed from attention maps.
    #[default]
    Attention,
    /// Uniformly placed boxes of a quarter of the image side.
    Random,
    /// Whole-image stream only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Softmax,
    Cct,
    #[default]
    Combined,
}

fn d_crop_hidden() -> usize {
    32
}
fn d_steepness() -> f64 {
    cropping::DEFAULT_STEEPNESS
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the input images.
    pub image_size: usize,
    /// Backbone of the attention subnet; its input is the full image.
    pub attention_backbone: BackboneConfig,
    /// Backbone of each embedding stream; its input size is the side that
    /// the whole image and the part crops are resampled to.
    pub stream_backbone: BackboneConfig,
    #[serde(default)]
    pub attention: MultiAttentionConfig,
    #[serde(default = "d_crop_hidden")]
    pub crop_hidden: usize,
    #[serde(default = "d_steepness")]
    pub crop_steepness: f64,
    #[serde(default)]
    pub crop_mode: CropMode,
    #[serde(default)]
    pub parts: PartSource,
    #[serde(default)]
    pub shared_backbone: bool,
    #[serde(default)]
    pub loss: LossMode,
    #[serde(default)]
    pub weights: JointLossWeights,
    #[serde(default)]
    pub negatives: NegativeMode,
    /// Triplet loss per stream (summed) instead of on the stream mean.
    #[serde(default)]
    pub cct_per_stream: bool,
    #[serde(default = "yes")]
    pub ma_loss: bool,
    /// Keep the attention backbone and heads fixed during joint training.
    #[serde(default)]
    pub freeze_attention: bool,
    /// Keep the crop nets fixed during joint training.
    #[serde(default = "yes")]
    pub freeze_crops: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut attention_backbone = BackboneConfig::new(32, vec![8, 16]);
        attention_backbone.pool_final = false;
        attention_backbone.relu_final = false;
        ModelConfig {
            image_size: 32,
            attention_backbone,
            stream_backbone: BackboneConfig::new(16, vec![8, 16]),
            attention: MultiAttentionConfig::default(),
            crop_hidden: d_crop_hidden(),
            crop_steepness: d_steepness(),
            crop_mode: CropMode::Window,
            parts: PartSource::Attention,
            shared_backbone: false,
            loss: LossMode::Combined,
            weights: JointLossWeights::default(),
            negatives: NegativeMode::Hardest,
            cct_per_stream: false,
            ma_loss: true,
            freeze_attention: false,
            freeze_crops: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention_backbone.validate()?;
        self.stream_backbone.validate()?;
        self.attention.validate()?;
        self.weights.validate()?;
        if self.attention_backbone.input_size != self.image_size {
            return Err(Error::config(format!(
                "attention backbone input {} differs from image size {}",
                self.attention_backbone.input_size, self.image_size
            )));
        }
        if self.stream_backbone.input_size > self.image_size {
            return Err(Error::config("stream input must not exceed the image size"));
        }
        if !(self.crop_steepness > 0.0) || self.crop_hidden == 0 {
            return Err(Error::config("crop steepness and hidden width must be positive"));
        }
        if (self.image_size as f64) / 8.0 < cropping::MIN_SIDE {
            return Err(Error::config("image too small for the smallest crop window"));
        }
        Ok(())
    }

    pub fn num_parts(&self) -> usize {
        match self.parts {
            PartSource::None => 0,
            _ => self.attention.num_parts,
        }
    }

    pub fn num_streams(&self) -> usize {
        1 + self.num_parts()
    }

    pub fn uses_attention(&self) -> bool {
        self.parts == PartSource::Attention
    }

    /// Effective `(α1, α2)` after the loss mode.
    pub fn alphas(&self) -> (f64, f64) {
        match self.loss {
            LossMode::Softmax => (self.weights.alpha1, 0.0),
            LossMode::Cct => (0.0, self.weights.alpha2),
            LossMode::Combined => (self.weights.alpha1, self.weights.alpha2),
        }
    }

    /// Fusion weight usable at inference for this loss mode.
    pub fn inference_uses_scores(&self) -> bool {
        self.loss != LossMode::Cct
    }
}

/// Which parameter groups are trainable in a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub attention: bool,
    pub crops: bool,
    pub streams: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        attention: false,
        crops: false,
        streams: false,
        head: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub num_seen: usize,
    pub semantic_dim: usize,
    pub attention_backbone: Backbone,
    pub heads: Vec<AttentionHead>,
    pub crop_nets: Vec<CropNet>,
    pub stream_backbones: Vec<Backbone>,
    pub embeddings: Vec<EmbeddingMatrix>,
    pub centers: ClassCenters,
}

pub struct BoundModel {
    pub attention_backbone: Option<BoundBackbone>,
    pub heads: Vec<BoundHead>,
    pub crops: Vec<BoundCropNet>,
    pub streams: Vec<BoundBackbone>,
    pub embeddings: Vec<Var>,
    pub centers: Var,
}

/// Graph outputs of one forward pass.
pub struct ForwardOut {
    /// Per part, [N,h,w].
    pub maps: Vec<Var>,
    /// Per part, [N,3] in pixels.
    pub boxes: Vec<Var>,
    /// Per stream, [N,d].
    pub phis: Vec<Var>,
}

pub struct LossOut {
    pub total: Var,
    pub ma: Option<Var>,
    pub cls: Var,
    pub cct: Var,
}

impl Model {
    /// `seen_semantics` [num_seen, d] seeds the class centers.
    pub fn init(config: ModelConfig, seen_semantics: &Tensor, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (num_seen, semantic_dim) = (seen_semantics.shape()[0], seen_semantics.shape()[1]);
        let attention_backbone = Backbone::init(config.attention_backbone.clone(), rng)?;
        let c = config.attention_backbone.feature_dim();
        let hidden = config.attention.hidden_width(c);
        let parts = if config.uses_attention() { config.num_parts() } else { 0 };
        let heads = (0..parts)
            .map(|i| AttentionHead::init(i, c, hidden, rng))
            .collect();
        let side = config.attention_backbone.output_extent();
        let crop_nets = (0..parts)
            .map(|_| CropNet::init(side * side, config.crop_hidden, config.image_size, [0.5, 0.5, 0.25], rng))
            .collect::<Result<_>>()?;
        let backbones = if config.shared_backbone { 1 } else { config.num_streams() };
        let stream_backbones = (0..backbones)
            .map(|_| Backbone::init(config.stream_backbone.clone(), rng))
            .collect::<Result<_>>()?;
        let f = config.stream_backbone.feature_dim();
        let embeddings = (0..config.num_streams())
            .map(|_| EmbeddingMatrix::init(f, semantic_dim, rng))
            .collect();
        Ok(Model {
            config,
            num_seen,
            semantic_dim,
            attention_backbone,
            heads,
            crop_nets,
            stream_backbones,
            embeddings,
            centers: ClassCenters::from_semantics(seen_semantics),
        })
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        if self.config.uses_attention() {
            self.attention_backbone.visit("attn", v);
            for (i, h) in self.heads.iter_mut().enumerate() {
                h.visit(&format!("head{i}"), v);
            }
            for (i, c) in self.crop_nets.iter_mut().enumerate() {
                c.visit(&format!("crop{i}"), v);
            }
        }
        for (i, b) in self.stream_backbones.iter_mut().enumerate() {
            b.visit(&format!("stream{i}"), v);
        }
        for (i, e) in self.embeddings.iter_mut().enumerate() {
            e.visit(&format!("embed{i}"), v);
        }
        self.centers.visit("centers", v);
    }

    pub fn bind(&self, g: &mut Graph, t: Trainable) -> Result<BoundModel> {
        let attention = self.config.uses_attention();
        let attention_backbone = if attention {
            Some(self.attention_backbone.bind(g, "attn", t.attention)?)
        } else {
            None
        };
        let mut heads = Vec::new();
        let mut crops = Vec::new();
        if attention {
            for (i, h) in self.heads.iter().enumerate() {
                heads.push(h.bind(g, &format!("head{i}"), t.attention)?);
            }
            for (i, c) in self.crop_nets.iter().enumerate() {
                crops.push(c.bind(g, &format!("crop{i}"), t.crops)?);
            }
        }
        let mut streams = Vec::new();
        for (i, b) in self.stream_backbones.iter().enumerate() {
            streams.push(b.bind(g, &format!("stream{i}"), t.streams)?);
        }
        let mut embeddings = Vec::new();
        for (i, e) in self.embeddings.iter().enumerate() {
            embeddings.push(e.bind(g, &format!("embed{i}"), t.head)?);
        }
        let centers = self.centers.bind(g, "centers", t.head)?;
        Ok(BoundModel {
            attention_backbone,
            heads,
            crops,
            streams,
            embeddings,
            centers,
        })
    }

    /// Attention maps [N,h,w] per part.
    pub fn attention_maps(&self, g: &mut Graph, b: &BoundModel, images: Var) -> Result<Vec<Var>> {
        let bb = b
            .attention_backbone
            .as_ref()
            .ok_or_else(|| Error::config("model has no attention subnet"))?;
        let f = self.attention_backbone.forward_features(g, bb, images)?;
        let p = attention::channel_descriptor(g, f)?;
        let mut maps = Vec::new();
        for h in &b.heads {
            let a = attention::channel_attention(g, h, p)?;
            maps.push(attention::attention_map(g, f, a, self.config.attention.channel_mean)?);
        }
        Ok(maps)
    }

    /// Full forward pass. `random_boxes` supplies per-part [N,3] boxes when
    /// parts are random.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundModel,
        images: Var,
        random_boxes: Option<&[Tensor]>,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        let side = cfg.stream_backbone.input_size;
        let mut maps = Vec::new();
        let mut boxes = Vec::new();
        match cfg.parts {
            PartSource::Attention => {
                maps = self.attention_maps(g, b, images)?;
                for (net, (bound, &m)) in self.crop_nets.iter().zip(b.crops.iter().zip(&maps)) {
                    boxes.push(net.forward(g, bound, m)?);
                }
            }
            PartSource::Random => {
                let given = random_boxes.ok_or_else(|| Error::config("random parts need boxes"))?;
                for t in given.iter().take(cfg.num_parts()) {
                    boxes.push(g.constant(t.clone())?);
                }
                if boxes.len() != cfg.num_parts() {
                    return Err(Error::config("too few random part boxes"));
                }
            }
            PartSource::None => {}
        }
        let mut inputs = vec![if side == cfg.image_size {
            images
        } else {
            g.bilinear_resize(images, side, side)?
        }];
        for &t in &boxes {
            inputs.push(cropping::apply_crop(g, images, t, cfg.crop_steepness, side, cfg.crop_mode)?);
        }
        let mut phis = Vec::new();
        for (i, &x) in inputs.iter().enumerate() {
            let k = if cfg.shared_backbone { 0 } else { i };
            let theta = self.stream_backbones[k].forward_vector(g, &b.streams[k], x)?;
            phis.push(embedding::map_features(g, theta, b.embeddings[i])?);
        }
        Ok(ForwardOut { maps, boxes, phis })
    }

    /// Joint objective on a forward pass. `labels` index seen classes;
    /// `seen_semantics_t` is [d, num_seen].
    pub fn losses(&self, g: &mut Graph, b: &BoundModel, out: &ForwardOut, labels: &[usize], seen_semantics_t: Var) -> Result<LossOut> {
        let cfg = &self.config;
        let mut scores = Vec::new();
        for &phi in &out.phis {
            scores.push(embedding::scores_from_mapped(g, phi, seen_semantics_t)?);
        }
        let fused = embedding::fuse_scores(g, &scores)?;
        let cls = embedding::embedding_softmax_loss(g, fused, labels)?;
        let margin = cfg.weights.cct_margin;
        let cct = if cfg.cct_per_stream {
            let mut terms = Vec::new();
            for &phi in &out.phis {
                terms.push(embedding::class_center_triplet_loss(g, phi, b.centers, labels, margin, cfg.negatives)?);
            }
            g.add_n(&terms)?
        } else {
            let sum = g.add_n(&out.phis)?;
            let mean = g.scale(sum, 1.0 / out.phis.len() as f64)?;
            embedding::class_center_triplet_loss(g, mean, b.centers, labels, margin, cfg.negatives)?
        };
        let ma = if cfg.ma_loss && !out.maps.is_empty() {
            Some(attention::multi_attention_loss(g, &out.maps, &cfg.attention)?.total)
        } else {
            None
        };
        let (a1, a2) = cfg.alphas();
        let mut terms = vec![g.scale(cls, a1)?, g.scale(cct, a2)?];
        terms.extend(ma);
        let total = g.add_n(&terms)?;
        Ok(LossOut { total, ma, cls, cct })
    }

    /// Names and shapes of every parameter, in visiting order.
    pub fn param_shapes(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name: &str, t: &mut Tensor| out.push((name.to_string(), t.shape().to_vec())));
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    config: ModelConfig,
    num_seen: usize,
    semantic_dim: usize,
    seen_classes: Vec<String>,
    params: Vec<ParamEntry>,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

/// Writes one blob per parameter and a manifest; the manifest is renamed
/// into place last.
pub fn save_checkpoint(model: &Model, seen_classes: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut model = model.clone();
    let mut params = Vec::new();
    let mut err = None;
    model.visit(&mut |name: &str, t: &mut Tensor| {
        let file = format!("{}.sgmt", name.replace('.', "_"));
        let tmp = dir.join(format!("{file}.tmp"));
        let res = save_tensor(&tmp, t)
            .map_err(Error::from)
            .and_then(|_| fs::rename(&tmp, dir.join(&file)).map_err(Error::from));
        if let Err(e) = res {
            err.get_or_insert(e);
        }
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    });
    if let Some(e) = err {
        return Err(e);
    }
    let manifest = CheckpointManifest {
        version: 1,
        config: model.config.clone(),
        num_seen: model.num_seen,
        semantic_dim: model.semantic_dim,
        seen_classes: seen_classes.to_vec(),
        params,
    };
    write_atomic(&dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Loads a checkpoint; returns the model and the seen class names it was
/// trained on.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Vec<String>)> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(CHECKPOINT_MANIFEST).display())))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", m.version)));
    }
    let placeholder = Tensor::zeros(&[m.num_seen, m.semantic_dim]);
    let mut model = Model::init(m.config, &placeholder, &mut zsl_tensor::seeded_rng(0))?;
    let mut err = None;
    let mut seen = 0;
    model.visit(&mut |name: &str, t: &mut Tensor| {
        let Some(entry) = m.params.iter().find(|p| p.name == name) else {
            err.get_or_insert(Error::Checkpoint(format!("parameter {name} is missing")));
            return;
        };
        seen += 1;
        match load_tensor(dir.join(&entry.file)) {
            Ok(v) if v.shape() == t.shape() && entry.shape == t.shape() => *t = v,
            Ok(v) => {
                err.get_or_insert(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            Err(e) => {
                err.get_or_insert(Error::Checkpoint(format!("parameter {name}: {e}")));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != m.params.len() {
        return Err(Error::Checkpoint("checkpoint lists unknown parameters".into()));
    }
    Ok((model, m.seen_classes))
}

//! Staged training.
//!
//! * warm-up (optional): the attention backbone learns seen-class
//!   classification through a temporary linear classifier;
//! * stage A: channels are clustered by their peak positions and each
//!   attention head is pretrained to gate its cluster;
//! * stage B: each crop net is pretrained toward pseudo boxes centered at
//!   its map's peak;
//! * stage C: every parameter is trained jointly on the full objective with
//!   momentum SGD and plateau learning-rate decay.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use zsl_tensor::{seeded_rng, Graph, Rng, Tensor, TensorError};

use crate::attention::{self, ChannelClusters, MultiAttentionConfig};
use crate::cropping::{self, CropParams, PseudoBox};
use crate::error::{Error, Result};
use crate::inference::{argmax, cosine};
use crate::metrics;
use crate::model::{Model, ModelConfig, PartSource, Trainable};
use crate::optim::{Plateau, PlateauConfig, Sgd, SgdConfig};
use crate::params::ParamVisitor;
use crate::synth::{mix_seed, random_box_with, Split, ZslDataset};

fn d_batch() -> usize {
    32
}
fn d_init_batch() -> usize {
    64
}
fn d_head_steps() -> usize {
    200
}
fn d_attention_steps() -> usize {
    400
}
fn d_attention_lr() -> f64 {
    0.02
}
fn d_crop_steps() -> usize {
    500
}
fn d_head_lr() -> f64 {
    0.5
}
fn d_crop_lr() -> f64 {
    0.5
}
fn d_epochs() -> usize {
    30
}
fn d_warmup_epochs() -> usize {
    5
}
fn d_warmup_lr() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "d_warmup_lr")]
    pub warmup_lr: f64,
    /// Images whose channel peaks seed the k-means clustering.
    #[serde(default = "d_init_batch")]
    pub init_batch: usize,
    #[serde(default = "d_head_steps")]
    pub head_pretrain_steps: usize,
    #[serde(default = "d_head_lr")]
    pub head_pretrain_lr: f64,
    /// Steps of multi-attention-loss training of the attention subnet
    /// between head and crop pretraining; skipped without that loss. The
    /// first half uses compactness alone.
    #[serde(default = "d_attention_steps")]
    pub attention_pretrain_steps: usize,
    #[serde(default = "d_attention_lr")]
    pub attention_pretrain_lr: f64,
    #[serde(default = "d_crop_steps")]
    pub crop_pretrain_steps: usize,
    #[serde(default = "d_crop_lr")]
    pub crop_pretrain_lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: d_batch(),
            warmup_epochs: d_warmup_epochs(),
            warmup_lr: d_warmup_lr(),
            init_batch: d_init_batch(),
            head_pretrain_steps: d_head_steps(),
            head_pretrain_lr: d_head_lr(),
            attention_pretrain_steps: d_attention_steps(),
            attention_pretrain_lr: d_attention_lr(),
            crop_pretrain_steps: d_crop_steps(),
            crop_pretrain_lr: d_crop_lr(),
            epochs: d_epochs(),
            sgd: SgdConfig::default(),
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.init_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        for (name, v) in [
            ("lr", self.sgd.lr),
            ("warmup_lr", self.warmup_lr),
            ("head_pretrain_lr", self.head_pretrain_lr),
            ("attention_pretrain_lr", self.attention_pretrain_lr),
            ("crop_pretrain_lr", self.crop_pretrain_lr),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return Err(Error::config("momentum must lie in [0,1) and weight decay be >= 0"));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ma: f64,
    pub l_cls: f64,
    pub l_cct: f64,
    pub overlap: Option<f64>,
    pub val_mca: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub warmup_losses: Vec<f64>,
    pub clusters: Option<ChannelClusters>,
    pub head_pretrain_loss: Option<(f64, f64)>,
    pub attention_pretrain_loss: Option<(f64, f64)>,
    pub crop_pretrain_loss: Option<(f64, f64)>,
    pub epochs: Vec<EpochRecord>,
}

/// Per-part random boxes of a quarter of the image side, one per row.
pub fn random_part_boxes(n: usize, image_size: usize, parts: usize, rng: &mut Rng) -> Vec<Tensor> {
    let side = image_size as f64 / 4.0;
    let mut per_part: Vec<Vec<CropParams>> = vec![Vec::with_capacity(n); parts];
    for _ in 0..n {
        for p in per_part.iter_mut() {
            let b = random_box_with(image_size, side, rng);
            p.push(CropParams::new(b.cx, b.cy, b.side));
        }
    }
    per_part.iter().map(|p| CropParams::to_tensor(p)).collect()
}

/// Random boxes for evaluation, keyed by sample index so that any batching
/// gives the same boxes.
pub fn eval_random_boxes(indices: &[usize], image_size: usize, parts: usize, seed: u64) -> Vec<Tensor> {
    let mut per_part = vec![Vec::new(); parts];
    for &i in indices {
        let mut rng = seeded_rng(mix_seed(seed ^ 0x5EED_B0C5, i as u64));
        let boxes = random_part_boxes(1, image_size, parts, &mut rng);
        for (p, t) in boxes.iter().enumerate() {
            per_part[p].extend(CropParams::from_rows(t));
        }
    }
    per_part.iter().map(|p| CropParams::to_tensor(p)).collect()
}

fn apply_step(model: &mut Model, sgd: &mut Sgd, g: &Graph) -> Result<()> {
    let grads = g.param_grads();
    sgd.step(&grads, |v: &mut dyn ParamVisitor| model.visit(v))
}

fn local_labels(ds: &ZslDataset, labels: &[usize]) -> Result<Vec<usize>> {
    let seen = ds.seen();
    labels
        .iter()
        .map(|&y| {
            seen.iter()
                .position(|&s| s == y)
                .ok_or_else(|| Error::data(format!("label {y} is not a seen class")))
        })
        .collect()
}

fn seen_semantics_t(ds: &ZslDataset) -> Result<Tensor> {
    Ok(ds.semantics().select_rows(&ds.seen()).transpose2()?)
}

fn diagnose(stage: &str, step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Training(format!(
            "{stage}, step {step}: non-finite value produced by {op}; try a lower learning rate"
        )),
        Error::Training(m) => Error::Training(format!("{stage}, step {step}: {m}")),
        other => other,
    }
}

fn batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn sample_batch(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.truncate(batch.min(n));
    order
}

/// Seen-class classification of the attention backbone through a temporary
/// linear classifier.
fn warmup(model: &mut Model, ds: &ZslDataset, cfg: &TrainConfig, rng: &mut Rng, report: &mut TrainReport) -> Result<()> {
    let c = model.config.attention_backbone.feature_dim();
    let num_seen = model.num_seen;
    let mut classifier = Tensor::randn(&[num_seen, c], (1.0 / c as f64).sqrt(), rng);
    let mut bias = Tensor::zeros(&[num_seen]);
    let mut sgd = Sgd::new(SgdConfig {
        lr: cfg.warmup_lr,
        ..cfg.sgd
    });
    let labels = local_labels(ds, &ds.train.labels)?;
    for epoch in 0..cfg.warmup_epochs {
        let mut total = 0.0;
        let parts = batches(ds.train.len(), cfg.batch_size, rng);
        for (step, idx) in parts.iter().enumerate() {
            let mut g = Graph::new();
            let bb = model.attention_backbone.bind(&mut g, "attn", true)?;
            let w = g.param("warmup.w", &classifier)?;
            let b = g.param("warmup.b", &bias)?;
            let x = g.constant(ds.train.batch(idx))?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let res: Result<f64> = (|| {
                let mut f = model.attention_backbone.forward_features(&mut g, &bb, x)?;
                if !model.config.attention_backbone.relu_final {
                    f = g.relu(f)?;
                }
                let v = g.global_avg_pool(f)?;
                let logits = g.fully_connected(v, w, Some(b))?;
                let loss = g.softmax_cross_entropy(logits, &y)?;
                g.backward(loss)?;
                Ok(g.value(loss).item())
            })();
            total += res.map_err(|e| diagnose("warm-up", epoch * parts.len() + step, e))?;
            let grads = g.param_grads();
            sgd.step(&grads, |v: &mut dyn ParamVisitor| {
                model.attention_backbone.visit("attn", v);
                v.visit("warmup.w", &mut classifier);
                v.visit("warmup.b", &mut bias);
            })?;
        }
        report.warmup_losses.push(total / parts.len() as f64);
    }
    Ok(())
}

fn stage_a(model: &mut Model, ds: &ZslDataset, cfg: &TrainConfig, rng: &mut Rng, report: &mut TrainReport) -> Result<()> {
    let parts = model.config.attention.num_parts;
    let idx = sample_batch(ds.train.len(), cfg.init_batch, rng);
    let mut g = Graph::new();
    let bb = model.attention_backbone.bind(&mut g, "attn", false)?;
    let x = g.constant(ds.train.batch(&idx))?;
    let f = model.attention_backbone.forward_features(&mut g, &bb, x)?;
    let peaks = attention::channel_peak_positions(g.value(f))?;
    let clusters = attention::init_channel_clusters(&peaks, parts, cfg.seed)?;

    let mut sgd = Sgd::new(SgdConfig {
        lr: cfg.head_pretrain_lr,
        ..cfg.sgd
    });
    let c = model.config.attention_backbone.feature_dim();
    let mut first = None;
    let mut last = 0.0;
    for step in 0..cfg.head_pretrain_steps {
        let idx = sample_batch(ds.train.len(), cfg.batch_size, rng);
        let n = idx.len();
        let mut g = Graph::new();
        let b = model.bind(
            &mut g,
            Trainable {
                attention: false,
                ..Trainable::NONE
            },
        )?;
        let heads: Vec<_> = model
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| h.bind(&mut g, &format!("head{i}"), true))
            .collect::<Result<_>>()?;
        let x = g.constant(ds.train.batch(&idx))?;
        let res: Result<f64> = (|| {
            let f = model
                .attention_backbone
                .forward_features(&mut g, b.attention_backbone.as_ref().expect("attention"), x)?;
            let p = attention::channel_descriptor(&mut g, f)?;
            let mut terms = Vec::new();
            for (i, h) in heads.iter().enumerate() {
                let z = attention::channel_attention_logits(&mut g, h, p)?;
                let target = Tensor::new(&[n, c], clusters.init_targets[i].repeat(n))?;
                terms.push(attention::bce_with_logits(&mut g, z, &target)?);
            }
            let loss = g.add_n(&terms)?;
            g.backward(loss)?;
            Ok(g.value(loss).item())
        })();
        last = res.map_err(|e| diagnose("attention-head pretraining", step, e))?;
        first.get_or_insert(last);
        let grads = g.param_grads();
        sgd.step(&grads, |v: &mut dyn ParamVisitor| {
            for (i, h) in model.heads.iter_mut().enumerate() {
                h.visit(&format!("head{i}"), v);
            }
        })?;
    }
    report.clusters = Some(clusters);
    report.head_pretrain_loss = first.map(|f| (f, last));
    Ok(())
}

fn refine_attention(model: &mut Model, ds: &ZslDataset, cfg: &TrainConfig, rng: &mut Rng, report: &mut TrainReport) -> Result<()> {
    let mut sgd = Sgd::new(SgdConfig {
        lr: cfg.attention_pretrain_lr,
        ..cfg.sgd
    });
    let trainable = Trainable {
        attention: true,
        ..Trainable::NONE
    };
    let compact_only = MultiAttentionConfig {
        lambda: 0.0,
        ..model.config.attention.clone()
    };
    let mut first = None;
    let mut last = 0.0;
    for step in 0..cfg.attention_pretrain_steps {
        let idx = sample_batch(ds.train.len(), cfg.batch_size, rng);
        let mut g = Graph::new();
        let b = model.bind(&mut g, trainable)?;
        let res: Result<f64> = (|| {
            let x = g.constant(ds.train.batch(&idx))?;
            let maps = model.attention_maps(&mut g, &b, x)?;
            let acfg = if 2 * step < cfg.attention_pretrain_steps {
                &compact_only
            } else {
                &model.config.attention
            };
            let loss = attention::multi_attention_loss(&mut g, &maps, acfg)?.total;
            g.backward(loss)?;
            Ok(g.value(loss).item())
        })();
        last = res.map_err(|e| diagnose("attention pretraining", step, e))?;
        first.get_or_insert(last);
        apply_step(model, &mut sgd, &g).map_err(|e| diagnose("attention pretraining", step, e))?;
    }
    report.attention_pretrain_loss = first.map(|f| (f, last));
    Ok(())
}

/// Attention maps of a split under the current weights, per part [N,h,w].
pub fn split_maps(model: &Model, split: &Split, batch: usize) -> Result<Vec<Tensor>> {
    let parts = model.heads.len();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); parts];
    let mut hw = (0, 0);
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, Trainable::NONE)?;
        let x = g.constant(split.batch(idx))?;
        let maps = model.attention_maps(&mut g, &b, x)?;
        for (p, &m) in maps.iter().enumerate() {
            let s = g.shape(m);
            hw = (s[1], s[2]);
            data[p].extend_from_slice(g.value(m).data());
        }
    }
    data.into_iter()
        .map(|d| Ok(Tensor::new(&[split.len(), hw.0, hw.1], d)?))
        .collect()
}

fn stage_b(model: &mut Model, ds: &ZslDataset, cfg: &TrainConfig, rng: &mut Rng, report: &mut TrainReport) -> Result<()> {
    let maps = split_maps(model, &ds.train, cfg.batch_size)?;
    let size = model.config.image_size;
    let (h, w) = (maps[0].shape()[1], maps[0].shape()[2]);
    let pseudo: Vec<Vec<PseudoBox>> = maps
        .iter()
        .map(|m| {
            m.data()
                .chunks(h * w)
                .map(|v| cropping::pseudo_box_from(v, h, w, size))
                .collect()
        })
        .collect();
    let mut sgd = Sgd::new(SgdConfig {
        lr: cfg.crop_pretrain_lr,
        ..cfg.sgd
    });
    let mut first = None;
    let mut last = 0.0;
    for step in 0..cfg.crop_pretrain_steps {
        let idx = sample_batch(ds.train.len(), cfg.batch_size, rng);
        let mut g = Graph::new();
        let nets: Vec<_> = model
            .crop_nets
            .iter()
            .enumerate()
            .map(|(i, c)| c.bind(&mut g, &format!("crop{i}"), true))
            .collect::<Result<_>>()?;
        let res: Result<f64> = (|| {
            let mut terms = Vec::new();
            for (p, (net, bound)) in model.crop_nets.iter().zip(&nets).enumerate() {
                let sel = maps[p].select_rows(&idx);
                let m = g.constant(sel)?;
                let t = net.forward(&mut g, bound, m)?;
                let targets: Vec<PseudoBox> = idx.iter().map(|&i| pseudo[p][i]).collect();
                terms.push(cropping::pretrain_crop_loss(&mut g, t, &targets, size)?);
            }
            let loss = g.add_n(&terms)?;
            g.backward(loss)?;
            Ok(g.value(loss).item())
        })();
        last = res.map_err(|e| diagnose("crop pretraining", step, e))?;
        first.get_or_insert(last);
        let grads = g.param_grads();
        sgd.step(&grads, |v: &mut dyn ParamVisitor| {
            for (i, c) in model.crop_nets.iter_mut().enumerate() {
                c.visit(&format!("crop{i}"), v);
            }
        })?;
    }
    report.crop_pretrain_loss = first.map(|f| (f, last));
    Ok(())
}

/// Mapped features and boxes of a split under the current weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    /// Concatenated per-stream mapped features, [N, streams·d].
    pub features: Tensor,
    /// Per sample, per part.
    pub boxes: Vec<Vec<CropParams>>,
    /// Per part, [N,h,w]; empty without attention.
    pub maps: Vec<Tensor>,
}

pub fn embed_split(model: &Model, split: &Split, batch: usize, seed: u64) -> Result<Embedded> {
    let cfg = &model.config;
    let streams = cfg.num_streams();
    let d = model.semantic_dim;
    let parts = cfg.num_parts();
    let mut feats = Vec::with_capacity(split.len() * streams * d);
    let mut boxes = Vec::with_capacity(split.len());
    let mut map_data: Vec<Vec<f64>> = vec![Vec::new(); model.heads.len()];
    let mut hw = (0, 0);
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, Trainable::NONE)?;
        let x = g.constant(split.batch(idx))?;
        let random = (cfg.parts == PartSource::Random).then(|| eval_random_boxes(idx, cfg.image_size, parts, seed));
        let out = model.forward(&mut g, &b, x, random.as_deref())?;
        for r in 0..idx.len() {
            for &phi in &out.phis {
                feats.extend_from_slice(g.value(phi).row(r));
            }
        }
        let per_part: Vec<Vec<CropParams>> = out.boxes.iter().map(|&t| CropParams::from_rows(g.value(t))).collect();
        for r in 0..idx.len() {
            boxes.push(per_part.iter().map(|p| p[r]).collect());
        }
        for (p, &m) in out.maps.iter().enumerate() {
            let s = g.shape(m);
            hw = (s[1], s[2]);
            map_data[p].extend_from_slice(g.value(m).data());
        }
    }
    let maps = map_data
        .into_iter()
        .map(|d| Tensor::new(&[split.len(), hw.0, hw.1], d))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Embedded {
        features: Tensor::new(&[split.len(), streams * d], feats)?,
        boxes,
        maps,
    })
}

/// Seen-class predictions (class ids) for embedded features: fused
/// compatibility scores, or cosine to the class centers for triplet-only
/// models.
pub fn predict_seen(model: &Model, ds: &ZslDataset, features: &Tensor) -> Vec<usize> {
    let seen = ds.seen();
    let sem = ds.semantics();
    let d = model.semantic_dim;
    let streams = model.config.num_streams();
    (0..features.shape()[0])
        .map(|n| {
            let row = features.row(n);
            let mut mean = vec![0.0; d];
            for s in 0..streams {
                mean.iter_mut().zip(&row[s * d..(s + 1) * d]).for_each(|(a, v)| *a += v);
            }
            let scores: Vec<f64> = seen
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    if model.config.inference_uses_scores() {
                        mean.iter().zip(sem.row(c)).map(|(a, b)| a * b).sum()
                    } else {
                        cosine(&mean, model.centers.c.row(i))
                    }
                })
                .collect();
            seen[argmax(&scores)]
        })
        .collect()
}

fn overlap_of(g: &Graph, maps: &[zsl_tensor::Var]) -> Result<Option<f64>> {
    if maps.len() < 2 {
        return Ok(None);
    }
    let values: Vec<&[f64]> = maps.iter().map(|&m| g.value(m).data()).collect();
    Ok(Some(attention::attention_overlap(&values)?))
}

fn stage_c(
    model: &mut Model,
    ds: &ZslDataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    report: &mut TrainReport,
    on_epoch: &mut dyn FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<()> {
    let sem_t = seen_semantics_t(ds)?;
    let labels = local_labels(ds, &ds.train.labels)?;
    let mut sgd = Sgd::new(cfg.sgd);
    let mut plateau = Plateau::new(cfg.plateau);
    let trainable = Trainable {
        attention: !model.config.freeze_attention,
        crops: !model.config.freeze_crops,
        streams: true,
        head: true,
    };
    let parts = model.config.num_parts();
    for epoch in 0..cfg.epochs {
        let order = batches(ds.train.len(), cfg.batch_size, rng);
        let (mut s_ma, mut s_cls, mut s_cct, mut s_total) = (0.0, 0.0, 0.0, 0.0);
        let (mut s_overlap, mut n_overlap) = (0.0, 0usize);
        for (step, idx) in order.iter().enumerate() {
            let random = (model.config.parts == PartSource::Random)
                .then(|| random_part_boxes(idx.len(), model.config.image_size, parts, rng));
            let mut g = Graph::new();
            let b = model.bind(&mut g, trainable)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let res: Result<(f64, f64, f64, f64, Option<f64>)> = (|| {
                let st = g.constant(sem_t.clone())?;
                let x = g.constant(ds.train.batch(idx))?;
                let out = model.forward(&mut g, &b, x, random.as_deref())?;
                let l = model.losses(&mut g, &b, &out, &y, st)?;
                g.backward(l.total)?;
                let ov = overlap_of(&g, &out.maps)?;
                Ok((
                    g.value(l.total).item(),
                    l.ma.map_or(0.0, |m| g.value(m).item()),
                    g.value(l.cls).item(),
                    g.value(l.cct).item(),
                    ov,
                ))
            })();
            let (total, ma, cls, cct, ov) =
                res.map_err(|e| diagnose(&format!("joint training epoch {epoch}"), step, e))?;
            apply_step(model, &mut sgd, &g).map_err(|e| diagnose(&format!("joint training epoch {epoch}"), step, e))?;
            s_total += total;
            s_ma += ma;
            s_cls += cls;
            s_cct += cct;
            if let Some(o) = ov {
                s_overlap += o;
                n_overlap += 1;
            }
        }
        let nb = order.len() as f64;
        let val = embed_split(model, &ds.val, cfg.batch_size.max(64), cfg.seed)?;
        let preds = predict_seen(model, ds, &val.features);
        let val_mca = metrics::mean_class_accuracy(&preds, &ds.val.labels)?;
        let loss = s_total / nb;
        let lr = plateau.observe(loss, sgd.lr());
        let record = EpochRecord {
            epoch,
            l_ma: s_ma / nb,
            l_cls: s_cls / nb,
            l_cct: s_cct / nb,
            overlap: (n_overlap > 0).then(|| s_overlap / n_overlap as f64),
            val_mca,
            loss,
            lr: sgd.lr(),
        };
        sgd.set_lr(lr);
        on_epoch(model, &record)?;
        report.epochs.push(record);
    }
    Ok(())
}

/// Fresh model for a dataset: class centers from the seen semantics,
/// weights drawn from `seed`.
pub fn init_model(config: ModelConfig, ds: &ZslDataset, seed: u64) -> Result<Model> {
    let seen = ds.semantics().select_rows(&ds.seen());
    Model::init(config, &seen, &mut seeded_rng(seed))
}

/// Runs every stage in order on the dataset's training split.
pub fn train(
    model: &mut Model,
    ds: &ZslDataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.image_size() != model.config.image_size {
        return Err(Error::config(format!(
            "dataset images are {}px but the model expects {}px",
            ds.image_size(),
            model.config.image_size
        )));
    }
    if ds.seen().len() != model.num_seen || ds.config.semantic_dim() != model.semantic_dim {
        return Err(Error::config("model class or semantic dimensions do not match the dataset"));
    }
    let mut rng = seeded_rng(mix_seed(cfg.seed, 0x7A11));
    let mut report = TrainReport::default();
    if model.config.uses_attention() {
        if cfg.warmup_epochs > 0 {
            warmup(model, ds, cfg, &mut rng, &mut report)?;
        }
        stage_a(model, ds, cfg, &mut rng, &mut report)?;
        if model.config.ma_loss {
            refine_attention(model, ds, cfg, &mut rng, &mut report)?;
        }
        stage_b(model, ds, cfg, &mut rng, &mut report)?;
    }
    stage_c(model, ds, cfg, &mut rng, &mut report, on_epoch)?;
    Ok(report)
}

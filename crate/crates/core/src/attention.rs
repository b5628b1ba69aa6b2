//! Multi-attention subnet.
//!
//! One small MLP head per part turns the pooled channel descriptor into a
//! channel gate `a_i`; the part's attention map is the sigmoid of the
//! gate-weighted channel sum. Heads are trained with a compactness term
//! (regression toward a Gaussian blob at the map's own peak) and a diversity
//! hinge that penalises co-activation with the other parts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zsl_tensor::{logistic, Backward, Graph, Rng, Tensor, Var};

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::params::ParamVisitor;

fn default_parts() -> usize {
    2
}
fn default_lambda() -> f64 {
    0.02
}
fn default_margin() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiAttentionConfig {
    #[serde(default = "default_parts")]
    pub num_parts: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Gaussian target width in map pixels; `None` means side / 8.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Head hidden width; `None` means C / 2.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Average instead of sum over channels before the map sigmoid.
    #[serde(default)]
    pub channel_mean: bool,
}

impl Default for MultiAttentionConfig {
    fn default() -> Self {
        MultiAttentionConfig {
            num_parts: default_parts(),
            lambda: default_lambda(),
            margin: default_margin(),
            sigma: None,
            hidden: None,
            channel_mean: false,
        }
    }
}

impl MultiAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_parts == 0 {
            return Err(Error::config("num_parts must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config(format!(
                "diversity margin must lie in [0,1), got {}",
                self.margin
            )));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::config(format!("sigma must be > 0, got {s}")));
            }
        }
        if self.hidden == Some(0) {
            return Err(Error::config("hidden width must be at least 1"));
        }
        Ok(())
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        self.hidden.unwrap_or((channels / 2).max(1))
    }

    pub fn sigma_for(&self, side: usize) -> f64 {
        self.sigma.unwrap_or(side as f64 / 8.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub part_index: usize,
    /// [D_hidden, C]
    pub w1: Tensor,
    /// [C, D_hidden]
    pub w2: Tensor,
}

pub struct BoundHead {
    pub w1: Var,
    pub w2: Var,
}

impl AttentionHead {
    pub fn init(part_index: usize, channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        AttentionHead {
            part_index,
            w1: Tensor::randn(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng),
            w2: Tensor::randn(&[channels, hidden], (1.0 / hidden as f64).sqrt(), rng),
        }
    }

    pub fn zeros(part_index: usize, channels: usize, hidden: usize) -> Self {
        AttentionHead {
            part_index,
            w1: Tensor::zeros(&[hidden, channels]),
            w2: Tensor::zeros(&[channels, hidden]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.w1"), &mut self.w1);
        v.visit(&format!("{prefix}.w2"), &mut self.w2);
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, train: bool) -> Result<BoundHead> {
        Ok(if train {
            BoundHead {
                w1: g.param(format!("{prefix}.w1"), &self.w1)?,
                w2: g.param(format!("{prefix}.w2"), &self.w2)?,
            }
        } else {
            BoundHead {
                w1: g.constant(self.w1.clone())?,
                w2: g.constant(self.w2.clone())?,
            }
        })
    }
}

/// Per-channel spatial mean, [N,C].
pub fn channel_descriptor(g: &mut Graph, features: Var) -> Result<Var> {
    Ok(g.global_avg_pool(features)?)
}

/// Pre-sigmoid channel gate `W2 relu(W1 p)`, [N,C].
pub fn channel_attention_logits(g: &mut Graph, head: &BoundHead, p: Var) -> Result<Var> {
    let h = g.fully_connected(p, head.w1, None)?;
    let h = g.relu(h)?;
    Ok(g.fully_connected(h, head.w2, None)?)
}

/// Channel gate `a_i` in (0,1), [N,C].
pub fn channel_attention(g: &mut Graph, head: &BoundHead, p: Var) -> Result<Var> {
    let z = channel_attention_logits(g, head, p)?;
    Ok(g.sigmoid(z)?)
}

/// `σ(Σ_c a^c F^c)`, [N,H,W].
pub fn attention_map(g: &mut Graph, features: Var, a: Var, channel_mean: bool) -> Result<Var> {
    let mut s = g.channel_weighted_sum(features, a)?;
    if channel_mean {
        let c = g.shape(features)[1];
        s = g.scale(s, 1.0 / c as f64)?;
    }
    Ok(g.sigmoid(s)?)
}

/// A single map detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// [H,W]
    pub values: Tensor,
    pub part_index: usize,
}

impl AttentionMap {
    /// Splits a batched map value [N,H,W] into per-sample maps.
    pub fn split(batch: &Tensor, part_index: usize) -> Vec<AttentionMap> {
        let s = batch.shape();
        let (h, w) = (s[1], s[2]);
        batch
            .data()
            .chunks(h * w)
            .map(|c| AttentionMap {
                values: Tensor::new(&[h, w], c.to_vec()).expect("chunk matches shape"),
                part_index,
            })
            .collect()
    }

    pub fn peak(&self) -> (usize, usize) {
        let s = self.values.shape();
        map_peak(self.values.data(), s[1])
    }
}

/// First row-major argmax of a flattened map with `w` columns.
pub fn map_peak(values: &[f64], w: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    /// [H,W]
    pub values: Tensor,
    pub peak: (usize, usize),
    pub sigma: f64,
}

pub fn gaussian_target(map: &AttentionMap, sigma: f64) -> Result<GaussianTarget> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let s = map.values.shape();
    let (h, w) = (s[0], s[1]);
    let peak = map.peak();
    Ok(GaussianTarget {
        values: Tensor::new(&[h, w], gaussian_blob(h, w, peak, sigma))?,
        peak,
        sigma,
    })
}

fn gaussian_blob(h: usize, w: usize, peak: (usize, usize), sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - peak.0 as f64;
            let dc = c as f64 - peak.1 as f64;
            out.push((-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

/// Gaussian targets for a batched map value [N,H,W].
pub fn gaussian_targets(maps: &Tensor, sigma: f64) -> Result<Tensor> {
    let s = maps.shape();
    let (h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(maps.numel());
    for m in maps.data().chunks(h * w) {
        data.extend(gaussian_blob(h, w, map_peak(m, w), sigma));
    }
    Ok(Tensor::new(s, data)?)
}

/// Mean squared error of a map [N,H,W] against a fixed target.
pub fn compactness_loss(g: &mut Graph, map: Var, target: &Tensor) -> Result<Var> {
    Ok(g.mse(map, target)?)
}

struct DiversityRule {
    part: usize,
    margin: f64,
    samples: usize,
    positions: usize,
    flip_own: bool,
}

impl DiversityRule {
    /// Per-position `(m̂, index of the map achieving it)`.
    fn others_max(&self, maps: &[&Tensor], z: usize) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (k, m) in maps.iter().enumerate() {
            if k != self.part && m.data()[z] > best.0 {
                best = (m.data()[z], k);
            }
        }
        best
    }
}

impl Backward for DiversityRule {
    fn name(&self) -> &'static str {
        "diversity_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, go: &[f64]) -> Vec<Option<Vec<f64>>> {
        let scale = go[0] / self.samples as f64;
        let mut grads = vec![vec![0.0; self.samples * self.positions]; inputs.len()];
        for z in 0..self.samples * self.positions {
            let (mhat, k) = self.others_max(inputs, z);
            let hinge = mhat - self.margin;
            if hinge > 0.0 {
                let own = if self.flip_own { -hinge } else { hinge };
                grads[self.part][z] += scale * own;
                grads[k][z] += scale * inputs[self.part].data()[z];
            }
        }
        grads.into_iter().map(Some).collect()
    }
}

fn diversity_impl(g: &mut Graph, maps: &[Var], part: usize, margin: f64, flip_own: bool) -> Result<Var> {
    if maps.len() < 2 {
        return Err(Error::config("diversity loss needs at least two maps"));
    }
    if part >= maps.len() {
        return Err(Error::config(format!("part {part} out of range for {} maps", maps.len())));
    }
    let shape = g.shape(maps[0]).to_vec();
    for &m in maps {
        if g.shape(m) != shape.as_slice() {
            return Err(Error::config(format!(
                "diversity maps disagree in shape: {shape:?} vs {:?}",
                g.shape(m)
            )));
        }
    }
    let samples = if shape.len() == 3 { shape[0] } else { 1 };
    let positions = shape.iter().product::<usize>() / samples;
    let rule = DiversityRule {
        part,
        margin,
        samples,
        positions,
        flip_own,
    };
    let values: Vec<&Tensor> = maps.iter().map(|&m| g.value(m)).collect();
    let mut total = 0.0;
    for z in 0..samples * positions {
        let (mhat, _) = rule.others_max(&values, z);
        total += values[part].data()[z] * (mhat - margin).max(0.0);
    }
    let out = Tensor::scalar(total / samples as f64);
    Ok(g.custom(maps, out, Box::new(rule))?)
}

/// `Σ_z m_i · max(0, max_{k≠i} m_k − mrg)`, summed over positions and
/// averaged over the batch. Maps are [N,H,W] (or [H,W] for one sample).
pub fn diversity_loss(g: &mut Graph, maps: &[Var], part: usize, margin: f64) -> Result<Var> {
    diversity_impl(g, maps, part, margin, false)
}

/// Same forward value as [`diversity_loss`] with the sign of the own-map
/// gradient flipped; a negative control for gradient checking.
#[doc(hidden)]
pub fn diversity_loss_faulty(g: &mut Graph, maps: &[Var], part: usize, margin: f64) -> Result<Var> {
    diversity_impl(g, maps, part, margin, true)
}

pub struct MultiAttentionLoss {
    pub total: Var,
    pub compactness: Vec<Var>,
    pub diversity: Vec<Var>,
}

/// `Σ_i [L_CPT(M_i) + λ L_DIV(M_i)]` with targets built from the current maps.
pub fn multi_attention_loss(
    g: &mut Graph,
    maps: &[Var],
    cfg: &MultiAttentionConfig,
) -> Result<MultiAttentionLoss> {
    multi_attention_impl(g, maps, cfg, false)
}

/// [`multi_attention_loss`] built on [`diversity_loss_faulty`].
#[doc(hidden)]
pub fn multi_attention_loss_faulty(
    g: &mut Graph,
    maps: &[Var],
    cfg: &MultiAttentionConfig,
) -> Result<MultiAttentionLoss> {
    multi_attention_impl(g, maps, cfg, true)
}

fn multi_attention_impl(
    g: &mut Graph,
    maps: &[Var],
    cfg: &MultiAttentionConfig,
    faulty: bool,
) -> Result<MultiAttentionLoss> {
    if maps.len() != cfg.num_parts {
        return Err(Error::config(format!(
            "expected {} attention maps, got {}",
            cfg.num_parts,
            maps.len()
        )));
    }
    let mut terms = Vec::new();
    let mut compactness = Vec::new();
    let mut diversity = Vec::new();
    for (i, &m) in maps.iter().enumerate() {
        let side = *g.shape(m).last().expect("map has a width");
        let target = gaussian_targets(g.value(m), cfg.sigma_for(side))?;
        let cpt = compactness_loss(g, m, &target)?;
        compactness.push(cpt);
        terms.push(cpt);
        if maps.len() > 1 {
            let div = diversity_impl(g, maps, i, cfg.margin, faulty)?;
            diversity.push(div);
            terms.push(g.scale(div, cfg.lambda)?);
        }
    }
    Ok(MultiAttentionLoss {
        total: g.add_n(&terms)?,
        compactness,
        diversity,
    })
}

/// Mean of the per-position minimum over maps divided by the mean of the
/// per-position maximum. All maps share one shape.
pub fn attention_overlap(maps: &[&[f64]]) -> Result<f64> {
    if maps.len() < 2 {
        return Err(Error::config("overlap needs at least two maps"));
    }
    let n = maps[0].len();
    if maps.iter().any(|m| m.len() != n) {
        return Err(Error::config("overlap maps disagree in size"));
    }
    let (mut lo, mut hi) = (0.0, 0.0);
    for z in 0..n {
        lo += maps.iter().map(|m| m[z]).fold(f64::INFINITY, f64::min);
        hi += maps.iter().map(|m| m[z]).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(if hi > 0.0 { lo / hi } else { 1.0 })
}

/// Binary cross-entropy on logits against fixed targets, averaged.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    struct Rule;
    impl Backward for Rule {
        fn name(&self) -> &'static str {
            "bce_with_logits"
        }
        fn backward(&self, inputs: &[&Tensor], _: &Tensor, go: &[f64]) -> Vec<Option<Vec<f64>>> {
            let (z, y) = (inputs[0].data(), inputs[1].data());
            let n = z.len() as f64;
            let grad = z.iter().zip(y).map(|(&z, &y)| go[0] * (logistic(z) - y) / n).collect();
            vec![Some(grad), None]
        }
    }
    if g.shape(logits) != targets.shape() {
        return Err(Error::config(format!(
            "bce targets {:?} do not match logits {:?}",
            targets.shape(),
            g.shape(logits)
        )));
    }
    let z = g.value(logits).data();
    let n = z.len() as f64;
    let loss: f64 = z
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;
    let t = g.constant(targets.clone())?;
    Ok(g.custom(&[logits, t], Tensor::scalar(loss), Box::new(Rule))?)
}

/// Per channel, its argmax position in every sample of the batch as
/// `[row_1, col_1, row_2, col_2, ...]` in units of the map side.
/// `features` is [N,C,H,W].
pub fn channel_peak_positions(features: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::config(format!("expected features [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut peaks = vec![Vec::with_capacity(2 * n); c];
    for (idx, plane) in features.data().chunks(h * w).enumerate() {
        let (r, col) = map_peak(plane, w);
        peaks[idx % c].push(r as f64 / h as f64);
        peaks[idx % c].push(col as f64 / w as f64);
    }
    Ok(peaks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelClusters {
    pub labels: Vec<usize>,
    /// Per part, a 0/1 indicator over channels.
    pub init_targets: Vec<Vec<f64>>,
}

pub fn init_channel_clusters(peaks: &[Vec<f64>], num_parts: usize, seed: u64) -> Result<ChannelClusters> {
    if peaks.len() < num_parts {
        return Err(Error::config(format!(
            "{} channels cannot form {num_parts} clusters",
            peaks.len()
        )));
    }
    let clustering = kmeans(peaks, num_parts, seed)?;
    let init_targets = (0..num_parts)
        .map(|i| {
            clustering
                .labels
                .iter()
                .map(|&l| if l == i { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(ChannelClusters {
        labels: clustering.labels,
        init_targets,
    })
}

/// Writes `sample{idx}_part{i}.pgm` for each map (8-bit, ×255 rounded half-up).
pub fn export_attention(dir: &Path, sample: usize, maps: &[AttentionMap]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for m in maps {
        let s = m.values.shape();
        let mut bytes = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
        bytes.extend(
            m.values
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
        );
        let path = dir.join(format!("sample{sample}_part{}.pgm", m.part_index));
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}

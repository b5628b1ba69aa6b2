//! Zero-shot and generalized zero-shot prediction.
//!
//! Unseen classes are related to seen ones by ridge regression on their
//! semantic vectors; the same weights synthesize unseen prototypes from the
//! per-class means of seen mapped features. A test image is scored by its
//! fused compatibility score plus `β` times the cosine similarity between its
//! concatenated mapped feature and each prototype.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zsl_tensor::{load_tensor, Tensor};

use crate::error::{Error, Result};
use crate::linalg;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "one")]
    pub ridge_lambda: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// Include the compatibility scores; off for prototype-only inference.
    #[serde(default = "yes")]
    pub use_scores: bool,
}

fn yes() -> bool {
    true
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            ridge_lambda: 1.0,
            beta: 1.0,
            use_scores: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_lambda >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::config(format!(
                "ridge lambda and beta must be >= 0, got {} and {}",
                self.ridge_lambda, self.beta
            )));
        }
        Ok(())
    }
}

fn check_semantics(m: &Tensor, role: &str) -> Result<(usize, usize)> {
    let s = m.shape();
    if s.len() != 2 {
        return Err(Error::data(format!("{role} semantic matrix must be 2-D, got {s:?}")));
    }
    if !m.is_finite() {
        return Err(Error::data(format!("{role} semantic matrix has non-finite entries")));
    }
    if let Some(r) = (0..s[0]).find(|&r| m.row(r).iter().all(|&v| v == 0.0)) {
        return Err(Error::data(format!("{role} semantic row {r} is all zero")));
    }
    Ok((s[0], s[1]))
}

/// `W = Φᵘ Φˢᵀ (Φˢ Φˢᵀ + λI)⁻¹`, [num_unseen, num_seen], via an SPD solve.
pub fn solve_ridge(unseen: &Tensor, seen: &Tensor, lambda: f64) -> Result<Tensor> {
    let (u, du) = check_semantics(unseen, "unseen")?;
    let (s, ds) = check_semantics(seen, "seen")?;
    if du != ds {
        return Err(Error::data(format!(
            "semantic dimensions differ: unseen {du}, seen {ds}"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let st = linalg::transpose(seen.data(), s, ds);
    let mut gram = linalg::matmul(seen.data(), &st, s, ds, s);
    for i in 0..s {
        gram[i * s + i] += lambda;
    }
    let cross = linalg::matmul(unseen.data(), &st, u, ds, s);
    // W A = B with symmetric A, so A Wᵀ = Bᵀ
    let wt = linalg::spd_solve(&gram, &linalg::transpose(&cross, u, s), s, u).map_err(|e| {
        if lambda == 0.0 {
            Error::Numeric(format!("{e}; use a ridge lambda > 0"))
        } else {
            e
        }
    })?;
    Ok(Tensor::new(&[u, s], linalg::transpose(&wt, s, u))?)
}

/// `‖Φᵘ − WΦˢ‖²_F + λ‖W‖²_F`.
pub fn ridge_objective(w: &Tensor, unseen: &Tensor, seen: &Tensor, lambda: f64) -> f64 {
    let (u, s, d) = (unseen.shape()[0], seen.shape()[0], seen.shape()[1]);
    let recon = linalg::matmul(w.data(), seen.data(), u, s, d);
    let resid: f64 = recon
        .iter()
        .zip(unseen.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    resid + lambda * w.data().iter().map(|v| v * v).sum::<f64>()
}

/// Per-class mean of `features` [N,D] for classes `0..num_classes`.
pub fn seen_prototypes(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::data(format!(
            "features {s:?} do not match {} labels",
            labels.len()
        )));
    }
    let d = s[1];
    let mut sums = vec![0.0; num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (n, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::data(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
        for (acc, v) in sums[y * d..(y + 1) * d].iter_mut().zip(features.row(n)) {
            *acc += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!("class {c} has no features for its prototype")));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums[c * d..(c + 1) * d].iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(Tensor::new(&[num_classes, d], sums)?)
}

/// `Φᵘ_cct = W Φˢ_cct`.
pub fn unseen_prototypes(w: &Tensor, seen_protos: &Tensor) -> Result<Tensor> {
    let (ws, ps) = (w.shape(), seen_protos.shape());
    if ws.len() != 2 || ps.len() != 2 || ws[1] != ps[0] {
        return Err(Error::data(format!(
            "weights {ws:?} do not chain with prototypes {ps:?}"
        )));
    }
    let out = linalg::matmul(w.data(), seen_protos.data(), ws[0], ws[1], ps[1]);
    Ok(Tensor::new(&[ws[0], ps[1]], out)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `argmax_y s_y + β·cos(φ_cct, proto_y)`, lowest index on ties.
/// `protos` has one row per entry of `scores`.
pub fn predict(scores: &[f64], phi_cct: &[f64], protos: &Tensor, beta: f64) -> usize {
    let combined: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(y, s)| s + beta * cosine(phi_cct, protos.row(y)))
        .collect();
    argmax(&combined)
}

/// [`predict`] over the joint seen ∪ unseen label space.
pub fn gzsl_predict(scores_all: &[f64], phi_cct: &[f64], all_protos: &Tensor, beta: f64) -> usize {
    predict(scores_all, phi_cct, all_protos, beta)
}

/// Fitted prototypes and semantics for scoring exported features.
///
/// Features are per-stream mapped features concatenated, [N, streams·d];
/// the compatibility score of class y is `Σ_i φ_i · φ(y)`.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub streams: usize,
    /// All classes, joint index, [K, d].
    pub semantics: Tensor,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// All classes, joint index, [K, streams·d].
    pub prototypes: Tensor,
    pub ridge: Tensor,
    pub config: InferenceConfig,
}

impl Predictor {
    pub fn fit(
        train_features: &Tensor,
        train_labels: &[usize],
        streams: usize,
        semantics: &Tensor,
        seen: &[usize],
        unseen: &[usize],
        config: InferenceConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (k, d) = check_semantics(semantics, "class")?;
        if train_features.shape().get(1) != Some(&(streams * d)) {
            return Err(Error::data(format!(
                "features {:?} are not {streams} streams of dimension {d}",
                train_features.shape()
            )));
        }
        let mut local = vec![usize::MAX; k];
        for (i, &c) in seen.iter().enumerate() {
            local[c] = i;
        }
        let labels: Vec<usize> = train_labels
            .iter()
            .map(|&y| match local.get(y) {
                Some(&l) if l != usize::MAX => Ok(l),
                _ => Err(Error::data(format!("training label {y} is not a seen class"))),
            })
            .collect::<Result<_>>()?;
        let seen_protos = seen_prototypes(train_features, &labels, seen.len())?;
        let phi_s = semantics.select_rows(seen);
        let dim = streams * d;
        let mut prototypes = Tensor::zeros(&[k, dim]);
        for (i, &c) in seen.iter().enumerate() {
            prototypes.data_mut()[c * dim..(c + 1) * dim].copy_from_slice(seen_protos.row(i));
        }
        let ridge = if unseen.is_empty() {
            Tensor::zeros(&[1, seen.len()])
        } else {
            let phi_u = semantics.select_rows(unseen);
            let w = solve_ridge(&phi_u, &phi_s, config.ridge_lambda)?;
            let up = unseen_prototypes(&w, &seen_protos)?;
            for (i, &c) in unseen.iter().enumerate() {
                prototypes.data_mut()[c * dim..(c + 1) * dim].copy_from_slice(up.row(i));
            }
            w
        };
        Ok(Predictor {
            streams,
            semantics: semantics.clone(),
            seen: seen.to_vec(),
            unseen: unseen.to_vec(),
            prototypes,
            ridge,
            config,
        })
    }

    fn semantic_dim(&self) -> usize {
        self.semantics.shape()[1]
    }

    /// Fused compatibility score of every class in `classes`.
    pub fn scores(&self, phi_cct: &[f64], classes: &[usize]) -> Vec<f64> {
        let d = self.semantic_dim();
        let mut fused = vec![0.0; d];
        for s in 0..self.streams {
            fused.iter_mut().zip(&phi_cct[s * d..(s + 1) * d]).for_each(|(a, v)| *a += v);
        }
        classes
            .iter()
            .map(|&c| {
                if self.config.use_scores {
                    fused.iter().zip(self.semantics.row(c)).map(|(a, b)| a * b).sum()
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Predicted class id among `classes`.
    pub fn predict_among(&self, phi_cct: &[f64], classes: &[usize], beta: f64) -> usize {
        let scores = self.scores(phi_cct, classes);
        let protos = self.prototypes.select_rows(classes);
        classes[predict(&scores, phi_cct, &protos, beta)]
    }

    pub fn predict_zsl(&self, phi_cct: &[f64]) -> usize {
        self.predict_among(phi_cct, &self.unseen, self.config.beta)
    }

    pub fn predict_gzsl(&self, phi_cct: &[f64]) -> usize {
        let all: Vec<usize> = (0..self.semantics.shape()[0]).collect();
        self.predict_among(phi_cct, &all, self.config.beta)
    }
}

/// One split of exported features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSplit {
    pub name: String,
    /// Blob of concatenated per-stream mapped features, [N, streams·d].
    pub features: String,
    pub labels: Vec<usize>,
}

/// Exchange format for running inference on externally exported features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub streams: usize,
    /// Blob of the joint semantic matrix, [K, d].
    pub semantics: String,
    pub splits: Vec<FeatureSplit>,
}

pub const FEATURE_MANIFEST: &str = "features.json";

impl FeatureManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(FEATURE_MANIFEST))?;
        let m: FeatureManifest = serde_json::from_str(&text)?;
        if m.version != 1 {
            return Err(Error::data(format!("unsupported feature manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn path(dir: &Path, file: &str) -> PathBuf {
        dir.join(file)
    }

    pub fn split(&self, dir: &Path, name: &str) -> Result<(Tensor, Vec<usize>)> {
        let s = self
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::data(format!("feature split '{name}' is missing")))?;
        let t = load_tensor(Self::path(dir, &s.features))?;
        if t.shape()[0] != s.labels.len() {
            return Err(Error::data(format!(
                "split '{name}' has {} rows but {} labels",
                t.shape()[0],
                s.labels.len()
            )));
        }
        Ok((t, s.labels.clone()))
    }

    pub fn semantics(&self, dir: &Path) -> Result<Tensor> {
        let t = load_tensor(Self::path(dir, &self.semantics))?;
        if t.shape()[0] != self.class_names.len() {
            return Err(Error::data(format!(
                "semantic matrix has {} rows for {} classes",
                t.shape()[0],
                self.class_names.len()
            )));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_seen_returns_unseen() {
        let seen = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let unseen = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
        let w = solve_ridge(&unseen, &seen, 0.0).unwrap();
        assert!((w.data()[0] - 0.3).abs() < 1e-14 && (w.data()[1] + 0.7).abs() < 1e-14);
    }

    #[test]
    fn singular_at_zero_lambda_advises() {
        let seen = Tensor::new(&[2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let unseen = Tensor::new(&[1, 2], vec![0.3, 0.7]).unwrap();
        let err = solve_ridge(&unseen, &seen, 0.0).unwrap_err();
        assert!(err.to_string().contains("lambda > 0"), "{err}");
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

//! Joint embedding head: bilinear compatibility scores, late fusion, the
//! embedding softmax loss and the class-center triplet loss.

use serde::{Deserialize, Serialize};
use zsl_tensor::{Backward, Graph, Rng, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamVisitor;

fn one() -> f64 {
    1.0
}
fn default_cct_margin() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLossWeights {
    #[serde(default = "one")]
    pub alpha1: f64,
    #[serde(default = "one")]
    pub alpha2: f64,
    #[serde(default = "default_cct_margin")]
    pub cct_margin: f64,
}

impl Default for JointLossWeights {
    fn default() -> Self {
        JointLossWeights {
            alpha1: 1.0,
            alpha2: 1.0,
            cct_margin: default_cct_margin(),
        }
    }
}

impl JointLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if !(self.cct_margin >= 0.0) {
            return Err(Error::config("triplet margin must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Closest wrong center per sample.
    #[default]
    Hardest,
    /// Sum of hinges over every wrong center.
    All,
}

/// `W_i`: [feature_dim, semantic_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub w: Tensor,
}

impl EmbeddingMatrix {
    pub fn init(feature_dim: usize, semantic_dim: usize, rng: &mut Rng) -> Self {
        EmbeddingMatrix {
            w: Tensor::randn(&[feature_dim, semantic_dim], (1.0 / feature_dim as f64).sqrt(), rng),
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.w"), &mut self.w);
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, train: bool) -> Result<Var> {
        Ok(if train {
            g.param(format!("{prefix}.w"), &self.w)?
        } else {
            g.constant(self.w.clone())?
        })
    }
}

/// Trainable class anchors [num_seen, semantic_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub c: Tensor,
}

impl ClassCenters {
    /// Centers start at the (seen) class semantic vectors.
    pub fn from_semantics(seen: &Tensor) -> Self {
        ClassCenters { c: seen.clone() }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.c"), &mut self.c);
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, train: bool) -> Result<Var> {
        Ok(if train {
            g.param(format!("{prefix}.c"), &self.c)?
        } else {
            g.constant(self.c.clone())?
        })
    }
}

/// `φ = θ W`, [N, semantic_dim].
pub fn map_features(g: &mut Graph, theta: Var, w: Var) -> Result<Var> {
    let (ts, ws) = (g.shape(theta).to_vec(), g.shape(w).to_vec());
    if ts.len() != 2 || ws.len() != 2 || ts[1] != ws[0] {
        return Err(Error::config(format!(
            "features {ts:?} do not chain with embedding matrix {ws:?}"
        )));
    }
    Ok(g.matmul(theta, w)?)
}

/// `s[n,j] = θ_n W φ(y_j)`. `semantics_t` is the transposed semantic
/// matrix [semantic_dim, num_classes].
pub fn compatibility(g: &mut Graph, theta: Var, w: Var, semantics_t: Var) -> Result<Var> {
    let phi = map_features(g, theta, w)?;
    scores_from_mapped(g, phi, semantics_t)
}

pub fn scores_from_mapped(g: &mut Graph, phi: Var, semantics_t: Var) -> Result<Var> {
    let (ps, ss) = (g.shape(phi).to_vec(), g.shape(semantics_t).to_vec());
    if ss.len() != 2 || ps[1] != ss[0] {
        return Err(Error::config(format!(
            "mapped features {ps:?} do not chain with semantics {ss:?}"
        )));
    }
    Ok(g.matmul(phi, semantics_t)?)
}

/// Elementwise sum of per-stream scores.
pub fn fuse_scores(g: &mut Graph, per_stream: &[Var]) -> Result<Var> {
    if per_stream.is_empty() {
        return Err(Error::config("no score streams to fuse"));
    }
    Ok(g.add_n(per_stream)?)
}

/// Mean negative log-softmax of the true-class score.
pub fn embedding_softmax_loss(g: &mut Graph, fused: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.softmax_cross_entropy(fused, labels)?)
}

struct TripletRule {
    labels: Vec<usize>,
    margin: f64,
    mode: NegativeMode,
}

impl TripletRule {
    fn dist2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    /// Active `(sample, negative)` pairs with their hinge value.
    fn active(&self, phi: &Tensor, centers: &Tensor) -> Vec<(usize, usize, f64)> {
        let k = centers.shape()[0];
        let mut out = Vec::new();
        for (n, &y) in self.labels.iter().enumerate() {
            let p = phi.row(n);
            let own = Self::dist2(p, centers.row(y));
            let negs: Vec<(usize, f64)> = (0..k)
                .filter(|&j| j != y)
                .map(|j| (j, Self::dist2(p, centers.row(j))))
                .collect();
            let chosen: Vec<(usize, f64)> = match self.mode {
                NegativeMode::All => negs,
                NegativeMode::Hardest => {
                    let mut best = negs[0];
                    for &c in &negs[1..] {
                        if c.1 < best.1 {
                            best = c;
                        }
                    }
                    vec![best]
                }
            };
            for (j, d) in chosen {
                let h = self.margin + own - d;
                if h > 0.0 {
                    out.push((n, j, h));
                }
            }
        }
        out
    }
}

impl Backward for TripletRule {
    fn name(&self) -> &'static str {
        "class_center_triplet"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, go: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (phi, centers) = (inputs[0], inputs[1]);
        let d = phi.shape()[1];
        let scale = go[0] / self.labels.len() as f64;
        let mut gp = vec![0.0; phi.numel()];
        let mut gc = vec![0.0; centers.numel()];
        for (n, j, _) in self.active(phi, centers) {
            let y = self.labels[n];
            let (p, cy, cj) = (phi.row(n), centers.row(y), centers.row(j));
            for e in 0..d {
                let to_own = p[e] - cy[e];
                let to_neg = p[e] - cj[e];
                gp[n * d + e] += scale * 2.0 * (to_own - to_neg);
                gc[y * d + e] -= scale * 2.0 * to_own;
                gc[j * d + e] += scale * 2.0 * to_neg;
            }
        }
        vec![Some(gp), Some(gc)]
    }
}

/// Triplet hinge on already-normalized features and centers.
pub fn triplet_hinge(
    g: &mut Graph,
    phi_hat: Var,
    centers_hat: Var,
    labels: &[usize],
    margin: f64,
    mode: NegativeMode,
) -> Result<Var> {
    let (ps, cs) = (g.shape(phi_hat).to_vec(), g.shape(centers_hat).to_vec());
    if cs.len() != 2 || cs[0] < 2 {
        return Err(Error::config(format!(
            "triplet loss needs at least 2 class centers, got {cs:?}"
        )));
    }
    if ps.len() != 2 || ps[1] != cs[1] || ps[0] != labels.len() {
        return Err(Error::config(format!(
            "features {ps:?}, centers {cs:?} and {} labels disagree",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cs[0]) {
        return Err(Error::config(format!("label {bad} out of range for {} centers", cs[0])));
    }
    let rule = TripletRule {
        labels: labels.to_vec(),
        margin,
        mode,
    };
    let total: f64 = rule
        .active(g.value(phi_hat), g.value(centers_hat))
        .iter()
        .map(|a| a.2)
        .sum();
    let out = Tensor::scalar(total / labels.len() as f64);
    Ok(g.custom(&[phi_hat, centers_hat], out, Box::new(rule))?)
}

pub const NORM_EPS: f64 = 1e-12;

/// `max(0, mrg + ‖φ̂ − Ĉ_y‖² − ‖φ̂ − Ĉ_k‖²)` averaged over the batch, with
/// both features and centers L2-normalized first.
pub fn class_center_triplet_loss(
    g: &mut Graph,
    phi: Var,
    centers: Var,
    labels: &[usize],
    margin: f64,
    mode: NegativeMode,
) -> Result<Var> {
    let ph = g.l2_normalize(phi, NORM_EPS)?;
    let ch = g.l2_normalize(centers, NORM_EPS)?;
    triplet_hinge(g, ph, ch, labels, margin, mode)
}

/// `L_MA + α1 L_CLS + α2 L_CCT`.
pub fn joint_objective(g: &mut Graph, l_ma: Var, l_cls: Var, l_cct: Var, w: &JointLossWeights) -> Result<Var> {
    let a = g.scale(l_cls, w.alpha1)?;
    let b = g.scale(l_cct, w.alpha2)?;
    Ok(g.add_n(&[l_ma, a, b])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_objective_sums() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0)).unwrap();
        let b = g.constant(Tensor::scalar(2.0)).unwrap();
        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        let j = joint_objective(&mut g, a, b, c, &JointLossWeights::default()).unwrap();
        assert_eq!(g.value(j).item(), 6.0);
        let zero = JointLossWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            ..Default::default()
        };
        let j = joint_objective(&mut g, a, b, c, &zero).unwrap();
        assert_eq!(g.value(j).item(), 1.0);
    }

    #[test]
    fn fuse_rejects_empty() {
        assert!(fuse_scores(&mut Graph::new(), &[]).is_err());
    }
}

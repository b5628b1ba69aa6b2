//! Evaluation metrics: class-balanced accuracy, the seen/unseen harmonic
//! mean, square-box IoU and per-part detection precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cropping::CropParams;
use crate::error::{Error, Result};

/// Axis-aligned square in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareBox {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl SquareBox {
    pub fn new(cx: f64, cy: f64, side: f64) -> Self {
        SquareBox { cx, cy, side }
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }
}

impl From<CropParams> for SquareBox {
    fn from(p: CropParams) -> Self {
        SquareBox::new(p.t_x, p.t_y, p.t_s)
    }
}

fn overlap_1d(c1: f64, s1: f64, c2: f64, s2: f64) -> f64 {
    let lo = (c1 - s1 / 2.0).max(c2 - s2 / 2.0);
    let hi = (c1 + s1 / 2.0).min(c2 + s2 / 2.0);
    (hi - lo).max(0.0)
}

pub fn iou(a: &SquareBox, b: &SquareBox) -> f64 {
    let inter = overlap_1d(a.cx, a.side, b.cx, b.side) * overlap_1d(a.cy, a.side, b.cy, b.side);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Unweighted mean over the classes present in `labels` of per-class
/// accuracy, in percent.
pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    mean_class_accuracy_over(predictions, labels, &classes)
}

/// As [`mean_class_accuracy`] over an explicit class list; a listed class
/// without samples is an error.
pub fn mean_class_accuracy_over(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::data("no classes to evaluate"));
    }
    let mut total = 0.0;
    for &c in classes {
        let (mut hit, mut n) = (0usize, 0usize);
        for (p, l) in predictions.iter().zip(labels) {
            if *l == c {
                n += 1;
                hit += usize::from(p == l);
            }
        }
        if n == 0 {
            return Err(Error::data(format!("class {c} has no evaluation samples")));
        }
        total += hit as f64 / n as f64;
    }
    Ok(100.0 * total / classes.len() as f64)
}

/// `2·A_S·A_U / (A_S + A_U)`; zero when either accuracy is zero.
pub fn harmonic_mean(a_u: f64, a_s: f64) -> f64 {
    if a_u <= 0.0 || a_s <= 0.0 {
        0.0
    } else {
        2.0 * a_s * a_u / (a_s + a_u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartAssignment {
    /// Each predicted part takes the ground-truth part it overlaps most
    /// often over the evaluation set.
    #[default]
    Majority,
    /// A permutation of ground-truth parts maximizing total hits.
    OneToOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Percent correct per predicted part.
    pub per_part: Vec<f64>,
    pub average: f64,
    /// Ground-truth part index matched to each predicted part.
    pub assignment: Vec<usize>,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Fraction of samples whose predicted part box has IoU above `threshold`
/// with its matched ground-truth part. `predictions[n][p]` is `None` when a
/// prediction is missing; it counts as a miss.
pub fn detection_precision(
    predictions: &[Vec<Option<SquareBox>>],
    ground_truth: &[Vec<SquareBox>],
    threshold: f64,
    assignment: PartAssignment,
) -> Result<DetectionResult> {
    if predictions.len() != ground_truth.len() || predictions.is_empty() {
        return Err(Error::data(format!(
            "{} prediction rows for {} ground-truth rows",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let parts = predictions[0].len();
    let gt_parts = ground_truth[0].len();
    if parts == 0 || gt_parts == 0 {
        return Err(Error::data("detection needs at least one part"));
    }
    if predictions.iter().any(|p| p.len() != parts) || ground_truth.iter().any(|g| g.len() != gt_parts) {
        return Err(Error::data("samples disagree in their number of parts"));
    }
    // hits[p][q]: samples where predicted part p matches ground-truth part q
    let mut hits = vec![vec![0usize; gt_parts]; parts];
    let mut best_overlap = vec![vec![0usize; gt_parts]; parts];
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        for (p, bx) in pred.iter().enumerate() {
            let Some(bx) = bx else { continue };
            let ious: Vec<f64> = gt.iter().map(|g| iou(bx, g)).collect();
            for (q, &v) in ious.iter().enumerate() {
                if v > threshold {
                    hits[p][q] += 1;
                }
            }
            let q = crate::inference::argmax(&ious);
            if ious[q] > 0.0 {
                best_overlap[p][q] += 1;
            }
        }
    }
    let assigned: Vec<usize> = match assignment {
        PartAssignment::Majority => best_overlap
            .iter()
            .map(|row| {
                let mut best = 0;
                for (q, &c) in row.iter().enumerate() {
                    if c > row[best] {
                        best = q;
                    }
                }
                best
            })
            .collect(),
        PartAssignment::OneToOne => {
            if parts > gt_parts {
                return Err(Error::data(format!(
                    "one-to-one matching needs at most {gt_parts} predicted parts, got {parts}"
                )));
            }
            if gt_parts > 8 {
                return Err(Error::data("one-to-one matching supports at most 8 parts"));
            }
            let mut best: Option<(usize, Vec<usize>)> = None;
            for perm in permutations(gt_parts) {
                let score: usize = (0..parts).map(|p| hits[p][perm[p]]).sum();
                if best.as_ref().map_or(true, |b| score > b.0) {
                    best = Some((score, perm[..parts].to_vec()));
                }
            }
            best.expect("at least one permutation").1
        }
    };
    let n = predictions.len() as f64;
    let per_part: Vec<f64> = (0..parts)
        .map(|p| 100.0 * hits[p][assigned[p]] as f64 / n)
        .collect();
    let average = per_part.iter().sum::<f64>() / parts as f64;
    Ok(DetectionResult {
        per_part,
        average,
        assignment: assigned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GzslScores {
    pub a_u: f64,
    pub a_s: f64,
    pub h: f64,
}

impl GzslScores {
    pub fn new(a_u: f64, a_s: f64) -> Self {
        GzslScores {
            a_u,
            a_s,
            h: harmonic_mean(a_u, a_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub model: DetectionResult,
    pub random: DetectionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mca_unseen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gzsl: Option<GzslScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
    /// Evaluated samples per class name.
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        if let Some(b) = self.beta {
            rows.push(("beta".into(), format!("{b}")));
        }
        if let Some(m) = self.mca_unseen {
            rows.push(("unseen MCA (%)".into(), format!("{m:.2}")));
        }
        if let Some(g) = &self.gzsl {
            rows.push(("GZSL A_U (%)".into(), format!("{:.2}", g.a_u)));
            rows.push(("GZSL A_S (%)".into(), format!("{:.2}", g.a_s)));
            rows.push(("GZSL H (%)".into(), format!("{:.2}", g.h)));
        }
        if let Some(d) = &self.detection {
            for (p, v) in d.model.per_part.iter().enumerate() {
                rows.push((format!("part {p} precision (%)"), format!("{v:.2}")));
            }
            rows.push(("mean part precision (%)".into(), format!("{:.2}", d.model.average)));
            rows.push(("random-box precision (%)".into(), format!("{:.2}", d.random.average)));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>8}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_balanced() {
        let mut labels = vec![0; 10];
        labels.push(1);
        let mut preds = vec![0; 10];
        preds.push(0);
        assert_eq!(mean_class_accuracy(&preds, &labels).unwrap(), 50.0);
    }

    #[test]
    fn missing_class_is_error() {
        assert!(mean_class_accuracy_over(&[0], &[0], &[0, 1]).is_err());
    }

    #[test]
    fn half_offset_iou() {
        let a = SquareBox::new(0.5, 0.5, 1.0);
        let b = SquareBox::new(1.0, 0.5, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(1), vec![vec![0]]);
    }
}

//! Evaluation protocols on a trained model: zero-shot MCA, generalized
//! zero-shot accuracies and part detection against ground-truth boxes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{export_attention, AttentionMap};
use crate::cropping::{apply_crop, export_crops, CropParams, BOXES_SIDECAR};
use crate::error::{Error, Result};
use crate::inference::{InferenceConfig, Predictor};
use crate::metrics::{self, DetectionReport, EvalReport, GzslScores, PartAssignment, SquareBox};
use crate::model::Model;
use crate::synth::{random_box_with, Split, ZslDataset};
use crate::train::{embed_split, Embedded};
use zsl_tensor::{seeded_rng, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Zsl,
    Gzsl,
    Detect,
}

pub const EVAL_BATCH: usize = 64;

fn counts(ds: &ZslDataset, split: &Split) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for &l in &split.labels {
        *out.entry(ds.classes[l].name.clone()).or_insert(0) += 1;
    }
    out
}

/// Prototypes from the training split, ridge weights from the semantics.
pub fn fit_predictor(model: &Model, ds: &ZslDataset, train: &Embedded, cfg: InferenceConfig) -> Result<Predictor> {
    let cfg = InferenceConfig {
        use_scores: cfg.use_scores && model.config.inference_uses_scores(),
        ..cfg
    };
    Predictor::fit(
        &train.features,
        &ds.train.labels,
        model.config.num_streams(),
        &ds.semantics(),
        &ds.seen(),
        &ds.unseen(),
        cfg,
    )
}

fn nonempty<'a>(split: &'a Split, what: &str) -> Result<&'a Split> {
    if split.is_empty() {
        return Err(Error::data(format!("the {what} split '{}' is empty", split.name)));
    }
    Ok(split)
}

/// Unseen-class MCA, one report per fusion weight.
pub fn zsl_reports(model: &Model, ds: &ZslDataset, cfg: InferenceConfig, betas: &[f64], seed: u64) -> Result<Vec<EvalReport>> {
    let test = nonempty(&ds.test_unseen, "unseen test")?;
    let train = embed_split(model, &ds.train, EVAL_BATCH, seed)?;
    let emb = embed_split(model, test, EVAL_BATCH, seed)?;
    let mut predictor = fit_predictor(model, ds, &train, cfg)?;
    betas
        .iter()
        .map(|&beta| {
            predictor.config.beta = beta;
            let preds: Vec<usize> = (0..test.len())
                .map(|n| predictor.predict_zsl(emb.features.row(n)))
                .collect();
            Ok(EvalReport {
                beta: Some(beta),
                mca_unseen: Some(metrics::mean_class_accuracy_over(&preds, &test.labels, &ds.unseen())?),
                counts: counts(ds, test),
                ..Default::default()
            })
        })
        .collect()
}

/// `(A_U, A_S, H)` over the joint label space, one report per fusion weight.
pub fn gzsl_reports(model: &Model, ds: &ZslDataset, cfg: InferenceConfig, betas: &[f64], seed: u64) -> Result<Vec<EvalReport>> {
    let unseen = nonempty(&ds.test_unseen, "unseen test")?;
    let seen = nonempty(&ds.test_seen, "seen test")?;
    let train = embed_split(model, &ds.train, EVAL_BATCH, seed)?;
    let eu = embed_split(model, unseen, EVAL_BATCH, seed)?;
    let es = embed_split(model, seen, EVAL_BATCH, seed)?;
    let mut predictor = fit_predictor(model, ds, &train, cfg)?;
    let mut all_counts = counts(ds, unseen);
    all_counts.extend(counts(ds, seen));
    betas
        .iter()
        .map(|&beta| {
            predictor.config.beta = beta;
            let pu: Vec<usize> = (0..unseen.len()).map(|n| predictor.predict_gzsl(eu.features.row(n))).collect();
            let ps: Vec<usize> = (0..seen.len()).map(|n| predictor.predict_gzsl(es.features.row(n))).collect();
            let a_u = metrics::mean_class_accuracy_over(&pu, &unseen.labels, &ds.unseen())?;
            let a_s = metrics::mean_class_accuracy_over(&ps, &seen.labels, &ds.seen())?;
            Ok(EvalReport {
                beta: Some(beta),
                gzsl: Some(GzslScores::new(a_u, a_s)),
                counts: all_counts.clone(),
                ..Default::default()
            })
        })
        .collect()
}

/// Uniform random boxes of a quarter of the image side, per sample and part.
pub fn random_baseline_boxes(n: usize, parts: usize, image_size: usize, seed: u64) -> Vec<Vec<Option<SquareBox>>> {
    let mut rng = seeded_rng(seed ^ 0xBA5E_11E5);
    (0..n)
        .map(|_| {
            (0..parts)
                .map(|_| Some(random_box_with(image_size, image_size as f64 / 4.0, &mut rng)))
                .collect()
        })
        .collect()
}

/// Maps and boxes of the unseen test split, as scored by [`detect_report`]
/// and written by [`export_samples`].
pub fn detection_inputs(model: &Model, ds: &ZslDataset, seed: u64) -> Result<Embedded> {
    embed_split(model, nonempty(&ds.test_unseen, "unseen test")?, EVAL_BATCH, seed)
}

/// Files written by [`export_samples`].
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ExportSummary {
    pub samples: usize,
    pub maps: Vec<PathBuf>,
    pub crops: Vec<PathBuf>,
    pub sidecar: PathBuf,
}

/// Attention maps, part crops and their boxes for the first `n` unseen test
/// samples.
pub fn export_samples(model: &Model, ds: &ZslDataset, n: usize, dir: &Path, seed: u64) -> Result<ExportSummary> {
    let test = nonempty(&ds.test_unseen, "unseen test")?;
    if n > test.len() {
        return Err(Error::data(format!(
            "asked for {n} samples but the unseen test split has {}",
            test.len()
        )));
    }
    let parts = model.config.num_parts();
    if parts == 0 || !model.config.uses_attention() {
        return Err(Error::config("export needs a model with attention parts"));
    }
    let emb = detection_inputs(model, ds, seed)?;
    let idx: Vec<usize> = (0..n).collect();
    let mut summary = ExportSummary {
        samples: n,
        ..Default::default()
    };
    for &i in &idx {
        let maps: Vec<AttentionMap> = emb
            .maps
            .iter()
            .enumerate()
            .map(|(p, m)| AttentionMap {
                values: m.select_rows(&[i]).reshape(&m.shape()[1..]).expect("one map"),
                part_index: p,
            })
            .collect();
        summary.maps.extend(export_attention(dir, i, &maps)?);
    }
    let mut crops = Vec::with_capacity(parts);
    let mut boxes = Vec::with_capacity(parts);
    for p in 0..parts {
        let part_boxes: Vec<CropParams> = idx.iter().map(|&i| emb.boxes[i][p]).collect();
        let mut g = Graph::new();
        let x = g.constant(test.batch(&idx))?;
        let t = g.constant(CropParams::to_tensor(&part_boxes))?;
        let cfg = &model.config;
        let out = apply_crop(&mut g, x, t, cfg.crop_steepness, cfg.stream_backbone.input_size, cfg.crop_mode)?;
        crops.push(g.value(out).clone());
        boxes.push(part_boxes);
    }
    export_crops(dir, 0, &crops, &boxes)?;
    for &i in &idx {
        for p in 0..parts {
            summary.crops.push(dir.join(format!("sample{i}_part{p}.ppm")));
        }
    }
    summary.sidecar = dir.join(BOXES_SIDECAR);
    Ok(summary)
}

/// Part-detection precision on the unseen test split, with the random-box
/// baseline alongside.
pub fn detect_report(model: &Model, ds: &ZslDataset, assignment: PartAssignment, seed: u64) -> Result<EvalReport> {
    let test = nonempty(&ds.test_unseen, "unseen test")?;
    if model.config.num_parts() == 0 {
        return Err(Error::config("the model has no part streams to evaluate"));
    }
    let emb = detection_inputs(model, ds, seed)?;
    let preds: Vec<Vec<Option<SquareBox>>> = emb
        .boxes
        .iter()
        .map(|b| b.iter().map(|&p| Some(SquareBox::from(p))).collect())
        .collect();
    let model_res = metrics::detection_precision(&preds, &test.boxes, 0.5, assignment)?;
    let random = random_baseline_boxes(test.len(), preds[0].len(), ds.image_size(), seed);
    let random_res = metrics::detection_precision(&random, &test.boxes, 0.5, assignment)?;
    Ok(EvalReport {
        detection: Some(DetectionReport {
            model: model_res,
            random: random_res,
        }),
        counts: counts(ds, test),
        ..Default::default()
    })
}

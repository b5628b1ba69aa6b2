//! Finite-difference suite over every differentiable operation of the
//! pipeline plus three end-to-end probes, one per loss path.

use serde::Serialize;
use zsl_tensor::{grad_check_scaled, seeded_rng, Graph, Pointwise, Rng, Tensor, Var};

use crate::attention::{self, BoundHead, MultiAttentionConfig};
use crate::backbone::BackboneConfig;
use crate::cropping::{self, BoundCropNet, CropMode, CropNet, PseudoBox};
use crate::embedding::{self, NegativeMode};
use crate::error::Result;
use crate::model::{BoundModel, Model, ModelConfig, Trainable};

/// Default tolerance on the max relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for checks that pass through bilinear window sampling.
pub const BILINEAR_TOLERANCE: f64 = 1e-3;
pub const EPS: f64 = 1e-6;
/// Elements with gradients below this fraction of their input's largest
/// gradient are compared on that larger scale.
pub const REL_FLOOR: f64 = 1e-3;
/// Step for the end-to-end probes, whose small gradients need a wider
/// difference to stay above rounding noise.
pub const PROBE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Use the diversity loss with a sign error in its backward pass.
    pub inject_diversity_fault: bool,
}

/// Outcome of a full suite run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>12} {:>9}  result\n", "check", "max rel err", "tol");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<28} {:>12.3e} {:>9.0e}  {}\n",
                c.name,
                c.max_rel_error,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

type Probe = Box<dyn Fn(&mut Graph, &[Var]) -> zsl_tensor::Result<Var>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor>,
    eps: f64,
    f: Probe,
}

/// Fixed random projection of any tensor to a scalar.
fn project(g: &mut Graph, v: Var, seed: u64) -> zsl_tensor::Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut seeded_rng(seed)))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn case(name: &'static str, tolerance: f64, inputs: Vec<Tensor>, f: Probe) -> Case {
    Case {
        name,
        tolerance,
        inputs,
        eps: EPS,
        f,
    }
}

fn op_cases(rng: &mut Rng, faulty: bool) -> Result<Vec<Case>> {
    let mut cases = vec![
        case(
            "conv2d",
            TOLERANCE,
            vec![randn(&[2, 3, 5, 5], rng), randn(&[4, 3, 3, 3], rng)],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], 1, 1)?;
                project(g, y, 1)
            }),
        ),
        case(
            "conv2d_stride2",
            TOLERANCE,
            vec![randn(&[1, 2, 6, 6], rng), randn(&[3, 2, 3, 3], rng)],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], 2, 0)?;
                project(g, y, 2)
            }),
        ),
        case(
            "add_channel_bias",
            TOLERANCE,
            vec![randn(&[2, 3, 4, 4], rng), randn(&[3], rng)],
            Box::new(|g, v| {
                let y = g.add_channel_bias(v[0], v[1])?;
                project(g, y, 3)
            }),
        ),
        case(
            "fully_connected",
            TOLERANCE,
            vec![randn(&[4, 6], rng), randn(&[5, 6], rng), randn(&[5], rng)],
            Box::new(|g, v| {
                let y = g.fully_connected(v[0], v[1], Some(v[2]))?;
                project(g, y, 4)
            }),
        ),
        case(
            "matmul",
            TOLERANCE,
            vec![randn(&[3, 4], rng), randn(&[4, 5], rng)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, 5)
            }),
        ),
        case(
            "sigmoid",
            TOLERANCE,
            vec![randn(&[2, 5], rng)],
            Box::new(|g, v| {
                let y = g.apply_pointwise(Pointwise::Sigmoid, v[0])?;
                project(g, y, 6)
            }),
        ),
        case(
            "relu",
            TOLERANCE,
            vec![randn(&[2, 5], rng)],
            Box::new(|g, v| {
                let y = g.apply_pointwise(Pointwise::Relu, v[0])?;
                project(g, y, 7)
            }),
        ),
        case(
            "avg_pool2",
            TOLERANCE,
            vec![randn(&[2, 2, 4, 4], rng)],
            Box::new(|g, v| {
                let y = g.avg_pool2(v[0])?;
                project(g, y, 8)
            }),
        ),
        case(
            "global_avg_pool",
            TOLERANCE,
            vec![randn(&[2, 3, 4, 4], rng)],
            Box::new(|g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, 9)
            }),
        ),
        case(
            "bilinear_resize",
            TOLERANCE,
            vec![randn(&[1, 2, 5, 5], rng)],
            Box::new(|g, v| {
                let y = g.bilinear_resize(v[0], 8, 3)?;
                project(g, y, 10)
            }),
        ),
        case(
            "l2_normalize",
            TOLERANCE,
            vec![randn(&[3, 4], rng)],
            Box::new(|g, v| {
                let y = g.l2_normalize(v[0], 1e-12)?;
                project(g, y, 11)
            }),
        ),
        case(
            "add_sub_mul_scale",
            TOLERANCE,
            vec![randn(&[2, 3], rng), randn(&[2, 3], rng)],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(v[0], v[1])?;
                let m = g.mul(a, s)?;
                let y = g.scale(m, -1.5)?;
                project(g, y, 12)
            }),
        ),
        case(
            "col_affine",
            TOLERANCE,
            vec![randn(&[4, 3], rng)],
            Box::new(|g, v| {
                let y = g.col_affine(v[0], &[2.0, -1.0, 0.5], &[0.1, 0.2, 0.3])?;
                project(g, y, 13)
            }),
        ),
        case(
            "sum_mean_reshape",
            TOLERANCE,
            vec![randn(&[2, 6], rng)],
            Box::new(|g, v| {
                let r = g.reshape(v[0], &[3, 4])?;
                let sq = g.mul(r, r)?;
                let a = g.sum(sq)?;
                let b = g.mean(r)?;
                g.add(a, b)
            }),
        ),
        case(
            "concat_cols_add_n",
            TOLERANCE,
            vec![randn(&[3, 2], rng), randn(&[3, 4], rng), randn(&[3, 2], rng)],
            Box::new(|g, v| {
                let c = g.concat_cols(&[v[0], v[1]])?;
                let y = g.add_n(&[v[0], v[2], v[0]])?;
                let a = project(g, c, 14)?;
                let b = project(g, y, 15)?;
                g.add(a, b)
            }),
        ),
        case(
            "channel_weighted_sum",
            TOLERANCE,
            vec![randn(&[2, 3, 4, 4], rng), randn(&[2, 3], rng)],
            Box::new(|g, v| {
                let y = g.channel_weighted_sum(v[0], v[1])?;
                project(g, y, 16)
            }),
        ),
        case(
            "mul_mask",
            TOLERANCE,
            vec![randn(&[2, 3, 4, 4], rng), randn(&[2, 4, 4], rng)],
            Box::new(|g, v| {
                let y = g.mul_mask(v[0], v[1])?;
                project(g, y, 17)
            }),
        ),
        case(
            "mse",
            TOLERANCE,
            vec![randn(&[2, 3, 3], rng)],
            Box::new(|g, v| {
                let t = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut seeded_rng(18));
                g.mse(v[0], &t)
            }),
        ),
        case(
            "softmax_cross_entropy",
            TOLERANCE,
            vec![randn(&[3, 5], rng)],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2])),
        ),
    ];

    let c = 6;
    let hidden = 3;
    cases.push(case(
        "channel_attention",
        TOLERANCE,
        vec![randn(&[2, c], rng), randn(&[hidden, c], rng), randn(&[c, hidden], rng)],
        Box::new(|g, v| {
            let head = BoundHead { w1: v[1], w2: v[2] };
            let a = attention::channel_attention(g, &head, v[0])?;
            project(g, a, 19)
        }),
    ));
    cases.push(case(
        "attention_map",
        TOLERANCE,
        vec![randn(&[2, 3, 4, 4], rng), Tensor::uniform(&[2, 3], 0.0, 1.0, rng)],
        Box::new(|g, v| {
            let m = attention::attention_map(g, v[0], v[1], false)?;
            g.mean(m)
        }),
    ));
    cases.push(case(
        "compactness_loss",
        TOLERANCE,
        vec![Tensor::uniform(&[2, 5, 5], 0.0, 1.0, rng)],
        Box::new(|g, v| {
            let t = attention::gaussian_targets(&Tensor::uniform(&[2, 5, 5], 0.0, 1.0, &mut seeded_rng(20)), 1.0)?;
            Ok(attention::compactness_loss(g, v[0], &t)?)
        }),
    ));
    let diversity: fn(&mut Graph, &[Var], usize, f64) -> Result<Var> = if faulty {
        attention::diversity_loss_faulty
    } else {
        attention::diversity_loss
    };
    cases.push(case(
        "diversity_loss",
        TOLERANCE,
        (0..3).map(|_| Tensor::uniform(&[2, 4, 4], 0.0, 1.0, rng)).collect(),
        Box::new(move |g, v| {
            let a = diversity(g, v, 0, 0.2)?;
            let b = diversity(g, v, 2, 0.2)?;
            g.add(a, b)
        }),
    ));
    cases.push(case(
        "bce_with_logits",
        TOLERANCE,
        vec![randn(&[2, 5], rng)],
        Box::new(|g, v| {
            let t = Tensor::uniform(&[2, 5], 0.0, 1.0, &mut seeded_rng(21));
            Ok(attention::bce_with_logits(g, v[0], &t)?)
        }),
    ));
    cases.push(case(
        "boxcar_mask",
        TOLERANCE,
        vec![Tensor::new(&[2, 3], vec![5.3, 6.1, 4.7, 8.2, 3.9, 6.4])?],
        Box::new(|g, v| {
            let m = cropping::boxcar_mask_op(g, v[0], 2.0, 12)?;
            project(g, m, 22)
        }),
    ));
    cases.push(case(
        "window_sample",
        BILINEAR_TOLERANCE,
        vec![
            randn(&[2, 3, 8, 8], rng),
            Tensor::new(&[2, 3], vec![3.7, 4.2, 3.3, 5.1, 3.6, 4.9])?,
        ],
        Box::new(|g, v| {
            let y = cropping::window_sample(g, v[0], v[1], 5)?;
            project(g, y, 23)
        }),
    ));
    cases.push(case(
        "apply_crop_full_masked",
        TOLERANCE,
        vec![
            randn(&[1, 3, 8, 8], rng),
            Tensor::new(&[1, 3], vec![4.3, 3.8, 3.4])?,
        ],
        Box::new(|g, v| {
            let y = cropping::apply_crop(g, v[0], v[1], 3.0, 4, CropMode::FullMasked)?;
            project(g, y, 24)
        }),
    ));
    cases.push(case(
        "apply_crop_window",
        BILINEAR_TOLERANCE,
        vec![
            randn(&[1, 3, 8, 8], rng),
            Tensor::new(&[1, 3], vec![4.3, 3.8, 3.4])?,
        ],
        Box::new(|g, v| {
            let y = cropping::apply_crop(g, v[0], v[1], 3.0, 4, CropMode::Window)?;
            g.mean(y)
        }),
    ));
    let net = CropNet::init(16, 5, 16, [0.5, 0.5, 0.25], rng)?;
    cases.push(case(
        "crop_net",
        TOLERANCE,
        vec![
            Tensor::uniform(&[2, 4, 4], 0.0, 1.0, rng),
            net.w1.clone(),
            Tensor::uniform(&[5], 0.1, 0.5, rng),
            randn(&[3, 5], rng),
            net.b2.clone(),
        ],
        Box::new(move |g, v| {
            let b = BoundCropNet {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
            };
            let t = net.forward(g, &b, v[0])?;
            let pseudo = [
                PseudoBox { p_x: 3.0, p_y: 9.0, t_s: 4.0 },
                PseudoBox { p_x: 12.0, p_y: 5.0, t_s: 6.0 },
            ];
            let a = cropping::pretrain_crop_loss(g, t, &pseudo, 16)?;
            let b = project(g, t, 25)?;
            g.add(a, b)
        }),
    ));
    cases.push(case(
        "compatibility_fusion_softmax",
        TOLERANCE,
        vec![randn(&[3, 4], rng), randn(&[4, 5], rng), randn(&[4, 5], rng), randn(&[5, 3], rng)],
        Box::new(|g, v| {
            let a = embedding::compatibility(g, v[0], v[1], v[3])?;
            let b = embedding::compatibility(g, v[0], v[2], v[3])?;
            let fused = embedding::fuse_scores(g, &[a, b])?;
            Ok(embedding::embedding_softmax_loss(g, fused, &[2, 0, 1])?)
        }),
    ));
    for (name, mode) in [("cct_hardest", NegativeMode::Hardest), ("cct_all", NegativeMode::All)] {
        cases.push(case(
            name,
            TOLERANCE,
            vec![randn(&[4, 5], rng), randn(&[3, 5], rng)],
            Box::new(move |g, v| Ok(embedding::class_center_triplet_loss(g, v[0], v[1], &[0, 1, 2, 1], 0.8, mode)?)),
        ));
    }
    Ok(cases)
}

/// Small model used by the end-to-end probes.
pub fn probe_model_config() -> ModelConfig {
    let mut attention_backbone = BackboneConfig::new(16, vec![4, 6]);
    attention_backbone.pool_final = false;
    attention_backbone.relu_final = false;
    ModelConfig {
        image_size: 16,
        attention_backbone,
        stream_backbone: BackboneConfig::new(8, vec![4]),
        attention: MultiAttentionConfig {
            lambda: 0.5,
            ..Default::default()
        },
        crop_hidden: 6,
        ..Default::default()
    }
}

fn probe_cases(rng: &mut Rng, faulty: bool) -> Result<Vec<Case>> {
    let classes = 3;
    let semantics = Tensor::uniform(&[classes, 4], 0.0, 1.0, rng);
    let mut model = Model::init(probe_model_config(), &semantics, rng)?;
    // Stronger box regressors so the part path carries visible gradient.
    for net in &mut model.crop_nets {
        net.w2 = Tensor::randn(&[3, net.w2.shape()[1]], 0.3, rng);
    }
    let images = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, rng);
    let labels = [0usize, 2];
    let sem_t = semantics.transpose2()?;
    let head = model.heads[0].clone();
    let embeds: Vec<Tensor> = model.embeddings.iter().map(|e| e.w.clone()).collect();

    let ma_model = model.clone();
    let ma = case(
        "probe_multi_attention",
        TOLERANCE,
        vec![images.clone(), head.w1.clone(), head.w2.clone()],
        Box::new(move |g, v| {
            let mut b = ma_model.bind(g, Trainable::NONE)?;
            b.heads[0] = BoundHead { w1: v[1], w2: v[2] };
            let maps = ma_model.attention_maps(g, &b, v[0])?;
            let cfg = &ma_model.config.attention;
            let loss = if faulty {
                attention::multi_attention_loss_faulty(g, &maps, cfg)?
            } else {
                attention::multi_attention_loss(g, &maps, cfg)?
            };
            Ok(loss.total)
        }),
    );

    let crop = &model.crop_nets[0];
    let part_params = vec![head.w1.clone(), head.w2.clone(), crop.w1.clone(), crop.b1.clone(), crop.w2.clone(), crop.b2.clone()];
    // Inputs: the first part's head and crop net, then the path-specific tensors.
    fn rebind(b: &mut BoundModel, v: &[Var]) {
        b.heads[0] = BoundHead { w1: v[0], w2: v[1] };
        b.crops[0] = BoundCropNet {
            w1: v[2],
            b1: v[3],
            w2: v[4],
            b2: v[5],
        };
    }

    let cls_model = model.clone();
    let cls_sem = sem_t.clone();
    let cls_images = images.clone();
    let mut cls_inputs = part_params.clone();
    cls_inputs.extend(embeds);
    let cls = case(
        "probe_classification",
        BILINEAR_TOLERANCE,
        cls_inputs,
        Box::new(move |g, v| {
            let mut b = cls_model.bind(g, Trainable::NONE)?;
            rebind(&mut b, v);
            b.embeddings.copy_from_slice(&v[6..]);
            let s = g.constant(cls_sem.clone())?;
            let x = g.constant(cls_images.clone())?;
            let out = cls_model.forward(g, &b, x, None)?;
            Ok(cls_model.losses(g, &b, &out, &labels, s)?.cls)
        }),
    );

    let cct_model = model.clone();
    let mut cct_inputs = part_params;
    cct_inputs.push(model.centers.c.clone());
    let cct = case(
        "probe_class_center_triplet",
        BILINEAR_TOLERANCE,
        cct_inputs,
        Box::new(move |g, v| {
            let mut b = cct_model.bind(g, Trainable::NONE)?;
            rebind(&mut b, v);
            b.centers = v[6];
            let s = g.constant(sem_t.clone())?;
            let x = g.constant(images.clone())?;
            let out = cct_model.forward(g, &b, x, None)?;
            Ok(cct_model.losses(g, &b, &out, &labels, s)?.cct)
        }),
    );
    let mut probes = vec![ma, cls, cct];
    for p in &mut probes {
        p.eps = PROBE_EPS;
    }
    Ok(probes)
}

/// Runs every check; errors only when a probe cannot be evaluated.
pub fn run_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let mut rng = seeded_rng(opts.seed);
    let mut cases = op_cases(&mut rng, opts.inject_diversity_fault)?;
    cases.extend(probe_cases(&mut rng, opts.inject_diversity_fault)?);
    let mut checks = Vec::with_capacity(cases.len());
    for c in cases {
        let err = grad_check_scaled(&c.f, &c.inputs, c.eps, REL_FLOOR)?;
        checks.push(CheckResult {
            name: c.name.to_string(),
            max_rel_error: err,
            tolerance: c.tolerance,
            passed: err <= c.tolerance,
        });
    }
    Ok(SuiteReport { checks })
}

//! Region cropping subnet.
//!
//! A two-layer net regresses a square box `(t_x, t_y, t_s)` in image pixels
//! from an attention map. The image is multiplied by a soft boxcar mask of
//! that box and the masked window is resampled to a fixed-size part image.
//!
//! Coordinates: origin at the top-left image corner, x along columns, y along
//! rows. Pixel `(r, c)` covers `[c, c+1) × [r, r+1)` and is evaluated at its
//! center `(c + 0.5, r + 0.5)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zsl_tensor::{logistic, Backward, Graph, Rng, Tensor, Var};

use crate::attention::{map_peak, AttentionMap};
use crate::error::{Error, Result};
use crate::params::ParamVisitor;

pub const DEFAULT_STEEPNESS: f64 = 10.0;
pub const BOXES_SIDECAR: &str = "boxes.txt";
/// Smallest window side accepted by [`apply_crop`].
pub const MIN_SIDE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Resample the predicted window of the masked image.
    #[default]
    Window,
    /// Resize the whole masked image.
    FullMasked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub t_x: f64,
    pub t_y: f64,
    pub t_s: f64,
}

impl CropParams {
    pub fn new(t_x: f64, t_y: f64, t_s: f64) -> Self {
        CropParams { t_x, t_y, t_s }
    }

    /// Rows of a [N,3] tensor.
    pub fn from_rows(t: &Tensor) -> Vec<CropParams> {
        t.data()
            .chunks(3)
            .map(|r| CropParams::new(r[0], r[1], r[2]))
            .collect()
    }

    pub fn to_tensor(params: &[CropParams]) -> Tensor {
        let data = params.iter().flat_map(|p| [p.t_x, p.t_y, p.t_s]).collect();
        Tensor::new(&[params.len(), 3], data).expect("three columns per box")
    }
}

/// `σ(u1) − σ(u2)` for `u1 ≥ u2`, without cancellation when both saturate.
fn sigmoid_diff(u1: f64, u2: f64) -> f64 {
    if u2 > 0.0 {
        logistic(-u2) - logistic(-u1)
    } else {
        logistic(u1) - logistic(u2)
    }
}

/// One-dimensional boxcar profile over `n` pixel centers.
pub fn boxcar_profile(center: f64, side: f64, k: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = i as f64 + 0.5;
            sigmoid_diff(k * (x - center + side / 2.0), k * (x - center - side / 2.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxcarMask {
    /// [H,W]
    pub values: Tensor,
    pub k: f64,
}

/// `V(x,y) = V_x(x)·V_y(y)` evaluated at pixel centers.
pub fn boxcar_mask(params: CropParams, k: f64, h: usize, w: usize) -> Result<BoxcarMask> {
    if !(k > 0.0) {
        return Err(Error::config(format!("boxcar steepness must be > 0, got {k}")));
    }
    let vx = boxcar_profile(params.t_x, params.t_s, k, w);
    let vy = boxcar_profile(params.t_y, params.t_s, k, h);
    let data = vy.iter().flat_map(|y| vx.iter().map(move |x| x * y)).collect();
    Ok(BoxcarMask {
        values: Tensor::new(&[h, w], data)?,
        k,
    })
}

struct BoxcarRule {
    k: f64,
    side: usize,
}

impl BoxcarRule {
    /// Profile value and its derivatives w.r.t. center and side at pixel `i`.
    fn profile(&self, center: f64, side: f64, i: usize) -> (f64, f64, f64) {
        let x = i as f64 + 0.5;
        let u1 = self.k * (x - center + side / 2.0);
        let u2 = self.k * (x - center - side / 2.0);
        let (a, b) = (logistic(u1), logistic(u2));
        let (da, db) = (self.k * a * (1.0 - a), self.k * b * (1.0 - b));
        (sigmoid_diff(u1, u2), db - da, 0.5 * (da + db))
    }
}

impl Backward for BoxcarRule {
    fn name(&self) -> &'static str {
        "boxcar_mask"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, go: &[f64]) -> Vec<Option<Vec<f64>>> {
        let t = inputs[0].data();
        let s = self.side;
        let mut grad = vec![0.0; t.len()];
        for (n, row) in t.chunks(3).enumerate() {
            let px: Vec<_> = (0..s).map(|i| self.profile(row[0], row[2], i)).collect();
            let py: Vec<_> = (0..s).map(|i| self.profile(row[1], row[2], i)).collect();
            let (mut gx, mut gy, mut gs) = (0.0, 0.0, 0.0);
            for (r, &(vy, dyc, dys)) in py.iter().enumerate() {
                for (c, &(vx, dxc, dxs)) in px.iter().enumerate() {
                    let g = go[n * s * s + r * s + c];
                    gx += g * dxc * vy;
                    gy += g * vx * dyc;
                    gs += g * (dxs * vy + vx * dys);
                }
            }
            grad[n * 3..n * 3 + 3].copy_from_slice(&[gx, gy, gs]);
        }
        vec![Some(grad)]
    }
}

/// Batched boxcar masks [N,S,S] from boxes `t` [N,3]; differentiable in `t`.
pub fn boxcar_mask_op(g: &mut Graph, t: Var, k: f64, side: usize) -> Result<Var> {
    let shape = g.shape(t);
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::config(format!("boxes must be [N,3], got {shape:?}")));
    }
    if !(k > 0.0) {
        return Err(Error::config(format!("boxcar steepness must be > 0, got {k}")));
    }
    let n = shape[0];
    let mut data = Vec::with_capacity(n * side * side);
    for p in CropParams::from_rows(g.value(t)) {
        data.extend(boxcar_mask(p, k, side, side)?.values.into_data());
    }
    let out = Tensor::new(&[n, side, side], data)?;
    Ok(g.custom(&[t], out, Box::new(BoxcarRule { k, side }))?)
}

/// Bilinear read of a zero-padded plane at fractional pixel-index position.
struct Tap {
    idx: [Option<usize>; 4],
    w: [f64; 4],
    /// d(weight)/d(col position), d(weight)/d(row position)
    dwx: [f64; 4],
    dwy: [f64; 4],
}

fn tap(row: f64, col: f64, h: usize, w: usize) -> Tap {
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let at = |r: f64, c: f64| {
        (r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w)
            .then(|| r as usize * w + c as usize)
    };
    Tap {
        idx: [
            at(r0, c0),
            at(r0, c0 + 1.0),
            at(r0 + 1.0, c0),
            at(r0 + 1.0, c0 + 1.0),
        ],
        w: [
            (1.0 - fr) * (1.0 - fc),
            (1.0 - fr) * fc,
            fr * (1.0 - fc),
            fr * fc,
        ],
        dwx: [-(1.0 - fr), 1.0 - fr, -fr, fr],
        dwy: [-(1.0 - fc), -fc, 1.0 - fc, fc],
    }
}

struct WindowRule {
    out: usize,
}

impl WindowRule {
    /// Pixel-index sample position of output cell `j` and its slope in `t_s`.
    fn position(&self, center: f64, side: f64, j: usize) -> (f64, f64) {
        let a = (j as f64 + 0.5) / self.out as f64 - 0.5;
        (center + a * side - 0.5, a)
    }
}

impl Backward for WindowRule {
    fn name(&self) -> &'static str {
        "window_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, go: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (img, t) = (inputs[0], inputs[1].data());
        let s = img.shape();
        let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let o = self.out;
        let mut gi = vec![0.0; img.numel()];
        let mut gt = vec![0.0; t.len()];
        for b in 0..n {
            let (tx, ty, ts) = (t[b * 3], t[b * 3 + 1], t[b * 3 + 2]);
            for i in 0..o {
                let (py, ay) = self.position(ty, ts, i);
                for j in 0..o {
                    let (px, ax) = self.position(tx, ts, j);
                    let tp = tap(py, px, h, w);
                    for c in 0..ch {
                        let plane = (b * ch + c) * h * w;
                        let g = go[((b * ch + c) * o + i) * o + j];
                        let (mut dx, mut dy) = (0.0, 0.0);
                        for q in 0..4 {
                            if let Some(k) = tp.idx[q] {
                                gi[plane + k] += g * tp.w[q];
                                let v = img.data()[plane + k];
                                dx += tp.dwx[q] * v;
                                dy += tp.dwy[q] * v;
                            }
                        }
                        gt[b * 3] += g * dx;
                        gt[b * 3 + 1] += g * dy;
                        gt[b * 3 + 2] += g * (dx * ax + dy * ay);
                    }
                }
            }
        }
        vec![Some(gi), Some(gt)]
    }
}

/// Resamples the square window of each box to `out × out` (bilinear, zero
/// padding outside the image). Differentiable in both image and boxes.
pub fn window_sample(g: &mut Graph, image: Var, t: Var, out: usize) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || g.shape(t) != [s[0], 3] {
        return Err(Error::config(format!(
            "window sampling needs image [N,C,H,W] and boxes [N,3], got {s:?} and {:?}",
            g.shape(t)
        )));
    }
    if out == 0 {
        return Err(Error::config("crop output size must be positive"));
    }
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let rule = WindowRule { out };
    let img = g.value(image).data();
    let boxes = CropParams::from_rows(g.value(t));
    let mut data = Vec::with_capacity(n * ch * out * out);
    for (b, p) in boxes.iter().enumerate() {
        for c in 0..ch {
            let plane = &img[(b * ch + c) * h * w..(b * ch + c + 1) * h * w];
            for i in 0..out {
                let py = rule.position(p.t_y, p.t_s, i).0;
                for j in 0..out {
                    let tp = tap(py, rule.position(p.t_x, p.t_s, j).0, h, w);
                    let v: f64 = (0..4)
                        .filter_map(|q| tp.idx[q].map(|k| tp.w[q] * plane[k]))
                        .sum();
                    data.push(v);
                }
            }
        }
    }
    let out_t = Tensor::new(&[n, ch, out, out], data)?;
    Ok(g.custom(&[image, t], out_t, Box::new(rule))?)
}

/// Part images [N,3,out,out]: the image times the boxcar mask of `t`, then
/// either the box window or the whole frame resampled to `out`.
pub fn apply_crop(g: &mut Graph, image: Var, t: Var, k: f64, out: usize, mode: CropMode) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::config(format!("expected square images [N,C,S,S], got {s:?}")));
    }
    if let Some(p) = CropParams::from_rows(g.value(t)).iter().find(|p| !(p.t_s >= MIN_SIDE)) {
        return Err(Error::Numeric(format!(
            "degenerate crop window: side {:.3} px is below {MIN_SIDE} px",
            p.t_s
        )));
    }
    let mask = boxcar_mask_op(g, t, k, s[2])?;
    let masked = g.mul_mask(image, mask)?;
    match mode {
        CropMode::Window => window_sample(g, masked, t, out),
        CropMode::FullMasked => Ok(g.bilinear_resize(masked, out, out)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoBox {
    pub p_x: f64,
    pub p_y: f64,
    pub t_s: f64,
}

impl PseudoBox {
    pub fn normalized(&self, image_size: usize) -> [f64; 3] {
        let s = image_size as f64;
        [self.p_x / s, self.p_y / s, self.t_s / s]
    }
}

/// Square of side `image_size / 4` centered at the map's peak.
pub fn pseudo_box(map: &AttentionMap, image_size: usize) -> PseudoBox {
    let sh = map.values.shape();
    pseudo_box_from(map.values.data(), sh[0], sh[1], image_size)
}

pub fn pseudo_box_from(values: &[f64], h: usize, w: usize, image_size: usize) -> PseudoBox {
    let (r, c) = map_peak(values, w);
    let s = image_size as f64;
    PseudoBox {
        p_x: (c as f64 + 0.5) * s / w as f64,
        p_y: (r as f64 + 0.5) * s / h as f64,
        t_s: s / 4.0,
    }
}

/// MSE over the three box components in units of the image side.
pub fn pretrain_crop_loss(g: &mut Graph, pred: Var, pseudo: &[PseudoBox], image_size: usize) -> Result<Var> {
    let data = pseudo.iter().flat_map(|p| p.normalized(image_size)).collect();
    let target = Tensor::new(&[pseudo.len(), 3], data)?;
    let norm = g.scale(pred, 1.0 / image_size as f64)?;
    Ok(g.mse(norm, &target)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropNet {
    pub image_size: usize,
    /// [hidden, H·W]
    pub w1: Tensor,
    pub b1: Tensor,
    /// [3, hidden]
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct BoundCropNet {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl CropNet {
    /// Random first layer, small second layer, output bias set so an
    /// all-zero hidden layer yields the box `normalized_bias` (units of the
    /// image side).
    pub fn init(
        map_positions: usize,
        hidden: usize,
        image_size: usize,
        normalized_bias: [f64; 3],
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = CropNet::zeros(map_positions, hidden, image_size, normalized_bias)?;
        net.w1 = Tensor::randn(&[hidden, map_positions], (2.0 / map_positions as f64).sqrt(), rng);
        net.w2 = Tensor::randn(&[3, hidden], 0.01, rng);
        Ok(net)
    }

    pub fn zeros(map_positions: usize, hidden: usize, image_size: usize, normalized_bias: [f64; 3]) -> Result<Self> {
        let [bx, by, bs] = normalized_bias;
        let side = (bs - 0.125) / 0.375;
        for v in [bx, by, side] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!(
                    "crop bias {normalized_bias:?} is outside the reachable box range"
                )));
            }
        }
        Ok(CropNet {
            image_size,
            w1: Tensor::zeros(&[hidden, map_positions]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[3, hidden]),
            b2: Tensor::new(&[3], vec![logit(bx), logit(by), logit(side)])?,
        })
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.w1"), &mut self.w1);
        v.visit(&format!("{prefix}.b1"), &mut self.b1);
        v.visit(&format!("{prefix}.w2"), &mut self.w2);
        v.visit(&format!("{prefix}.b2"), &mut self.b2);
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, train: bool) -> Result<BoundCropNet> {
        let mut bind = |name: &str, t: &Tensor| -> Result<Var> {
            Ok(if train {
                g.param(format!("{prefix}.{name}"), t)?
            } else {
                g.constant(t.clone())?
            })
        };
        Ok(BoundCropNet {
            w1: bind("w1", &self.w1)?,
            b1: bind("b1", &self.b1)?,
            w2: bind("w2", &self.w2)?,
            b2: bind("b2", &self.b2)?,
        })
    }

    /// Boxes [N,3] in pixels from maps [N,H,W]: centers in [0,S], side in [S/8, S/2].
    pub fn forward(&self, g: &mut Graph, bound: &BoundCropNet, maps: Var) -> Result<Var> {
        let s = g.shape(maps).to_vec();
        let positions = self.w1.shape()[1];
        if s.len() != 3 || s[1] * s[2] != positions {
            return Err(Error::config(format!(
                "crop net expects maps with {positions} positions, got {s:?}"
            )));
        }
        let flat = g.reshape(maps, &[s[0], positions])?;
        let h = g.fully_connected(flat, bound.w1, Some(bound.b1))?;
        let h = g.relu(h)?;
        let z = g.fully_connected(h, bound.w2, Some(bound.b2))?;
        let u = g.sigmoid(z)?;
        let size = self.image_size as f64;
        Ok(g.col_affine(u, &[size, size, 0.375 * size], &[0.0, 0.0, 0.125 * size])?)
    }
}

/// Crop parameters for one map, outside any training graph.
pub fn crop_params(net: &CropNet, map: &AttentionMap) -> Result<CropParams> {
    let mut g = Graph::new();
    let b = net.bind(&mut g, "crop", false)?;
    let sh = map.values.shape();
    let m = g.constant(map.values.clone().reshape(&[1, sh[0], sh[1]])?)?;
    let t = net.forward(&mut g, &b, m)?;
    Ok(CropParams::from_rows(g.value(t))[0])
}

/// Writes each part image as `sample{idx}_part{i}.ppm` (values clamped to
/// [0,1]) plus `boxes.txt` with one `sample part t_x t_y t_s` line per crop, each
/// value in shortest round-trip decimal form.
/// `parts[i]` is a batch [N,3,O,O] for part `i`; `boxes[i]` holds its N boxes.
pub fn export_crops(dir: &Path, first_sample: usize, parts: &[Tensor], boxes: &[Vec<CropParams>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut sidecar = String::new();
    for (part, (imgs, bx)) in parts.iter().zip(boxes).enumerate() {
        let s = imgs.shape();
        let (n, o) = (s[0], s[2]);
        for b in 0..n {
            let idx = first_sample + b;
            let mut bytes = format!("P6\n{o} {o}\n255\n").into_bytes();
            let base = b * 3 * o * o;
            for p in 0..o * o {
                for c in 0..3 {
                    let v = imgs.data()[base + c * o * o + p];
                    bytes.push((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
                }
            }
            fs::write(dir.join(format!("sample{idx}_part{part}.ppm")), bytes)?;
            let p = bx[b];
            let _ = writeln!(sidecar, "{idx} {part} {} {} {}", p.t_x, p.t_y, p.t_s);
        }
    }
    fs::write(dir.join(BOXES_SIDECAR), sidecar)?;
    Ok(())
}

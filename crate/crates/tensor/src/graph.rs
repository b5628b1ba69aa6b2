//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Node values are
//! immutable once recorded; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that requires them. Ops whose
//! backward rule lives outside this crate plug in through [`Backward`].

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside the engine.
///
/// Returns one entry per input in the same order as the inputs were given to
/// [`Graph::custom`]; `None` means "no gradient flows into this input".
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Relu,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Pointwise {
        kind: Pointwise,
        x: Var,
    },
    AvgPool2 {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    BilinearResize {
        x: Var,
    },
    L2Normalize {
        x: Var,
        eps: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        c: f64,
    },
    ColAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    AddN(Vec<Var>),
    ChannelWeightedSum {
        features: Var,
        weights: Var,
    },
    MulMask {
        x: Var,
        mask: Var,
    },
    Mse {
        x: Var,
        target: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op: op.to_string() })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic function, numerically safe for large |x|.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// A named trainable leaf; listed by [`Graph::param_grads`].
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Result<Var> {
        let v = self.variable(t.clone())?;
        self.params.push((name.into(), v));
        Ok(v)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last backward pass; all zeros when the
    /// node was not on a path to the loss.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    /// Copy of a node's value with its gradient slot filled.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.set_grad(self.grad(v)).expect("gradient length matches value");
        t
    }

    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), self.grad(*v)))
            .collect()
    }

    // ------------------------------------------------------------------
    // layer primitives

    /// Cross-correlation of `input` [N,Ci,H,W] with `kernel` [Co,Ci,kH,kW].
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", k, 4)?;
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
        }
        let [n, ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [co, kci, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
        if kci != ci {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels {ci} but kernel expects {kci}"),
            ));
        }
        if kh > h + 2 * pad {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel height {kh} exceeds padded height {}", h + 2 * pad),
            ));
        }
        if kw > w + 2 * pad {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel width {kw} exceeds padded width {}", w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geo = ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let mut out = vec![0.0; n * co * ho * wo];
        conv_forward(&geo, x.data(), k.data(), &mut out);
        let rg = self.rg(input) || self.rg(kernel);
        let value = Tensor::new(&[n, co, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Adds `bias` [C] to every position of channel c of `x` [N,C,H,W].
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        expect_rank("add_channel_bias", xv, 4)?;
        let c = xv.shape()[1];
        if bv.numel() != c {
            return Err(TensorError::shape(
                "add_channel_bias",
                format!("bias has {} entries for {c} channels", bv.numel()),
            ));
        }
        let hw = xv.shape()[2] * xv.shape()[3];
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let b = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_channel_bias", value, Op::ChannelBias { x, bias }, rg)
    }

    /// `x` [N,Din] · `weight`ᵀ [Din,Dout] + `bias` [Dout].
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        expect_rank("fully_connected", xv, 2)?;
        expect_rank("fully_connected", wv, 2)?;
        let (n, din) = (xv.shape()[0], xv.shape()[1]);
        let (dout, wdin) = (wv.shape()[0], wv.shape()[1]);
        if din != wdin {
            return Err(TensorError::shape(
                "fully_connected",
                format!("input width {din} but weight expects {wdin}"),
            ));
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.numel() != dout {
                return Err(TensorError::shape(
                    "fully_connected",
                    format!("bias has {} entries for output width {dout}", bv.numel()),
                ));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        for i in 0..n {
            let xr = &xv.data()[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wv.data()[o * din..(o + 1) * din];
                out[i * dout + o] += dot(xr, wr);
            }
        }
        let value = Tensor::new(&[n, dout], out)?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "fully_connected",
            value,
            Op::Linear {
                x,
                w: weight,
                b: bias,
            },
            rg,
        )
    }

    /// Plain matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul { a, b }, rg)
    }

    pub fn apply_pointwise(&mut self, kind: Pointwise, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = match kind {
            Pointwise::Sigmoid => xv.data().iter().map(|&v| sigmoid(v)).collect(),
            Pointwise::Relu => xv.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        self.push("pointwise", value, Op::Pointwise { kind, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply_pointwise(Pointwise::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply_pointwise(Pointwise::Relu, x)
    }

    /// 2×2 average downsampling (floor on odd extents).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("avg_pool2", xv, 4)?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        if h < 2 || w < 2 {
            return Err(TensorError::shape(
                "avg_pool2",
                format!("spatial extent {h}x{w} too small to downsample"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(x);
        self.push("avg_pool2", value, Op::AvgPool2 { x }, rg)
    }

    /// Mean over the spatial axes: [N,C,H,W] → [N,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("global_avg_pool", xv, 4)?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let hw = h * w;
        let out = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(x);
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x }, rg)
    }

    /// Align-corners bilinear resampling of [N,C,H,W] to [N,C,out_h,out_w].
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("bilinear_resize", xv, 4)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid(
                "bilinear_resize",
                "output size must be positive",
            ));
        }
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let ys = resize_taps(h, out_h);
        let xs = resize_taps(w, out_w);
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        let rg = self.rg(x);
        self.push("bilinear_resize", value, Op::BilinearResize { x }, rg)
    }

    /// Divides each row of [N,D] by max(‖row‖₂, eps).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("l2_normalize", xv, 2)?;
        let d = xv.shape()[1];
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        self.push("l2_normalize", value, Op::L2Normalize { x, eps }, rg)
    }

    // ------------------------------------------------------------------
    // elementwise and structural ops

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x);
        self.push("scale", value, Op::Scale { x, c }, rg)
    }

    /// Per-column affine map of [N,D]: y[:,j] = scale[j]·x[:,j] + shift[j].
    pub fn col_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("col_affine", xv, 2)?;
        let d = xv.shape()[1];
        if scale.len() != d || shift.len() != d {
            return Err(TensorError::shape(
                "col_affine",
                format!("{d} columns but {} scales / {} shifts", scale.len(), shift.len()),
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = scale[j] * row[j] + shift[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        self.push(
            "col_affine",
            value,
            Op::ColAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_cols", "empty input"));
        }
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            expect_rank("concat_cols", v, 2)?;
            if v.shape()[0] != n {
                return Err(TensorError::shape(
                    "concat_cols",
                    format!("row counts {} and {n} differ", v.shape()[0]),
                ));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * wd..(i + 1) * wd]);
            }
        }
        let value = Tensor::new(&[n, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Elementwise sum of equally shaped tensors, accumulated in order.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("add_n", "empty input"))?;
        let mut out = self.value(first).data().to_vec();
        for &p in &parts[1..] {
            self.same_shape("add_n", first, p)?;
            axpy(&mut out, self.value(p).data());
        }
        let value = Tensor::new(self.shape(first), out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("add_n", value, Op::AddN(parts.to_vec()), rg)
    }

    /// out[n,h,w] = Σ_c weights[n,c] · features[n,c,h,w].
    pub fn channel_weighted_sum(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (fv, av) = (self.value(features), self.value(weights));
        expect_rank("channel_weighted_sum", fv, 4)?;
        expect_rank("channel_weighted_sum", av, 2)?;
        let [n, c, h, w] = [fv.shape()[0], fv.shape()[1], fv.shape()[2], fv.shape()[3]];
        if av.shape() != [n, c] {
            return Err(TensorError::shape(
                "channel_weighted_sum",
                format!("weights {:?} for features {:?}", av.shape(), fv.shape()),
            ));
        }
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for i in 0..n {
            let dst = &mut out[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let a = av.data()[i * c + ch];
                let src = &fv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        let value = Tensor::new(&[n, h, w], out)?;
        let rg = self.rg(features) || self.rg(weights);
        self.push(
            "channel_weighted_sum",
            value,
            Op::ChannelWeightedSum { features, weights },
            rg,
        )
    }

    /// Multiplies every channel of `x` [N,C,H,W] by `mask` [N,H,W].
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(mask));
        expect_rank("mul_mask", xv, 4)?;
        expect_rank("mul_mask", mv, 3)?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        if mv.shape() != [n, h, w] {
            return Err(TensorError::shape(
                "mul_mask",
                format!("mask {:?} for image {:?}", mv.shape(), xv.shape()),
            ));
        }
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            let m = &mv.data()[(p / c) * hw..(p / c + 1) * hw];
            chunk.iter_mut().zip(m).for_each(|(v, mm)| *v *= mm);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(mask);
        self.push("mul_mask", value, Op::MulMask { x, mask }, rg)
    }

    /// Mean squared difference between `x` and a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(TensorError::shape(
                "mse",
                format!("{:?} vs target {:?}", xv.shape(), target.shape()),
            ));
        }
        let s = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(
            "mse",
            Tensor::scalar(s),
            Op::Mse {
                x,
                target: target.data().to_vec(),
            },
            rg,
        )
    }

    /// Mean negative log-softmax of the labelled entry of each row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank("softmax_cross_entropy", lv, 2)?;
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Records an externally computed `output` whose backward rule is `rule`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn Backward>) -> Result<Var> {
        let name = rule.name();
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    // ------------------------------------------------------------------
    // backward

    /// Reverse sweep from a scalar `loss`, seeding d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &gout)?;
            self.grads[idx] = Some(gout);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: format!("backward into node {}", v.0),
                    });
                }
                match &mut self.grads[v.0] {
                    Some(acc) => axpy(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                let geo = ConvGeom {
                    n: x.shape()[0],
                    ci: x.shape()[1],
                    h: x.shape()[2],
                    w: x.shape()[3],
                    co: k.shape()[0],
                    kh: k.shape()[2],
                    kw: k.shape()[3],
                    ho: out.shape()[2],
                    wo: out.shape()[3],
                    stride: *stride,
                    pad: *pad,
                };
                if self.rg(*input) {
                    let mut gx = vec![0.0; x.numel()];
                    conv_backward_input(&geo, k.data(), g, &mut gx);
                    res.push((*input, gx));
                }
                if self.rg(*kernel) {
                    let mut gk = vec![0.0; k.numel()];
                    conv_backward_kernel(&geo, x.data(), g, &mut gk);
                    res.push((*kernel, gk));
                }
            }
            Op::ChannelBias { x, bias } => {
                let c = out.shape()[1];
                let hw = out.shape()[2] * out.shape()[3];
                if self.rg(*bias) {
                    let mut gb = vec![0.0; c];
                    for (p, chunk) in g.chunks(hw).enumerate() {
                        gb[p % c] += chunk.iter().sum::<f64>();
                    }
                    res.push((*bias, gb));
                }
                res.push((*x, g.to_vec()));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.rg(*x) {
                    // gx = g · W
                    res.push((*x, matmul_raw(g, wv.data(), n, dout, din)));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; dout * din];
                    for i in 0..n {
                        let xr = &xv.data()[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let go = g[i * dout + o];
                            if go != 0.0 {
                                let row = &mut gw[o * din..(o + 1) * din];
                                row.iter_mut().zip(xr).for_each(|(r, xv)| *r += go * xv);
                            }
                        }
                    }
                    res.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        axpy(&mut gb, row);
                    }
                    res.push((*b, gb));
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if self.rg(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
            }
            Op::Pointwise { kind, x } => {
                let gx = match kind {
                    Pointwise::Sigmoid => g
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                    Pointwise::Relu => g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                res.push((*x, gx));
            }
            Op::AvgPool2 { x } => {
                let xv = self.value(*x);
                let (h, w) = (xv.shape()[2], xv.shape()[3]);
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let mut gx = vec![0.0; xv.numel()];
                for p in 0..xv.shape()[0] * xv.shape()[1] {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * src[y * wo + xx];
                            let i = 2 * y * w + 2 * xx;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + w] += v;
                            dst[i + w + 1] += v;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let hw = xv.shape()[2] * xv.shape()[3];
                let mut gx = vec![0.0; xv.numel()];
                for (p, chunk) in gx.chunks_mut(hw).enumerate() {
                    let v = g[p] / hw as f64;
                    chunk.iter_mut().for_each(|c| *c = v);
                }
                res.push((*x, gx));
            }
            Op::BilinearResize { x } => {
                let xv = self.value(*x);
                let (h, w) = (xv.shape()[2], xv.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let ys = resize_taps(h, oh);
                let xs = resize_taps(w, ow);
                let mut gx = vec![0.0; xv.numel()];
                for p in 0..xv.shape()[0] * xv.shape()[1] {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let go = src[oy * ow + ox];
                            dst[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += go * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += go * fy * (1.0 - fx);
                            dst[y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let mut gx = vec![0.0; xv.numel()];
                for (i, row) in xv.data().chunks(d).enumerate() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = &g[i * d..(i + 1) * d];
                    let dst = &mut gx[i * d..(i + 1) * d];
                    if norm > *eps {
                        let y = &out.data()[i * d..(i + 1) * d];
                        let yg = dot(y, gr);
                        for j in 0..d {
                            dst[j] = (gr[j] - y[j] * yg) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dst[j] = gr[j] / eps;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    res.push((*a, g.iter().zip(bv.data()).map(|(g, b)| g * b).collect()));
                }
                if self.rg(*b) {
                    res.push((*b, g.iter().zip(av.data()).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale { x, c } => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::ColAffine { x, scale } => {
                let d = scale.len();
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * scale[i % d])
                    .collect();
                res.push((*x, gx));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::ConcatCols(parts) => {
                let n = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.shape(p)[1];
                    let mut gp = Vec::with_capacity(n * wd);
                    for i in 0..n {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + wd]);
                    }
                    offset += wd;
                    res.push((p, gp));
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    res.push((p, g.to_vec()));
                }
            }
            Op::ChannelWeightedSum { features, weights } => {
                let (fv, av) = (self.value(*features), self.value(*weights));
                let [n, c, h, w] = [fv.shape()[0], fv.shape()[1], fv.shape()[2], fv.shape()[3]];
                let hw = h * w;
                if self.rg(*features) {
                    let mut gf = vec![0.0; fv.numel()];
                    for i in 0..n {
                        let gr = &g[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let a = av.data()[i * c + ch];
                            let dst = &mut gf[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            dst.iter_mut().zip(gr).for_each(|(d, gg)| *d = a * gg);
                        }
                    }
                    res.push((*features, gf));
                }
                if self.rg(*weights) {
                    let mut ga = vec![0.0; n * c];
                    for i in 0..n {
                        let gr = &g[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let src = &fv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            ga[i * c + ch] = dot(src, gr);
                        }
                    }
                    res.push((*weights, ga));
                }
            }
            Op::MulMask { x, mask } => {
                let (xv, mv) = (self.value(*x), self.value(*mask));
                let c = xv.shape()[1];
                let hw = xv.shape()[2] * xv.shape()[3];
                if self.rg(*x) {
                    let mut gx = g.to_vec();
                    for (p, chunk) in gx.chunks_mut(hw).enumerate() {
                        let m = &mv.data()[(p / c) * hw..(p / c + 1) * hw];
                        chunk.iter_mut().zip(m).for_each(|(v, mm)| *v *= mm);
                    }
                    res.push((*x, gx));
                }
                if self.rg(*mask) {
                    let mut gm = vec![0.0; mv.numel()];
                    for p in 0..xv.shape()[0] * c {
                        let dst = &mut gm[(p / c) * hw..(p / c + 1) * hw];
                        let gs = &g[p * hw..(p + 1) * hw];
                        let xs = &xv.data()[p * hw..(p + 1) * hw];
                        for z in 0..hw {
                            dst[z] += gs[z] * xs[z];
                        }
                    }
                    res.push((*mask, gm));
                }
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let k = 2.0 * g[0] / xv.numel() as f64;
                let gx = xv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(a, b)| k * (a - b))
                    .collect();
                res.push((*x, gx));
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let s = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= s;
                }
                res.push((*logits, gl));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = rule.backward(&ins, out, g);
                if grads.len() != inputs.len() {
                    return Err(TensorError::invalid(
                        "custom",
                        format!(
                            "{} returned {} gradients for {} inputs",
                            rule.name(),
                            grads.len(),
                            inputs.len()
                        ),
                    ));
                }
                for (&v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        if gv.len() != self.value(v).numel() {
                            return Err(TensorError::shape(
                                "custom",
                                format!("{} gradient length mismatch", rule.name()),
                            ));
                        }
                        res.push((v, gv));
                    }
                }
            }
        }
        Ok(res)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// [m,k]·[k,n] in row-major order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// Source taps (lo, hi, frac) for align-corners resampling along one axis.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst > 1 {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output index range along one axis whose tap `k` lands inside [0, extent).
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // o*s + k - p >= 0  and  o*s + k - p <= extent - 1
        let lo = ((p - k) + s - 1).div_euclid(s).max(0);
        let hi = ((extent as isize - 1 + p - k).div_euclid(s) + 1).min(out as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn src(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.pad
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for o in 0..g.co {
            let dst = &mut out[(n * g.co + o) * ohw..(n * g.co + o + 1) * ohw];
            for c in 0..g.ci {
                let src = &x[(n * g.ci + c) * hw..(n * g.ci + c + 1) * hw];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.ho);
                    for kx in 0..g.kw {
                        let kv = k[((o * g.ci + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.valid(kx, g.w, g.wo);
                        for y in y0..y1 {
                            let sy = g.src(y, ky);
                            let drow = &mut dst[y * g.wo..(y + 1) * g.wo];
                            let srow = &src[sy * g.w..(sy + 1) * g.w];
                            if g.stride == 1 {
                                let sx0 = g.src(x0, kx);
                                drow[x0..x1]
                                    .iter_mut()
                                    .zip(&srow[sx0..sx0 + (x1 - x0)])
                                    .for_each(|(d, s)| *d += kv * s);
                            } else {
                                for xx in x0..x1 {
                                    drow[xx] += kv * srow[g.src(xx, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeom, k: &[f64], gout: &[f64], gx: &mut [f64]) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for o in 0..g.co {
            let go = &gout[(n * g.co + o) * ohw..(n * g.co + o + 1) * ohw];
            for c in 0..g.ci {
                let dst = &mut gx[(n * g.ci + c) * hw..(n * g.ci + c + 1) * hw];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.ho);
                    for kx in 0..g.kw {
                        let kv = k[((o * g.ci + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.valid(kx, g.w, g.wo);
                        for y in y0..y1 {
                            let sy = g.src(y, ky);
                            let grow = &go[y * g.wo..(y + 1) * g.wo];
                            let drow = &mut dst[sy * g.w..(sy + 1) * g.w];
                            if g.stride == 1 {
                                let sx0 = g.src(x0, kx);
                                drow[sx0..sx0 + (x1 - x0)]
                                    .iter_mut()
                                    .zip(&grow[x0..x1])
                                    .for_each(|(d, s)| *d += kv * s);
                            } else {
                                for xx in x0..x1 {
                                    drow[g.src(xx, kx)] += kv * grow[xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(g: &ConvGeom, x: &[f64], gout: &[f64], gk: &mut [f64]) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for o in 0..g.co {
            let go = &gout[(n * g.co + o) * ohw..(n * g.co + o + 1) * ohw];
            for c in 0..g.ci {
                let src = &x[(n * g.ci + c) * hw..(n * g.ci + c + 1) * hw];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.ho);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid(kx, g.w, g.wo);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = g.src(y, ky);
                            let grow = &go[y * g.wo..(y + 1) * g.wo];
                            let srow = &src[sy * g.w..(sy + 1) * g.w];
                            if g.stride == 1 {
                                let sx0 = g.src(x0, kx);
                                acc += dot(&grow[x0..x1], &srow[sx0..sx0 + (x1 - x0)]);
                            } else {
                                for xx in x0..x1 {
                                    acc += grow[xx] * srow[g.src(xx, kx)];
                                }
                            }
                        }
                        gk[((o * g.ci + c) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

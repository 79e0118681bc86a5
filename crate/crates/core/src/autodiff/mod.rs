//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes only ever
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep. The tape is
//! consumed by `backward`; a new one is built for every forward pass.
//!
//! Trainable weights live outside the tape in a [`ParamSet`]; they enter a
//! pass through [`Tape::param`] and receive accumulated gradients when the
//! tape is swept.

pub(crate) mod kernels;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::bilinear;
use kernels::{Cell, ConvGeom};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a [`Parameter`] inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Ordered collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Batch-norm operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    /// Number of train-mode updates applied so far.
    pub updates: u64,
}

impl RunningStats {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            updates: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Leaf {
    Input,
    Constant,
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf(Leaf),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    DeformConv {
        input: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cells: Vec<Vec<Cell>>,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    Sum(Var),
    Dice {
        pred: Var,
        target: Tensor,
        smooth: f64,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(Error::shape(format!(
            "{what} must be rank 4 [N,C,H,W], got {:?}",
            t.shape()
        )));
    }
    Ok(t.dims4())
}

/// Whether `b` broadcasts against `a` from `[N,H,W]` across the channel axis.
fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if a.len() == 4 && b.len() == 3 && a[0] == b[0] && a[2] == b[1] && a[3] == b[2] {
        return Ok(true);
    }
    Err(Error::shape(format!(
        "cannot broadcast {b:?} against {a:?}"
    )))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(x, y)| *x += y),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf whose gradient is reported in [`Gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf(Leaf::Input), t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf(Leaf::Constant), t, false)
    }

    /// Records the current value of a parameter; `backward` accumulates
    /// into its gradient.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let value = params.get(id).value.clone();
        self.push(Op::Leaf(Leaf::Param(id)), value, true)
    }

    /// Same-size 2D convolution with zero padding, stride 1.
    ///
    /// `input` is `[N,Cin,H,W]`, `weight` `[Cout,Cin,k,k]` with `k` odd,
    /// `bias` `[Cout]`, and `padding` must equal `(k-1)/2`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = as4(self.value(input), "conv2d input")?;
        let [cout, wcin, kh, kw] = as4(self.value(weight), "conv2d weight")?;
        check_conv_params(cin, wcin, kh, kw, cout, self.value(bias))?;
        if padding != (kh - 1) / 2 {
            return Err(Error::invalid(format!(
                "padding {padding} does not preserve size for kernel {kh}"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            k: kh,
            pad: padding,
        };
        let rows = geom.col_rows();
        let hw = geom.pixels();
        let mut cols = vec![0.0; n * rows * hw];
        let x = self.value(input).data();
        for s in 0..n {
            kernels::im2col(
                &x[s * cin * hw..(s + 1) * cin * hw],
                geom,
                &mut cols[s * rows * hw..(s + 1) * rows * hw],
            );
        }
        let out = conv_from_cols(
            &cols,
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            cout,
            rows,
            hw,
        );
        let out = Tensor::new(&[n, cout, h, w], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            out,
            rg,
        ))
    }

    /// Convolution sampling the input at `p + p_c + Δp_c` with bilinear
    /// interpolation. `offsets` is `[N, 2k², H, W]` holding `(Δy, Δx)` per
    /// tap, taps in raster order from `(-1,-1)` to `(1,1)` for `k = 3`.
    pub fn deform_conv2d(
        &mut self,
        input: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
    ) -> Result<Var> {
        let [n, cin, h, w] = as4(self.value(input), "deform_conv2d input")?;
        let [cout, wcin, kh, kw] = as4(self.value(weight), "deform_conv2d weight")?;
        check_conv_params(cin, wcin, kh, kw, cout, self.value(bias))?;
        let taps = kh * kw;
        let [on, oc, oh, ow] = as4(self.value(offsets), "offset field")?;
        if on != n || oc != 2 * taps || oh != h || ow != w {
            return Err(Error::shape(format!(
                "offset field must be [{n},{},{h},{w}], got {:?}",
                2 * taps,
                self.value(offsets).shape()
            )));
        }
        if !self.value(offsets).all_finite() {
            return Err(Error::NonFinite("offset field".into()));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            k: kh,
            pad: (kh - 1) / 2,
        };
        let rows = geom.col_rows();
        let hw = geom.pixels();
        let x = self.value(input).data();
        let off = self.value(offsets).data();
        let mut cols = vec![0.0; n * rows * hw];
        let mut cells = Vec::with_capacity(n);
        for s in 0..n {
            let c = kernels::deform_cells(&off[s * 2 * taps * hw..(s + 1) * 2 * taps * hw], geom);
            kernels::deform_im2col(
                &x[s * cin * hw..(s + 1) * cin * hw],
                geom,
                &c,
                &mut cols[s * rows * hw..(s + 1) * rows * hw],
            );
            cells.push(c);
        }
        let out = conv_from_cols(
            &cols,
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            cout,
            rows,
            hw,
        );
        let out = Tensor::new(&[n, cout, h, w], out)?;
        let rg = self.rg(input) || self.rg(offsets) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Op::DeformConv {
                input,
                offsets,
                weight,
                bias,
                geom,
                cells,
                cols,
            },
            out,
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        let rg = self.rg(x);
        self.push(Op::Relu(x), out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), out, rg)
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics and updates `stats` by
    /// exponential moving average; eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = as4(self.value(x), "batch_norm input")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm affine parameters must be [{c}]"
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(format!(
                "running stats have {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::invalid(
                "batch_norm in train mode needs at least two values per channel",
            ));
        }
        if !train && stats.updates == 0 {
            log::warn!("batch_norm evaluated before any training step; using initial statistics");
        }
        let xd = self.value(x).data();
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; xd.len()];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for s_ in 0..n {
                    let base = (s_ * c + ch) * hw;
                    s += xd[base..base + hw].iter().sum::<f64>();
                }
                let mean = s / m as f64;
                let mut ss = 0.0;
                for s_ in 0..n {
                    let base = (s_ * c + ch) * hw;
                    ss += xd[base..base + hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = ss / m as f64;
                let mo = stats.momentum;
                stats.mean[ch] = (1.0 - mo) * stats.mean[ch] + mo * mean;
                stats.var[ch] = (1.0 - mo) * stats.var[ch] + mo * var * m as f64 / (m - 1) as f64;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + stats.eps).sqrt();
            inv_std[ch] = is;
            for s_ in 0..n {
                let base = (s_ * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean) * is;
                }
            }
        }
        if train {
            stats.updates += 1;
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for s_ in 0..n {
            for ch in 0..c {
                let base = (s_ * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            out,
            rg,
        ))
    }

    /// Elementwise sum; `b` may be `[N,H,W]` broadcast across channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = broadcast_kind(self.value(a).shape(), self.value(b).shape())?;
        let out = self.binary(a, b, broadcast, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b, broadcast }, out, rg))
    }

    /// Elementwise product; `b` may be `[N,H,W]` broadcast across channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = broadcast_kind(self.value(a).shape(), self.value(b).shape())?;
        let out = self.binary(a, b, broadcast, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b, broadcast }, out, rg))
    }

    fn binary(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        if !broadcast {
            return av.zip_map(bv, f).expect("shapes checked");
        }
        let [n, c, h, w] = av.dims4();
        let hw = h * w;
        let ad = av.data();
        let bd = bv.data();
        let mut out = Tensor::zeros(av.shape());
        let od = out.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in 0..hw {
                    od[base + p] = f(ad[base + p], bd[s * hw + p]);
                }
            }
        }
        out
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), out, rg)
    }

    /// Soft Dice loss `1 − (2Σp·t + s)/(Σp + Σt + s)` against a fixed
    /// binary target.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(format!(
                "dice_loss prediction {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        if smooth <= 0.0 {
            return Err(Error::invalid("dice smoothing term must be positive"));
        }
        let (inter, union) = dice_terms(self.value(pred).data(), target.data());
        let loss = 1.0 - (2.0 * inter + smooth) / (union + smooth);
        let rg = self.rg(pred);
        Ok(self.push(
            Op::Dice {
                pred,
                target: target.clone(),
                smooth,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = as4(self.value(x), "avg_pool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "avg_pool2 needs even spatial dims, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::AvgPool2(x), out, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = as4(self.value(x), "upsample2 input")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Upsample2(x), out, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = as4(self.value(a), "concat lhs")?;
        let [nb, cb, hb, wb] = as4(self.value(b), "concat rhs")?;
        if n != nb || h != hb || w != wb {
            return Err(Error::shape(format!(
                "concat operands {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bd[s * cb * hw..(s + 1) * cb * hw]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat(a, b), out, rg))
    }

    /// Hash of every discrete branch taken during the forward pass: ReLU
    /// activity patterns, bilinear sample cells, and constant leaves.
    /// Finite-difference checks compare signatures to detect when a
    /// perturbation crossed a kink.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::DeformConv { cells, .. } => {
                    for c in cells.iter().flatten() {
                        (c.y0, c.x0).hash(&mut h);
                    }
                }
                Op::Leaf(Leaf::Constant) => {
                    for v in node.value.data() {
                        v.to_bits().hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from the scalar `loss`. Parameter gradients are
    /// accumulated into `params`; the tape is consumed.
    pub fn backward(self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop_node(&nodes, i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (node, g) in nodes.iter().zip(&mut grads) {
            match node.op {
                Op::Leaf(Leaf::Param(id)) => {
                    if let Some(g) = g {
                        let p = params.get_mut(id);
                        if p.grad.shape() != g.shape() {
                            return Err(Error::Internal(format!(
                                "parameter {} changed shape during the pass",
                                p.name
                            )));
                        }
                        p.grad
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, b)| *a += b);
                    }
                }
                Op::Leaf(Leaf::Constant) => *g = None,
                _ => {
                    if !node.requires_grad {
                        *g = None;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn check_conv_params(
    cin: usize,
    wcin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &Tensor,
) -> Result<()> {
    if wcin != cin {
        return Err(Error::shape(format!(
            "input has {cin} channels but weights expect {wcin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!(
            "kernel must be square with odd size, got {kh}×{kw}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    Ok(())
}

fn conv_from_cols(
    cols: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    cout: usize,
    rows: usize,
    hw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * hw];
    for s in 0..n {
        let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
        for (co, &b) in bias.iter().enumerate() {
            o[co * hw..(co + 1) * hw].fill(b);
        }
        kernels::gemm(
            cout,
            rows,
            hw,
            weight,
            false,
            &cols[s * rows * hw..(s + 1) * rows * hw],
            false,
            1.0,
            o,
        );
    }
    out
}

fn conv_param_grads(
    g: &[f64],
    cols: &[f64],
    weight: &[f64],
    n: usize,
    cout: usize,
    rows: usize,
    hw: usize,
    want_dcols: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; cout * rows];
    let mut db = vec![0.0; cout];
    let mut dcols = if want_dcols {
        vec![0.0; n * rows * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
        for co in 0..cout {
            db[co] += gs[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        kernels::gemm(
            cout,
            hw,
            rows,
            gs,
            false,
            &cols[s * rows * hw..(s + 1) * rows * hw],
            true,
            1.0,
            &mut dw,
        );
        if want_dcols {
            kernels::gemm(
                rows,
                cout,
                hw,
                weight,
                true,
                gs,
                false,
                0.0,
                &mut dcols[s * rows * hw..(s + 1) * rows * hw],
            );
        }
    }
    (dw, db, dcols)
}

fn backprop_node(
    nodes: &[Node],
    i: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    match &nodes[i].op {
        Op::Leaf(_) => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let [n, cin, h, w] = val(*input).dims4();
            let cout = val(*weight).shape()[0];
            let rows = geom.col_rows();
            let hw = h * w;
            let (dw, db, dcols) = conv_param_grads(
                gd,
                cols,
                val(*weight).data(),
                n,
                cout,
                rows,
                hw,
                rg(*input),
            );
            if rg(*input) {
                let mut dx = vec![0.0; n * cin * hw];
                for s in 0..n {
                    kernels::col2im(
                        &dcols[s * rows * hw..(s + 1) * rows * hw],
                        *geom,
                        &mut dx[s * cin * hw..(s + 1) * cin * hw],
                    );
                }
                accumulate(&mut grads[input.0], Tensor::new(val(*input).shape(), dx)?);
            }
            if rg(*weight) {
                accumulate(&mut grads[weight.0], Tensor::new(val(*weight).shape(), dw)?);
            }
            if rg(*bias) {
                accumulate(&mut grads[bias.0], Tensor::new(&[cout], db)?);
            }
        }
        Op::DeformConv {
            input,
            offsets,
            weight,
            bias,
            geom,
            cells,
            cols,
        } => {
            let [n, cin, h, w] = val(*input).dims4();
            let cout = val(*weight).shape()[0];
            let rows = geom.col_rows();
            let hw = h * w;
            let taps = geom.taps();
            let need_cols = rg(*input) || rg(*offsets);
            let (dw, db, dcols) = conv_param_grads(
                gd,
                cols,
                val(*weight).data(),
                n,
                cout,
                rows,
                hw,
                need_cols,
            );
            if need_cols {
                let xd = val(*input).data();
                let mut dx = rg(*input).then(|| vec![0.0; n * cin * hw]);
                let mut doff = rg(*offsets).then(|| vec![0.0; n * 2 * taps * hw]);
                for s in 0..n {
                    kernels::deform_col2im(
                        &dcols[s * rows * hw..(s + 1) * rows * hw],
                        &xd[s * cin * hw..(s + 1) * cin * hw],
                        *geom,
                        &cells[s],
                        dx.as_mut()
                            .map(|d| &mut d[s * cin * hw..(s + 1) * cin * hw]),
                        doff.as_mut()
                            .map(|d| &mut d[s * 2 * taps * hw..(s + 1) * 2 * taps * hw]),
                    );
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[input.0], Tensor::new(val(*input).shape(), dx)?);
                }
                if let Some(doff) = doff {
                    accumulate(
                        &mut grads[offsets.0],
                        Tensor::new(val(*offsets).shape(), doff)?,
                    );
                }
            }
            if rg(*weight) {
                accumulate(&mut grads[weight.0], Tensor::new(val(*weight).shape(), dw)?);
            }
            if rg(*bias) {
                accumulate(&mut grads[bias.0], Tensor::new(&[cout], db)?);
            }
        }
        Op::Relu(x) => {
            let dx = val(*x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
            accumulate(&mut grads[x.0], dx);
        }
        Op::Sigmoid(x) => {
            let dx = nodes[i].value.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
            accumulate(&mut grads[x.0], dx);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let [n, c, h, w] = val(*input).dims4();
            let hw = h * w;
            let m = (n * hw) as f64;
            let gam = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for p in base..base + hw {
                        dgamma[ch] += gd[p] * xhat[p];
                        dbeta[ch] += gd[p];
                    }
                }
            }
            if rg(*input) {
                let mut dx = vec![0.0; gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch];
                        for p in base..base + hw {
                            dx[p] = if *train {
                                k / m * (m * gd[p] - dbeta[ch] - xhat[p] * dgamma[ch])
                            } else {
                                k * gd[p]
                            };
                        }
                    }
                }
                accumulate(&mut grads[input.0], Tensor::new(val(*input).shape(), dx)?);
            }
            if rg(*gamma) {
                accumulate(&mut grads[gamma.0], Tensor::new(&[c], dgamma)?);
            }
            if rg(*beta) {
                accumulate(&mut grads[beta.0], Tensor::new(&[c], dbeta)?);
            }
        }
        Op::Add { a, b, broadcast } => {
            if rg(*a) {
                accumulate(&mut grads[a.0], g.clone());
            }
            if rg(*b) {
                let db = if *broadcast {
                    reduce_channels(g)
                } else {
                    g.clone()
                };
                accumulate(&mut grads[b.0], db);
            }
        }
        Op::Mul { a, b, broadcast } => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let da = if *broadcast {
                    let [n, c, h, w] = g.dims4();
                    let hw = h * w;
                    let bd = bv.data();
                    let mut da = g.clone();
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                da.data_mut()[base + p] *= bd[s * hw + p];
                            }
                        }
                    }
                    da
                } else {
                    g.zip_map(bv, |x, y| x * y)?
                };
                accumulate(&mut grads[a.0], da);
            }
            if rg(*b) {
                let prod = g.zip_map(av, |x, y| x * y)?;
                let db = if *broadcast {
                    reduce_channels(&prod)
                } else {
                    prod
                };
                accumulate(&mut grads[b.0], db);
            }
        }
        Op::Scale(a, s) => {
            accumulate(&mut grads[a.0], g.map(|v| v * s));
        }
        Op::Sum(a) => {
            accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), gd[0]));
        }
        Op::Dice {
            pred,
            target,
            smooth,
        } => {
            let p = val(*pred);
            let (inter, union) = dice_terms(p.data(), target.data());
            let num = 2.0 * inter + smooth;
            let den = union + smooth;
            let up = gd[0];
            let dp = target.map(|t| up * -(2.0 * t * den - num) / (den * den));
            accumulate(&mut grads[pred.0], dp);
        }
        Op::AvgPool2(x) => {
            let [n, c, h, w] = val(*x).dims4();
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = 0.25 * src[(y / 2) * ow + xx / 2];
                    }
                }
            }
            accumulate(&mut grads[x.0], Tensor::new(val(*x).shape(), dx)?);
        }
        Op::Upsample2(x) => {
            let [n, c, h, w] = val(*x).dims4();
            let ow = 2 * w;
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let src = &gd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..2 * h {
                    for xx in 0..ow {
                        dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                    }
                }
            }
            accumulate(&mut grads[x.0], Tensor::new(val(*x).shape(), dx)?);
        }
        Op::Concat(a, b) => {
            let [n, ca, h, w] = val(*a).dims4();
            let cb = val(*b).dims4()[1];
            let hw = h * w;
            let mut da = Vec::with_capacity(n * ca * hw);
            let mut db = Vec::with_capacity(n * cb * hw);
            for s in 0..n {
                let base = s * (ca + cb) * hw;
                da.extend_from_slice(&gd[base..base + ca * hw]);
                db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
            }
            if rg(*a) {
                accumulate(&mut grads[a.0], Tensor::new(val(*a).shape(), da)?);
            }
            if rg(*b) {
                accumulate(&mut grads[b.0], Tensor::new(val(*b).shape(), db)?);
            }
        }
    }
    Ok(())
}

/// Sum a `[N,C,H,W]` tensor over channels into `[N,H,W]`.
fn reduce_channels(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, h, w]);
    let od = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for p in 0..hw {
                od[s * hw + p] += t.data()[base + p];
            }
        }
    }
    out
}

fn dice_terms(p: &[f64], t: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let union: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
    (inter, union)
}

/// `1/(1+e^{-x})` without overflow for large `|x|`.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;

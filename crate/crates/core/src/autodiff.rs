//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]. Nodes whose
//! inputs are all constants are stored without a backward rule, so frozen
//! sub-graphs cost nothing during [`Tape::backward`]. A tape is confined to one
//! thread; the tensors it produces are plain values that can move anywhere.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    AddConst,
    MulConst(Tensor),
    Scale(f64),
    Sum,
    Relu,
    LeakyRelu(f64),
    Conv { geom: ConvGeom, has_bias: bool },
    InstanceNorm { inv_std: Vec<f64>, m: usize },
    NnUpsample(usize),
    DownsampleAvg(usize),
    Blur(Vec<f64>),
    Softmax { m: usize },
    Concat { channels: Vec<usize> },
    ChannelAffine { perm: Vec<usize>, scale: Vec<f64> },
    Gram { c: usize, m: usize },
    MatMul { m: usize, k: usize, n: usize },
    Reshape,
    Kl { target: Tensor, eps: f64, batch: usize },
}

impl Op {
    fn is_kink(&self) -> bool {
        matches!(self, Op::Relu | Op::LeakyRelu(_))
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Option<Op>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Recording of the operations that produced a set of values.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with zeros standing in for an unreached leaf.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    fn push(&self, value: Tensor, op: Op, inputs: Vec<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        let keep = requires_grad || op.is_kink();
        nodes.push(Node {
            value: Rc::new(value),
            op: keep.then_some(op),
            inputs: if keep { inputs } else { Vec::new() },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?
            .value();
        let (n, _, h, w) = first.dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.value().dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!(
                    "concat extents differ: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&channels) {
                let v = p.value();
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, total, h, w], data),
            Op::Concat { channels },
            parts.iter().map(|p| p.id).collect(),
        ))
    }

    /// Inputs to every rectifier recorded on the tape, in recording order.
    /// The gradient checker compares these across perturbations to detect
    /// kink crossings.
    pub fn kink_inputs(&self) -> Vec<Rc<Tensor>> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter(|n| n.op.as_ref().is_some_and(Op::is_kink))
            .map(|n| Rc::clone(&nodes[n.inputs[0]].value))
            .collect()
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let want: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let input_grads = backward_op(op, &g, &ins, &node.value, &want);
            for ((&i, gi), w) in node.inputs.iter().zip(input_grads).zip(want) {
                if !w {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match grads[i].as_mut() {
                    Some(acc) => acc.add_assign(&gi),
                    None => grads[i] = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (n, ic, h, wd) = x.dims4()?;
    let (oc, wic, kh, kw) = w.dims4()?;
    if stride == 0 {
        return Err(shape_err!("conv stride must be positive"));
    }
    if wic != ic {
        return Err(shape_err!(
            "conv input has {} channels but the weight expects {}",
            ic,
            wic
        ));
    }
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    if ph < kh || pw < kw {
        return Err(shape_err!(
            "conv kernel {}x{} does not fit padded input {}x{}",
            kh,
            kw,
            ph,
            pw
        ));
    }
    Ok(ConvGeom {
        n,
        ic,
        h,
        w: wd,
        oc,
        kh,
        kw,
        stride,
        pad,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    })
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// A constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, vec![self.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(self.tape.push(v, Op::Add, vec![self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.tape.push(v, Op::Sub, vec![self.id, other.id]))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.tape.push(v, Op::Mul, vec![self.id, other.id]))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.push(v, Op::Mul, vec![self.id, self.id])
    }

    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let v = self.value().add(c)?;
        Ok(self.unary(v, Op::AddConst))
    }

    pub fn sub_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let v = self.value().sub(c)?;
        Ok(self.unary(v, Op::AddConst))
    }

    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let v = self.value().mul(c)?;
        Ok(self.unary(v, Op::MulConst(c.clone())))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let v = self.value().scale(k);
        self.unary(v, Op::Scale(k))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(slope))
    }

    /// 2-D convolution. Output extents are
    /// `floor((H + 2 pad - kH) / stride) + 1` per axis.
    pub fn conv2d(&self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let geom = conv_geom(&x, &w, stride, pad)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.numel() != geom.oc {
                return Err(shape_err!("bias has {} entries, expected {}", b.numel(), geom.oc));
            }
        }
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.as_deref().map(Tensor::data));
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![geom.n, geom.oc, geom.oh, geom.ow], out),
            Op::Conv {
                geom,
                has_bias: bias.is_some(),
            },
            inputs,
        ))
    }

    pub fn conv1x1(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
            return Err(shape_err!("conv1x1 needs an [out, in, 1, 1] weight, got {:?}", ws));
        }
        self.conv2d(weight, bias, 1, 0)
    }

    /// Per-(batch, channel) standardization with population variance.
    pub fn instance_norm(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let m = h * w;
        if m < 2 {
            return Err(Error::Degenerate(format!(
                "instance norm over a single spatial position (shape {:?})",
                x.shape()
            )));
        }
        let (out, inv_std) = kernels::instance_norm_forward(x.data(), n * c, m, eps);
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::InstanceNorm { inv_std, m },
        ))
    }

    pub fn nn_upsample(&self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(shape_err!("upsample factor must be positive"));
        }
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let out = kernels::nn_upsample(x.data(), n * c, h, w, factor);
        Ok(self.unary(
            Tensor::from_parts(vec![n, c, h * factor, w * factor], out),
            Op::NnUpsample(factor),
        ))
    }

    pub fn downsample_avg(&self, factor: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = downsample_avg(&x, factor)?;
        Ok(self.unary(out, Op::DownsampleAvg(factor)))
    }

    /// Depthwise Gaussian blur; see [`gaussian_blur`].
    pub fn gaussian_blur(&self, sigma: f64) -> Result<Var<'t>> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("blur sigma must be positive, got {sigma}")));
        }
        let x = self.value();
        let (_, _, h, w) = x.dims4()?;
        let taps = kernels::gaussian_kernel_1d(sigma);
        let out = kernels::blur_planes(x.data(), h, w, &taps);
        Ok(self.unary(Tensor::from_parts(x.shape().to_vec(), out), Op::Blur(taps)))
    }

    /// Soft-max over the spatial positions of every `(batch, channel)` plane.
    pub fn softmax_spatial(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, _, h, w) = x.dims4()?;
        let out = kernels::softmax_planes(x.data(), h * w);
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax { m: h * w },
        ))
    }

    /// `out[c] = scale[c] * in[perm[c]] + shift[c]` on a 4-D tensor.
    pub fn channel_affine(&self, perm: &[usize], scale: &[f64], shift: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if perm.len() != c || scale.len() != c || shift.len() != c || perm.iter().any(|&p| p >= c) {
            return Err(shape_err!("channel affine parameters do not match {} channels", c));
        }
        let hw = h * w;
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for co in 0..c {
                let src = x.plane(b, perm[co]);
                let dst = &mut out[(b * c + co) * hw..(b * c + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = scale[co] * s + shift[co];
                }
            }
        }
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::ChannelAffine {
                perm: perm.to_vec(),
                scale: scale.to_vec(),
            },
        ))
    }

    /// Per-batch Gram matrices `G = F F^T / M` of a `[B, C, H, W]` tensor,
    /// where `F` is the `C x M` matrix of flattened feature maps.
    pub fn gram(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let m = h * w;
        let mut out = vec![0.0; n * c * c];
        for b in 0..n {
            let f = &x.data()[b * c * m..(b + 1) * c * m];
            kernels::gemm(c, m, c, 1.0 / m as f64, f, m, 1, f, 1, m, 0.0, &mut out[b * c * c..(b + 1) * c * c], c, 1);
        }
        Ok(self.unary(Tensor::from_parts(vec![n, c, c], out), Op::Gram { c, m }))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(shape_err!("matmul needs 2-D operands, got {:?} and {:?}", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {} vs {}", k, k2));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, a.data(), k, 1, b.data(), n, 1, 0.0, &mut out, n, 1);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { m, k, n },
            vec![self.id, other.id],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape))
    }

    /// Batch-mean of `sum p_t log(p_t / max(self, eps))` over each plane,
    /// with `0 log 0 = 0`. `self` is the predicted density.
    pub fn kl_from_target(&self, target: &Tensor, eps: f64) -> Result<Var<'t>> {
        let q = self.value();
        if q.shape() != target.shape() {
            return Err(shape_err!(
                "KL extents differ: target {:?} vs prediction {:?}",
                target.shape(),
                q.shape()
            ));
        }
        let batch = q.shape().first().copied().unwrap_or(1).max(1);
        let v = kl_sum(target.data(), q.data(), eps) / batch as f64;
        Ok(self.unary(
            Tensor::scalar(v),
            Op::Kl {
                target: target.clone(),
                eps,
                batch,
            },
        ))
    }
}

pub(crate) fn kl_sum(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pt, &qh)| if pt > 0.0 { pt * (pt / qh.max(eps)).ln() } else { 0.0 })
        .sum()
}

/// Block-average down-sampling of a 4-D tensor.
pub fn downsample_avg(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(shape_err!("downsample factor must be positive"));
    }
    let (n, c, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(shape_err!(
            "extents {}x{} are not divisible by {}",
            h,
            w,
            factor
        ));
    }
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = kernels::block_sum(x.data(), n * c, h, w, factor);
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![n, c, h / factor, w / factor], out))
}

fn backward_op(op: &Op, g: &Tensor, ins: &[&Tensor], out: &Tensor, want: &[bool]) -> Vec<Option<Tensor>> {
    let shape_of = |t: &Tensor| t.shape().to_vec();
    match op {
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
        Op::Mul => vec![
            want[0].then(|| g.mul(ins[1]).expect("shape checked at record time")),
            want[1].then(|| g.mul(ins[0]).expect("shape checked at record time")),
        ],
        Op::AddConst | Op::Reshape => {
            vec![Some(Tensor::from_parts(shape_of(ins[0]), g.data().to_vec()))]
        }
        Op::MulConst(c) => vec![Some(g.mul(c).expect("shape checked at record time"))],
        Op::Scale(k) => vec![Some(g.scale(*k))],
        Op::Sum => vec![Some(Tensor::full(ins[0].shape(), g.item()))],
        Op::Relu => vec![Some(
            g.zip_map(ins[0], |gi, x| if x > 0.0 { gi } else { 0.0 })
                .expect("same shape"),
        )],
        Op::LeakyRelu(s) => vec![Some(
            g.zip_map(ins[0], |gi, x| if x > 0.0 { gi } else { s * gi })
                .expect("same shape"),
        )],
        Op::Conv { geom, has_bias } => {
            let grads = kernels::conv2d_backward(
                geom,
                ins[0].data(),
                ins[1].data(),
                g.data(),
                (want[0], want[1], *has_bias && want[2]),
            );
            let mut v = vec![
                grads.input.map(|d| Tensor::from_parts(shape_of(ins[0]), d)),
                grads.weight.map(|d| Tensor::from_parts(shape_of(ins[1]), d)),
            ];
            if *has_bias {
                v.push(grads.bias.map(|d| Tensor::from_parts(shape_of(ins[2]), d)));
            }
            v
        }
        Op::InstanceNorm { inv_std, m } => {
            let dx = kernels::instance_norm_backward(out.data(), inv_std, g.data(), *m);
            vec![Some(Tensor::from_parts(shape_of(ins[0]), dx))]
        }
        Op::NnUpsample(f) => {
            let (n, c, h, w) = g.dims4().expect("4-D");
            let d = kernels::block_sum(g.data(), n * c, h, w, *f);
            vec![Some(Tensor::from_parts(shape_of(ins[0]), d))]
        }
        Op::DownsampleAvg(f) => {
            let (n, c, h, w) = g.dims4().expect("4-D");
            let inv = 1.0 / (f * f) as f64;
            let mut d = kernels::nn_upsample(g.data(), n * c, h, w, *f);
            d.iter_mut().for_each(|v| *v *= inv);
            vec![Some(Tensor::from_parts(shape_of(ins[0]), d))]
        }
        Op::Blur(taps) => {
            // The folded-boundary blur is a symmetric operator.
            let (_, _, h, w) = g.dims4().expect("4-D");
            let d = kernels::blur_planes(g.data(), h, w, taps);
            vec![Some(Tensor::from_parts(shape_of(ins[0]), d))]
        }
        Op::Softmax { m } => {
            let mut d = vec![0.0; g.numel()];
            for ((dp, gp), pp) in d.chunks_mut(*m).zip(g.data().chunks(*m)).zip(out.data().chunks(*m)) {
                let dot: f64 = gp.iter().zip(pp).map(|(a, b)| a * b).sum();
                for ((di, gi), pi) in dp.iter_mut().zip(gp).zip(pp) {
                    *di = pi * (gi - dot);
                }
            }
            vec![Some(Tensor::from_parts(shape_of(ins[0]), d))]
        }
        Op::Concat { channels } => {
            let (n, total, h, w) = g.dims4().expect("4-D");
            let hw = h * w;
            let mut offset = 0;
            channels
                .iter()
                .zip(want)
                .map(|(&c, &wanted)| {
                    let start = offset;
                    offset += c;
                    wanted.then(|| {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let base = (b * total + start) * hw;
                            d.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        Tensor::from_parts(vec![n, c, h, w], d)
                    })
                })
                .collect()
        }
        Op::ChannelAffine { perm, scale } => {
            let (n, c, h, w) = g.dims4().expect("4-D");
            let hw = h * w;
            let mut d = vec![0.0; g.numel()];
            for b in 0..n {
                for co in 0..c {
                    let src = g.plane(b, co);
                    let ci = perm[co];
                    let dst = &mut d[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for (dv, s) in dst.iter_mut().zip(src) {
                        *dv += scale[co] * s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape_of(ins[0]), d))]
        }
        Op::Gram { c, m } => {
            // dF = (dG + dG^T) F / M
            let n = g.shape()[0];
            let x = ins[0];
            let mut d = vec![0.0; x.numel()];
            let mut sym = vec![0.0; c * c];
            for b in 0..n {
                let gb = &g.data()[b * c * c..(b + 1) * c * c];
                for i in 0..*c {
                    for j in 0..*c {
                        sym[i * c + j] = gb[i * c + j] + gb[j * c + i];
                    }
                }
                let f = &x.data()[b * c * m..(b + 1) * c * m];
                kernels::gemm(*c, *c, *m, 1.0 / *m as f64, &sym, *c, 1, f, *m, 1, 0.0, &mut d[b * c * m..(b + 1) * c * m], *m, 1);
            }
            vec![Some(Tensor::from_parts(shape_of(x), d))]
        }
        Op::MatMul { m, k, n } => {
            let (a, b) = (ins[0], ins[1]);
            let da = want[0].then(|| {
                let mut d = vec![0.0; m * k];
                kernels::gemm(*m, *n, *k, 1.0, g.data(), *n, 1, b.data(), 1, *n, 0.0, &mut d, *k, 1);
                Tensor::from_parts(vec![*m, *k], d)
            });
            let db = want[1].then(|| {
                let mut d = vec![0.0; k * n];
                kernels::gemm(*k, *m, *n, 1.0, a.data(), 1, *k, g.data(), *n, 1, 0.0, &mut d, *n, 1);
                Tensor::from_parts(vec![*k, *n], d)
            });
            vec![da, db]
        }
        Op::Kl { target, eps, batch } => {
            let gs = g.item() / *batch as f64;
            let d = target
                .data()
                .iter()
                .zip(ins[0].data())
                .map(|(&pt, &q)| if pt > 0.0 && q > *eps { -gs * pt / q } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_parts(shape_of(ins[0]), d))]
        }
    }
}

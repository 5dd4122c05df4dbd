use std::cell::RefCell;
use std::rc::Rc;

use super::fault::{self, FaultyOp};
use super::kernels::{self, BnCache, ConvGeometry};
use super::{check_rank, Result, Tensor, TensorError};

/// Recording of a single forward pass.
///
/// A tape is built fresh for every forward pass and differentiated at most
/// once per [`Tape::reset_grads`]. Values stored on it are never mutated.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Reshape(usize),
    Relu(usize),
    Tanh(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        dims: (usize, usize, usize),
        cache: BnCache,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    SpatialMean {
        input: usize,
        spatial: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
        dims: (usize, usize, usize),
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a constant input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    /// Registers a trainable leaf whose gradient is reported by [`Tape::grad`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.owns(loss)?;
        if self.grads.borrow().is_some() {
            return Err(TensorError::AlreadyDifferentiated);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `var`.
    ///
    /// `None` before [`Tape::backward`] ran or for variables that do not
    /// require gradients; zeros for trainable leaves the loss does not reach.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        if !std::ptr::eq(var.tape, self) {
            return None;
        }
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        let nodes = self.nodes.borrow();
        let node = nodes.get(var.id)?;
        if !node.requires_grad {
            return None;
        }
        let data = grads
            .get(var.id)
            .cloned()
            .flatten()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor {
            shape: node.value.shape().to_vec(),
            data,
        })
    }

    /// Discards gradients so the tape can be differentiated again.
    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    fn owns(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| nodes[id].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                if wants(*p) {
                    accumulate(grads, *p, g.to_vec());
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let d = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, d);
            }
            if wants(*b) {
                let d = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(grads, *b, d);
            }
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
        Op::Sum(a) => accumulate(grads, *a, vec![g[0]; nodes[*a].value.numel()]),
        Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
        Op::Relu(a) => {
            let d = g.iter().zip(val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, *a, d);
        }
        Op::Tanh(a) => {
            let d = g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(grads, *a, d);
        }
        Op::Conv2d { input, weight, bias, geom } => {
            let out = kernels::conv2d_backward(geom, val(*input), val(*weight), g, (wants(*input), wants(*weight), wants(*bias)));
            if let Some(dx) = out.input {
                accumulate(grads, *input, dx);
            }
            if let Some(mut dw) = out.weight {
                if fault::is_corrupt(FaultyOp::Conv2d) {
                    dw.iter_mut().for_each(|v| *v *= fault::CORRUPTION_FACTOR);
                }
                accumulate(grads, *weight, dw);
            }
            if let Some(db) = out.bias {
                accumulate(grads, *bias, db);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            dims,
            cache,
        } => {
            let (dx, mut dgamma, dbeta) = kernels::batchnorm_backward(*dims, cache, val(*gamma), g);
            if fault::is_corrupt(FaultyOp::BatchNorm) {
                dgamma.iter_mut().for_each(|v| *v *= fault::CORRUPTION_FACTOR);
            }
            if wants(*input) {
                accumulate(grads, *input, dx);
            }
            if wants(*gamma) {
                accumulate(grads, *gamma, dgamma);
            }
            if wants(*beta) {
                accumulate(grads, *beta, dbeta);
            }
        }
        Op::MaxPool { input, argmax } => {
            let mut d = vec![0.0; nodes[*input].value.numel()];
            for (gv, &src) in g.iter().zip(argmax) {
                d[src] += gv;
            }
            accumulate(grads, *input, d);
        }
        Op::SpatialMean { input, spatial } => {
            let scale = 1.0 / *spatial as f64;
            let d = g.iter().flat_map(|gv| std::iter::repeat_n(gv * scale, *spatial)).collect();
            accumulate(grads, *input, d);
        }
        Op::Linear {
            input,
            weight,
            bias,
            dims: (batch, fan_in, fan_out),
        } => {
            let (b, i, o) = (*batch, *fan_in, *fan_out);
            if wants(*input) {
                // dx = dy (b×o) · W (o×i)
                let mut dx = vec![0.0; b * i];
                kernels::gemm(b, o, i, g, (o as isize, 1), val(*weight), (i as isize, 1), &mut dx, false);
                accumulate(grads, *input, dx);
            }
            if wants(*weight) {
                // dW = dyᵀ (o×b) · x (b×i)
                let mut dw = vec![0.0; o * i];
                kernels::gemm(o, b, i, g, (1, o as isize), val(*input), (i as isize, 1), &mut dw, false);
                if fault::is_corrupt(FaultyOp::Linear) {
                    dw.iter_mut().for_each(|v| *v *= fault::CORRUPTION_FACTOR);
                }
                accumulate(grads, *weight, dw);
            }
            if wants(*bias) {
                let mut db = vec![0.0; o];
                for row in g.chunks_exact(o) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                accumulate(grads, *bias, db);
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let batch = labels.len();
            let classes = probs.len() / batch;
            let scale = g[0] / batch as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (n, &label) in labels.iter().enumerate() {
                d[n * classes + label] -= scale;
            }
            accumulate(grads, *logits, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, self.requires_grad(), op)
    }

    fn derived(&self, parents: &[Var<'t>], value: Tensor, op: Op) -> Result<Var<'t>> {
        let mut rg = false;
        for p in parents {
            self.tape.owns(*p)?;
            rg |= p.requires_grad();
        }
        Ok(self.tape.push(value, rg, op))
    }

    fn same_shape(&self, op: &'static str, other: &Var<'t>) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.tape.owns(*other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::Dimension {
                op,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        Ok((a, b))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape("add", other)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape(), data)?;
        self.derived(&[*self, *other], value, Op::Add(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape("mul", other)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape(), data)?;
        self.derived(&[*self, *other], value, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let a = self.value();
        let value = Tensor::from_fn(a.shape(), |i| a.data()[i] * factor);
        self.unary(value, Op::Scale(self.id, factor))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let lead = *shape.first().ok_or_else(|| TensorError::Dimension {
            op: "flatten",
            detail: "cannot flatten a scalar".into(),
        })?;
        let rest: usize = shape[1..].iter().product();
        self.reshape([lead, rest])
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let value = Tensor::from_fn(a.shape(), |i| a.data()[i].max(0.0));
        self.unary(value, Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let a = self.value();
        let value = Tensor::from_fn(a.shape(), |i| a.data()[i].tanh());
        self.unary(value, Op::Tanh(self.id))
    }

    /// 2-D cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        const OP: &str = "conv2d";
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        check_rank(OP, &x, 4)?;
        check_rank(OP, &w, 4)?;
        check_rank(OP, &b, 1)?;
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (xs, ws) = (x.shape(), w.shape());
        if xs[1] != ws[1] {
            return Err(TensorError::Dimension {
                op: OP,
                detail: format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            });
        }
        if b.numel() != ws[0] {
            return Err(TensorError::Dimension {
                op: OP,
                detail: format!("bias has {} entries for {} filters", b.numel(), ws[0]),
            });
        }
        let (hp, wp) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ws[2] > hp || ws[3] > wp {
            return Err(TensorError::Dimension {
                op: OP,
                detail: format!("kernel {}x{} exceeds padded input {}x{}", ws[2], ws[3], hp, wp),
            });
        }
        let geom = ConvGeometry {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            h_out: (hp - ws[2]) / stride + 1,
            w_out: (wp - ws[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let value = Tensor::new([geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        self.derived(
            &[*self, *weight, *bias],
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                geom,
            },
        )
    }

    /// Training-mode batch normalization of `[B, C, H, W]` (or `[B, C]`)
    /// using the batch's own mean and population variance.
    pub fn batchnorm_train(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        const OP: &str = "batchnorm";
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let xs = x.shape();
        if xs.len() != 4 && xs.len() != 2 {
            return Err(TensorError::Dimension {
                op: OP,
                detail: format!("expected [B,C,H,W] or [B,C], got {:?}", xs),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "batchnorm epsilon must be positive, got {eps}"
            )));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if g.numel() != channels || b.numel() != channels {
            return Err(TensorError::Dimension {
                op: OP,
                detail: format!("{} channels but gamma/beta have {}/{}", channels, g.numel(), b.numel()),
            });
        }
        if batch * spatial < 2 {
            return Err(TensorError::DegenerateBatch { channel: 0 });
        }
        let dims = (batch, channels, spatial);
        let (out, cache) = kernels::batchnorm_forward(dims, x.data(), g.data(), b.data(), eps);
        let value = Tensor::new(xs, out)?;
        self.derived(
            &[*self, *gamma, *beta],
            value,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                dims,
                cache,
            },
        )
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&self) -> Result<Var<'t>> {
        let x = self.value();
        check_rank("maxpool2x2", &x, 4)?;
        let s = x.shape();
        if s[2] < 2 || s[3] < 2 {
            return Err(TensorError::Dimension {
                op: "maxpool2x2",
                detail: format!("spatial size {}x{} is smaller than the window", s[2], s[3]),
            });
        }
        let (out, argmax) = kernels::maxpool2x2_forward(s[0] * s[1], s[2], s[3], x.data());
        let value = Tensor::new([s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.unary(value, Op::MaxPool { input: self.id, argmax }))
    }

    /// Averages `[B, C, H, W]` over its spatial dimensions, giving `[B, C]`.
    pub fn spatial_mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        check_rank("spatial_mean", &x, 4)?;
        let s = x.shape();
        let spatial = s[2] * s[3];
        let data = x
            .data()
            .chunks_exact(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let value = Tensor::new([s[0], s[1]], data)?;
        Ok(self.unary(value, Op::SpatialMean { input: self.id, spatial }))
    }

    /// Affine map `x·Wᵀ + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        const OP: &str = "linear";
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        check_rank(OP, &x, 2)?;
        check_rank(OP, &w, 2)?;
        let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
        let fan_out = w.shape()[0];
        if w.shape()[1] != fan_in || b.numel() != fan_out {
            return Err(TensorError::Dimension {
                op: OP,
                detail: format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            });
        }
        let mut out: Vec<f64> = (0..batch).flat_map(|_| b.data().iter().copied()).collect();
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            x.data(),
            (fan_in as isize, 1),
            w.data(),
            (1, fan_in as isize),
            &mut out,
            true,
        );
        let value = Tensor::new([batch, fan_out], out)?;
        self.derived(
            &[*self, *weight, *bias],
            value,
            Op::Linear {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                dims: (batch, fan_in, fan_out),
            },
        )
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        const OP: &str = "softmax_cross_entropy";
        let x = self.value();
        check_rank(OP, &x, 2)?;
        let (batch, classes) = (x.shape()[0], x.shape()[1]);
        if labels.len() != batch || batch == 0 {
            return Err(TensorError::Dimension {
                op: OP,
                detail: format!("{} labels for a batch of {}", labels.len(), batch),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { op: OP, label, classes });
        }
        let mut probs = Vec::with_capacity(x.numel());
        let mut total = 0.0;
        for (row, &label) in x.data().chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            total += log_denom - (row[label] - max);
            probs.extend(row.iter().map(|v| (v - max).exp() / denom));
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.unary(
            value,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward rule needs. Nodes are only ever appended, so inputs always precede
//! the operations that consume them and a single reverse sweep suffices.

use crate::engine::ops::{self, BatchStats, NormCache, Padding, WindowGeometry};
use crate::engine::{Mode, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: WindowGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Resize(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f32),
    Reshape(Var),
    Sum(Var),
    Bce {
        probs: Var,
        targets: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running mean/variance for a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    initialized: bool,
}

impl RunningStats {
    /// Mean 0, variance 1, but flagged as never updated: evaluation mode
    /// refuses to use these until a training step has run.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Explicitly initialized to mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// `running = momentum * running + (1 - momentum) * batch`
    pub fn update(&mut self, batch: &BatchStats, momentum: f32) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        self.initialized = true;
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// A differentiable input (parameter or probed activation).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (out, geom) = ops::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input), window, stride, padding)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn avgpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let out = ops::avgpool2d(self.value(input), window)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::AvgPool { input, window }, rg))
    }

    /// Batch norm with explicit statistics: `running = None` normalizes with
    /// the batch statistics, which are returned for the caller to fold into
    /// its running averages.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (out, cache, stats) = ops::batchnorm2d(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
            eps,
        )?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Batch norm that owns its running statistics: training mode uses and
    /// folds in the batch statistics, evaluation mode uses the running ones.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_with_stats(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        eps: f32,
        momentum: f32,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (out, batch) = self.batchnorm2d(input, gamma, beta, None, eps)?;
                stats.update(&batch.expect("training mode yields batch stats"), momentum);
                Ok(out)
            }
            Mode::Eval => {
                if !stats.is_initialized() {
                    return Err(Error::UninitializedStats);
                }
                let (out, _) =
                    self.batchnorm2d(input, gamma, beta, Some((&stats.mean, &stats.var)), eps)?;
                Ok(out)
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        let rg = self.requires_grad(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax(self.value(input))?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Softmax(input), rg))
    }

    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(input), out_h, out_w)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Resize(input), rg))
    }

    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        self.resize_bilinear(input, 2 * h, 2 * w)
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = ops::add_scalar(self.value(a), s);
        let rg = self.requires_grad(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = ops::scale(self.value(a), s);
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let out = ops::flatten(self.value(a));
        let rg = self.requires_grad(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum::<f32>();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn bce_loss(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let loss = ops::bce_loss(self.value(probs), targets)?;
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Back-propagates from a one-element `loss`. Gradients are retained for
    /// differentiable leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, t: Tensor| {
            if self.requires_grad(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let gr = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    geom,
                    g,
                    self.requires_grad(*input),
                )
                .expect("conv2d shapes were validated in forward");
                if let Some(dx) = gr.input {
                    send(*input, dx);
                }
                send(*weight, gr.weight);
                send(*bias, gr.bias);
            }
            Op::MaxPool { input, argmax } => {
                send(
                    *input,
                    ops::maxpool2d_backward(self.value(*input).shape(), argmax, g),
                );
            }
            Op::AvgPool { input, window } => {
                send(
                    *input,
                    ops::avgpool2d_backward(self.value(*input).shape(), *window, g),
                );
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let gr = ops::batchnorm2d_backward(
                    self.value(*input).shape(),
                    self.value(*gamma),
                    cache,
                    g,
                );
                send(*input, gr.input);
                send(*gamma, gr.gamma);
                send(*beta, gr.beta);
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                send(
                    *input,
                    Tensor::new(x.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::Sigmoid(input) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                send(
                    *input,
                    Tensor::new(y.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::Softmax(input) => send(*input, ops::softmax_backward(&node.value, g)),
            Op::Resize(input) => {
                send(
                    *input,
                    ops::resize_bilinear_backward(self.value(*input).shape(), g),
                );
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let gr = ops::dense_backward(self.value(*input), self.value(*weight), g);
                send(*input, gr.input);
                send(*weight, gr.weight);
                send(*bias, gr.bias);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                send(*a, ops::mul(g, self.value(*b)).expect("shape"));
                send(*b, ops::mul(g, self.value(*a)).expect("shape"));
            }
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Scale(a, s) => send(*a, ops::scale(g, *s)),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                send(*a, g.clone().reshape(shape).expect("same element count"));
            }
            Op::Sum(a) => send(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
            Op::Bce { probs, targets } => {
                send(
                    *probs,
                    ops::bce_loss_backward(self.value(*probs), targets, g.data()[0]),
                );
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

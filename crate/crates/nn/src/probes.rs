//! Ready-made scalar graphs around single ops, for gradient checking.
//!
//! Each probe reduces its op's output to `sum(proj * y)` with a fixed random
//! projection, so every output element contributes to the checked gradient.

use rand::Rng;

use crate::activation::Activation;
use crate::conv::{Conv2d, Padding};
use crate::dense::Dense;
use crate::error::Result;
use crate::gradcheck::ScalarGraph;
use crate::loss::softmax_cross_entropy;
use crate::module::Mode;
use crate::norm::BatchNorm;
use crate::pool::{channel_pool, channel_pool_backward};
use crate::tensor::Tensor;

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn project(y: &Tensor, proj: &Tensor) -> Tensor {
    Tensor::scalar(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

fn add_grad(t: &mut Tensor, g: &Tensor) {
    t.grad_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
}

pub struct ConvProbe {
    pub x: Tensor,
    pub conv: Conv2d,
    proj: Tensor,
}

impl ConvProbe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        (h, w): (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut conv = Conv2d::new(in_channels, out_channels, kernel, stride, padding, groups, rng)?;
        conv.bias = uniform(&[out_channels], rng);
        let x = uniform(&[batch, in_channels, h, w], rng);
        let (ho, wo) = conv.output_extent(h, w)?;
        let proj = uniform(&[batch, out_channels, ho, wo], rng);
        Ok(Self { x, conv, proj })
    }
}

impl ScalarGraph for ConvProbe {
    fn run(&mut self, backward: bool) -> Result<Tensor> {
        let (y, cache) = self.conv.forward(&self.x)?;
        if backward {
            let dx = self.conv.backward(&cache, &self.proj)?;
            add_grad(&mut self.x, &dx);
        }
        Ok(project(&y, &self.proj))
    }
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.x, &mut self.conv.weight, &mut self.conv.bias]
    }
}

pub struct DenseProbe {
    pub x: Tensor,
    pub layer: Dense,
    proj: Tensor,
}

impl DenseProbe {
    pub fn new(batch: usize, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Dense::new(inputs, outputs, rng);
        layer.bias = uniform(&[outputs], rng);
        Self {
            x: uniform(&[batch, inputs], rng),
            layer,
            proj: uniform(&[batch, outputs], rng),
        }
    }
}

impl ScalarGraph for DenseProbe {
    fn run(&mut self, backward: bool) -> Result<Tensor> {
        let (y, cache) = self.layer.forward(&self.x)?;
        if backward {
            let dx = self.layer.backward(&cache, &self.proj)?;
            add_grad(&mut self.x, &dx);
        }
        Ok(project(&y, &self.proj))
    }
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.x, &mut self.layer.weight, &mut self.layer.bias]
    }
}

pub struct BatchNormProbe {
    pub x: Tensor,
    pub bn: BatchNorm,
    proj: Tensor,
    mode: Mode,
}

impl BatchNormProbe {
    pub fn new(shape: &[usize], mode: Mode, rng: &mut impl Rng) -> Self {
        let c = shape[1];
        let mut bn = BatchNorm::new(c);
        bn.gamma = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5));
        bn.beta = uniform(&[c], rng);
        bn.running_mean = uniform(&[c], rng);
        bn.running_var = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..2.0));
        Self {
            x: uniform(shape, rng),
            bn,
            proj: uniform(shape, rng),
            mode,
        }
    }
}

impl ScalarGraph for BatchNormProbe {
    fn run(&mut self, backward: bool) -> Result<Tensor> {
        let (y, cache) = self.bn.forward(&self.x, self.mode)?;
        if backward {
            let dx = self.bn.backward(&cache, &self.proj)?;
            add_grad(&mut self.x, &dx);
        }
        Ok(project(&y, &self.proj))
    }
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.x, &mut self.bn.gamma, &mut self.bn.beta]
    }
}

pub struct ActivationProbe {
    pub x: Tensor,
    kind: Activation,
    proj: Tensor,
}

impl ActivationProbe {
    /// Inputs are kept at least 0.05 away from zero so relu's kink is never crossed.
    pub fn new(shape: &[usize], kind: Activation, rng: &mut impl Rng) -> Self {
        let x = Tensor::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                -v
            } else {
                v
            }
        });
        Self {
            x,
            kind,
            proj: uniform(shape, rng),
        }
    }
}

impl ScalarGraph for ActivationProbe {
    fn run(&mut self, backward: bool) -> Result<Tensor> {
        let y = self.kind.forward(&self.x);
        if backward {
            let dx = self.kind.backward(&y, &self.proj)?;
            add_grad(&mut self.x, &dx);
        }
        Ok(project(&y, &self.proj))
    }
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.x]
    }
}

pub struct ChannelPoolProbe {
    pub x: Tensor,
    proj_avg: Tensor,
    proj_max: Tensor,
}

impl ChannelPoolProbe {
    /// With `include_max` unset only the average path reaches the output.
    pub fn new(shape: [usize; 4], include_max: bool, rng: &mut impl Rng) -> Self {
        let out = [shape[0], 1, shape[2], shape[3]];
        let proj_avg = uniform(&out, rng);
        let proj_max = if include_max {
            uniform(&out, rng)
        } else {
            Tensor::zeros(&out)
        };
        Self {
            x: uniform(&shape, rng),
            proj_avg,
            proj_max,
        }
    }
}

impl ScalarGraph for ChannelPoolProbe {
    fn run(&mut self, backward: bool) -> Result<Tensor> {
        let (avg, max, cache) = channel_pool(&self.x)?;
        if backward {
            let dx = channel_pool_backward(&cache, &self.proj_avg, &self.proj_max)?;
            add_grad(&mut self.x, &dx);
        }
        let s = project(&avg, &self.proj_avg).data()[0] + project(&max, &self.proj_max).data()[0];
        Ok(Tensor::scalar(s))
    }
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.x]
    }
}

pub struct CrossEntropyProbe {
    pub logits: Tensor,
    labels: Vec<usize>,
}

impl CrossEntropyProbe {
    pub fn new(batch: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            logits: Tensor::from_fn(&[batch, classes], |_| rng.gen_range(-3.0..3.0)),
            labels: (0..batch).map(|_| rng.gen_range(0..classes)).collect(),
        }
    }
}

impl ScalarGraph for CrossEntropyProbe {
    fn run(&mut self, backward: bool) -> Result<Tensor> {
        let (loss, grad) = softmax_cross_entropy(&self.logits, &self.labels)?;
        if backward {
            add_grad(&mut self.logits, &grad);
        }
        Ok(Tensor::scalar(loss))
    }
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.logits]
    }
}

/// A dense layer feeding cross-entropy.
pub struct DenseClassifierProbe {
    pub x: Tensor,
    pub layer: Dense,
    labels: Vec<usize>,
}

impl DenseClassifierProbe {
    pub fn new(batch: usize, inputs: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            x: uniform(&[batch, inputs], rng),
            layer: Dense::new(inputs, classes, rng),
            labels: (0..batch).map(|_| rng.gen_range(0..classes)).collect(),
        }
    }
}

impl ScalarGraph for DenseClassifierProbe {
    fn run(&mut self, backward: bool) -> Result<Tensor> {
        let (y, cache) = self.layer.forward(&self.x)?;
        let (loss, dy) = softmax_cross_entropy(&y, &self.labels)?;
        if backward {
            let dx = self.layer.backward(&cache, &dy)?;
            add_grad(&mut self.x, &dx);
        }
        Ok(Tensor::scalar(loss))
    }
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.x, &mut self.layer.weight, &mut self.layer.bias]
    }
}

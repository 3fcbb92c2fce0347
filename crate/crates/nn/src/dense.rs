use rand::Rng;

use crate::error::{shape_err, Result};
use crate::gemm::{gemm, Layout};
use crate::module::{he_uniform, Module};
use crate::tensor::Tensor;

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Tensor,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: he_uniform(&[inputs, outputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [_, o] = weight.dims2("dense weight")?;
        if bias.shape() != [o] {
            return shape_err(format!("dense bias {:?} for {o} outputs", bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, DenseCache)> {
        let [b, d] = x.dims2("dense input")?;
        let (di, o) = (self.inputs(), self.outputs());
        if d != di {
            return shape_err(format!("dense expects {di} features, got {d}"));
        }
        let mut y = Vec::with_capacity(b * o);
        for _ in 0..b {
            y.extend_from_slice(self.bias.data());
        }
        gemm(b, d, o, x.data(), Layout::N, self.weight.data(), Layout::N, 1.0, &mut y);
        Ok((Tensor::new(&[b, o], y)?, DenseCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &DenseCache, dy: &Tensor) -> Result<Tensor> {
        let x = &cache.input;
        let [b, d] = x.dims2("dense input")?;
        let o = self.outputs();
        if dy.shape() != [b, o] {
            return shape_err(format!("dense backward: dy {:?}", dy.shape()));
        }
        let db = self.bias.grad_mut();
        for row in dy.data().chunks(o) {
            db.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
        gemm(d, b, o, x.data(), Layout::T, dy.data(), Layout::N, 1.0, self.weight.grad_mut());
        let mut dx = vec![0.0; b * d];
        gemm(b, o, d, dy.data(), Layout::N, self.weight.data(), Layout::T, 0.0, &mut dx);
        Tensor::new(&[b, d], dx)
    }
}

impl Module for Dense {
    fn named_params(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".to_string(), &mut self.weight),
            ("bias".to_string(), &mut self.bias),
        ]
    }
}

//! Batch normalisation over the channel axis of `[B, C]` or `[B, C, H, W]` inputs.

use crate::error::{shape_err, Result};
use crate::module::{Mode, Module};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Weight of the current batch in the running-statistics update.
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    mode: Mode,
}

/// (batch, channels, spatial) extents of a supported input.
fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => shape_err(format!("batch norm expects rank 2 or 4, got {:?}", x.shape())),
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, s) = layout(x)?;
        if c != self.channels() {
            return shape_err(format!("batch norm has {} channels, input {c}", self.channels()));
        }
        Ok((b, c, s))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Infer => self.forward_infer(x),
        }
    }

    /// Normalises with batch statistics and folds them into the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (b, c, s) = self.check(x)?;
        let n = (b * s) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for (ci, m) in mean.iter_mut().enumerate() {
                *m += xd[(bi * c + ci) * s..(bi * c + ci + 1) * s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] += xd[(bi * c + ci) * s..(bi * c + ci + 1) * s]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let m = self.momentum;
        for (r, bm) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - m) * *r + m * bm;
        }
        for (r, bv) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - m) * *r + m * bv;
        }
        Ok(self.apply(x, &mean, inv_std, Mode::Train, (b, c, s)))
    }

    /// Normalises with the running statistics; never mutates the layer.
    pub fn forward_infer(&self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let dims = self.check(x)?;
        let inv_std = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        Ok(self.apply(x, self.running_mean.data(), inv_std, Mode::Infer, dims))
    }

    fn apply(
        &self,
        x: &Tensor,
        mean: &[f64],
        inv_std: Vec<f64>,
        mode: Mode,
        (b, c, s): (usize, usize, usize),
    ) -> (Tensor, BnCache) {
        let xd = x.data();
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                for i in r {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = gamma[ci] * h + beta[ci];
                }
            }
        }
        let y = Tensor::new(x.shape(), y).expect("same shape as input");
        let cache = BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
            mode,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Result<Tensor> {
        if dy.shape() != cache.shape.as_slice() {
            return shape_err(format!("batch norm backward: dy {:?}", dy.shape()));
        }
        let (b, c, s) = layout(dy)?;
        let n = (b * s) as f64;
        let dyd = dy.data();
        let xhat = &cache.xhat;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                for i in (bi * c + ci) * s..(bi * c + ci + 1) * s {
                    dgamma[ci] += dyd[i] * xhat[i];
                    dbeta[ci] += dyd[i];
                }
            }
        }
        let gamma = self.gamma.data().to_vec();
        let mut dx = vec![0.0; dyd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let k = gamma[ci] * cache.inv_std[ci];
                for i in (bi * c + ci) * s..(bi * c + ci + 1) * s {
                    dx[i] = match cache.mode {
                        Mode::Train => k * (dyd[i] - dbeta[ci] / n - xhat[i] * dgamma[ci] / n),
                        Mode::Infer => k * dyd[i],
                    };
                }
            }
        }
        self.gamma
            .grad_mut()
            .iter_mut()
            .zip(&dgamma)
            .for_each(|(g, v)| *g += v);
        self.beta
            .grad_mut()
            .iter_mut()
            .zip(&dbeta)
            .for_each(|(g, v)| *g += v);
        Tensor::new(dy.shape(), dx)
    }
}

impl Module for BatchNorm {
    fn named_params(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gamma".to_string(), &mut self.gamma),
            ("beta".to_string(), &mut self.beta),
        ]
    }

    fn named_buffers(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("running_mean".to_string(), &mut self.running_mean),
            ("running_var".to_string(), &mut self.running_var),
        ]
    }
}

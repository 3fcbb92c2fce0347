use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn forward(self, x: &Tensor) -> Tensor {
        let f: fn(f64) -> f64 = match self {
            Activation::Relu => |v| if v < 0.0 { 0.0 } else { v },
            Activation::Sigmoid => sigmoid,
        };
        let data = x.data().iter().map(|&v| f(v)).collect();
        Tensor::new(x.shape(), data).expect("elementwise keeps shape")
    }

    /// Input gradient given the forward *output* `y` and upstream `dy`.
    pub fn backward(self, y: &Tensor, dy: &Tensor) -> Result<Tensor> {
        if y.shape() != dy.shape() {
            return shape_err(format!("activation backward: {:?} vs {:?}", y.shape(), dy.shape()));
        }
        let data = y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&y, &g)| match self {
                Activation::Relu => {
                    if y > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }
                Activation::Sigmoid => g * y * (1.0 - y),
            })
            .collect();
        Tensor::new(y.shape(), data)
    }
}

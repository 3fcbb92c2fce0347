use rand::Rng;

use crate::tensor::Tensor;

/// Forward-pass mode for layers whose behaviour depends on it (batch norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Anything that owns named tensors.
///
/// `named_params` yields trainable tensors (these carry gradients and are
/// updated by the optimizer); `named_buffers` yields state that is saved in
/// checkpoints but never trained, such as batch-norm running statistics.
/// Both must return tensors in a stable order.
pub trait Module {
    fn named_params(&mut self) -> Vec<(String, &mut Tensor)>;

    fn named_buffers(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }

    fn params(&mut self) -> Vec<&mut Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn zero_grad(&mut self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    fn param_count(&mut self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Prefixes each name with `prefix.`.
pub fn scoped<'a>(prefix: &str, items: Vec<(String, &'a mut Tensor)>) -> Vec<(String, &'a mut Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// He-style uniform initialisation: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

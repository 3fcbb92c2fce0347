use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam. Moments are stored per parameter, in the order the
/// parameters are passed to [`AdamState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from each parameter's accumulated gradient. A parameter
    /// without a gradient buffer is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() {
            return shape_err(format!(
                "optimizer tracks {} parameters, got {}",
                self.shapes.len(),
                params.len()
            ));
        }
        for (p, s) in params.iter().zip(&self.shapes) {
            if p.shape() != s.as_slice() {
                return shape_err(format!("parameter shape {:?} != {s:?}", p.shape()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= b1;
                    *vi *= b2;
                }
                continue;
            };
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.grad_mut()[0] = g;
        t
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = param(1.0, 1.0);
        let mut st = AdamState::new(&[&p], 0.01);
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 1.0 - 0.01 / (1.0 + 1e-8));
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_grad_or_zero_lr_is_noop() {
        let mut p = param(0.3, 0.0);
        let mut st = AdamState::new(&[&p], 0.1);
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 0.3);

        let mut q = param(0.3, 5.0);
        let mut st = AdamState::new(&[&q], 0.0);
        st.step(&mut [&mut q]).unwrap();
        assert_eq!(q.data()[0], 0.3);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Tensor::from_fn(&[4], |i| i as f64);
            p.grad_mut().copy_from_slice(&[0.1, -0.2, 0.3, 1e-9]);
            let mut st = AdamState::new(&[&p], 1e-3);
            for _ in 0..5 {
                st.step(&mut [&mut p]).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.data(), b.data());
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[&p], 1e-3);
        let mut q = Tensor::zeros(&[4]);
        assert!(st.step(&mut [&mut q]).is_err());
    }
}

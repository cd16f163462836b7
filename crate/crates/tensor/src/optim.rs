use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Adam {
            config,
            step_count: 0,
            first: zeros(),
            second: zeros(),
            shapes: params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update using the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(TensorError::invalid(
                "adam_step",
                format!(
                    "optimizer tracks {} parameters, store has {}",
                    self.shapes.len(),
                    params.len()
                ),
            ));
        }
        for ((name, t), shape) in params.iter().zip(&self.shapes) {
            if t.shape() != shape.as_slice() {
                return Err(TensorError::mismatch("adam_step", shape, t.shape()));
            }
            if t.grad.is_none() {
                return Err(TensorError::invalid("adam_step", format!("no gradient on {name}")));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let step = T::from_f64_lossy(c.learning_rate / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.epsilon);
        for ((p, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = p.grad.take().expect("checked above");
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, (&v, &g)) in values.iter().zip(grads).enumerate() {
            let id = s.add(format!("p{i}"), Tensor::scalar(v));
            s.get_mut(id).grad = Some(vec![g]);
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut s = store(&[0.7], &[0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert_eq!(s.tensors()[0].data(), &[0.7]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_unit_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; corrected: m̂ = 1, v̂ = 1; Δ = lr / (1 + 1e-8).
        let mut s = store(&[1.0], &[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.tensors()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_parameters_move_identically() {
        let mut s = store(&[0.3, 0.3], &[-0.2, -0.2]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.tensors()[0].data(), s.tensors()[1].data());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let s = store(&[0.3], &[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let mut other = ParamStore::<f64>::new();
        let id = other.add("p0", Tensor::zeros(vec![2]).unwrap());
        other.get_mut(id).grad = Some(vec![0.0; 2]);
        assert!(adam.step(&mut other).is_err());
    }
}

use super::{Real, Result, Tensor, TensorError};

/// Adam with bias correction. Moments are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(2e-5)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update to every parameter from its attached gradient.
    ///
    /// All gradients are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => {
                    return Err(TensorError::Contract(format!(
                        "adam: parameter {i} (shape {:?}) has no gradient",
                        p.shape()
                    )))
                }
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return Err(TensorError::NonFinite(format!("gradient of parameter {i}")))
                }
                _ => {}
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(TensorError::Dimension(
                "adam: parameter set changed between steps".into(),
            ));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(<[T]>::to_vec).unwrap_or_default();
            for (((x, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let mn = b1 * mi.as_f64() + (1.0 - b1) * g;
                let vn = b2 * vi.as_f64() + (1.0 - b2) * g * g;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.epsilon);
                *x = T::from_f64(x.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::new([values.len()], values.to_vec()).unwrap().with_requires_grad();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = param(&[1.0, -2.0], &[0.3, 0.7]);
        let mut opt = AdamState::new(0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        let lr = 1e-3;
        let mut p = param(&[0.5, 0.5], &[2.0, -0.25]);
        let mut opt = AdamState::new(lr);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - (0.5 - lr * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[1] - (0.5 + lr * 0.25 / (0.25 + 1e-8))).abs() < 1e-15);
        assert!((0.5 - p.data()[0] - lr).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_only_advances_the_counter() {
        let mut p = param(&[3.0], &[0.0]);
        let mut opt = AdamState::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[3.0]);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = Tensor::<f64>::new([1], vec![1.0]).unwrap();
        let mut opt = AdamState::new(0.1);
        let err = opt.step(&mut [&mut a, &mut b]).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
        assert_eq!(a.data(), &[1.0], "no partial update");
        assert_eq!(opt.step_count(), 0);
    }
}

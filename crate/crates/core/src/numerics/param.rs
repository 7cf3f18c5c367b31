use std::sync::atomic::{AtomicU64, Ordering};

use super::{RandomStream, Tensor};
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique handle linking tape leaves back to their parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A trainable tensor with its gradient and adaptive-moment state.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Tensor,
    frozen: bool,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            frozen: false,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            step: 0,
        }
    }

    /// Uniform in ±sqrt(1/fan_in).
    pub fn fan_in_uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RandomStream,
    ) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Parameter::new(name, rng.uniform_tensor(shape, -bound, bound))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Overwrites the value. Refused once frozen.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract(format!("parameter `{}` is frozen", self.name)));
        }
        if value.shape() != self.value.shape() {
            return Err(Error::dim("set_value", self.value.shape(), value.shape()));
        }
        self.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, grad: &Tensor) -> Result<()> {
        self.grad.add_assign(grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update on every non-frozen parameter, then clears
    /// all gradients. Any non-finite gradient aborts before anything moves.
    pub fn step(&self, params: &mut [&mut Parameter], lr: f64) -> Result<()> {
        if let Some(bad) = params
            .iter()
            .find(|p| !p.frozen && !p.grad.all_finite())
        {
            return Err(Error::NonFiniteGradient {
                param: bad.name.clone(),
            });
        }
        for p in params.iter_mut() {
            if !p.frozen {
                self.update(p, lr);
            }
            p.zero_grad();
        }
        Ok(())
    }

    fn update(&self, p: &mut Parameter, lr: f64) {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let g = p.grad.data();
        let m = p.first_moment.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
        }
        let v = p.second_moment.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
        }
        let m = p.first_moment.data();
        let v = p.second_moment.data();
        for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Adam with the standard constants.
pub fn adam_step(params: &mut [&mut Parameter], lr: f64) -> Result<()> {
    Adam::default().step(params, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut p = Parameter::new("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        p.freeze();
        let before = p.value().to_le_bytes();
        for _ in 0..10 {
            p.accumulate_grad(&Tensor::filled(&[3], 5.0)).unwrap();
            adam_step(&mut [&mut p], 0.1).unwrap();
        }
        assert_eq!(p.value().to_le_bytes(), before);
        assert_eq!(p.grad(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after one step, so the move is lr·g/(|g|+eps).
        let lr = 1e-3;
        let mut p = Parameter::new("w", Tensor::scalar(0.0));
        p.accumulate_grad(&Tensor::scalar(1.0)).unwrap();
        adam_step(&mut [&mut p], lr).unwrap();
        let expected = -lr * 1.0 / (1.0 + 1e-8);
        assert!((p.value().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let init = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
        let mut p = Parameter::new("w", init.clone());
        for _ in 0..5 {
            adam_step(&mut [&mut p], 0.01).unwrap();
        }
        assert_eq!(p.value(), &init);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut a = Parameter::new("a", Tensor::scalar(1.0));
        let mut b = Parameter::new("b", Tensor::scalar(1.0));
        a.accumulate_grad(&Tensor::scalar(1.0)).unwrap();
        b.accumulate_grad(&Tensor::scalar(f64::NAN)).unwrap();
        let err = adam_step(&mut [&mut a, &mut b], 0.1).unwrap_err();
        assert!(err.to_string().contains("`b`"));
        assert_eq!(a.value().data()[0], 1.0);
    }

    #[test]
    fn set_value_refused_when_frozen() {
        let mut p = Parameter::new("w", Tensor::scalar(1.0));
        p.freeze();
        assert!(p.set_value(Tensor::scalar(2.0)).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Momentum SGD state for one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    /// Momentum buffer with the model's parameter layout.
    pub u: Vec<T>,
    pub momentum: f64,
    pub eta: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(len: usize, momentum: f64, eta: f64, weight_decay: f64) -> Self {
        OptState { u: vec![T::zero(); len], momentum, eta, weight_decay }
    }

    /// `u <- m*u - eta*grad`. Returns the new buffer; the caller adds it to
    /// the weights.
    pub fn sgd_momentum_step(&mut self, grad: &[T]) -> Result<&[T]> {
        if grad.len() != self.u.len() {
            return Err(Error::Layout(format!(
                "momentum buffer has {} values, gradient {}",
                self.u.len(),
                grad.len()
            )));
        }
        let m = T::from_f64_lossy(self.momentum);
        let eta = T::from_f64_lossy(self.eta);
        for (u, &g) in self.u.iter_mut().zip(grad) {
            *u = m * *u - eta * g;
        }
        if !self.u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("momentum update".into()));
        }
        Ok(&self.u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant { eta0: f64 },
    /// Divide by each `divisor` once training reaches its `epoch`.
    Step { eta0: f64, drops: Vec<(usize, f64)> },
    /// `eta0 * (1 - iter/max_iter)^power`.
    Polynomial { eta0: f64, power: f64, max_iter: usize },
}

impl LrSchedule {
    pub fn eta0(&self) -> f64 {
        match *self {
            LrSchedule::Constant { eta0 }
            | LrSchedule::Step { eta0, .. }
            | LrSchedule::Polynomial { eta0, .. } => eta0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0() > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let LrSchedule::Step { drops, .. } = self {
            if drops.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Config("step schedule epochs must be strictly increasing".into()));
            }
            if drops.iter().any(|d| !(d.1 > 0.0)) {
                return Err(Error::Config("step divisors must be positive".into()));
            }
        }
        if let LrSchedule::Polynomial { max_iter: 0, .. } = self {
            return Err(Error::Config("polynomial schedule needs max_iter > 0".into()));
        }
        Ok(())
    }

    /// Learning rate at a 0-based epoch and global iteration.
    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        match self {
            LrSchedule::Constant { eta0 } => *eta0,
            LrSchedule::Step { eta0, drops } => drops
                .iter()
                .filter(|(e, _)| *e <= epoch)
                .fold(*eta0, |eta, (_, d)| eta / d),
            LrSchedule::Polynomial { eta0, power, max_iter } => {
                let frac = 1.0 - (iter.min(*max_iter) as f64) / *max_iter as f64;
                eta0 * frac.powf(*power)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_examples() {
        let mut o = OptState::<f64>::new(1, 0.9, 0.1, 0.0);
        o.u[0] = 1.0;
        assert!((o.sgd_momentum_step(&[2.0]).unwrap()[0] - 0.7).abs() < 1e-15);

        let mut o = OptState::<f64>::new(2, 0.0, 0.5, 0.0);
        o.u = vec![3.0, -1.0];
        assert_eq!(o.sgd_momentum_step(&[1.0, 2.0]).unwrap(), &[-0.5, -1.0]);

        let mut o = OptState::<f64>::new(1, 0.9, 0.1, 0.0);
        o.u[0] = 1.0;
        for _ in 0..3 {
            o.sgd_momentum_step(&[0.0]).unwrap();
        }
        assert!((o.u[0] - 0.729).abs() < 1e-12);
    }

    #[test]
    fn momentum_matches_closed_form_under_constant_gradient() {
        let (m, eta, g) = (0.9, 0.05, 1.7);
        let mut o = OptState::<f64>::new(1, m, eta, 0.0);
        for t in 1..=50 {
            o.sgd_momentum_step(&[g]).unwrap();
            let expect = -eta * g * (1.0 - m.powi(t)) / (1.0 - m);
            assert!(((o.u[0] - expect) / expect).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let mut o = OptState::<f32>::new(1, 0.9, 0.1, 0.0);
        assert!(o.sgd_momentum_step(&[f32::NAN]).is_err());
    }

    #[test]
    fn step_schedule_divides_at_listed_epochs() {
        let s = LrSchedule::Step { eta0: 0.002, drops: vec![(64, 10.0), (96, 10.0)] };
        assert_eq!(s.lr_at(0, 0), 0.002);
        assert!((s.lr_at(70, 0) - 0.0002).abs() < 1e-18);
        assert!((s.lr_at(100, 0) - 0.00002).abs() < 1e-18);
    }

    #[test]
    fn polynomial_schedule() {
        let s = LrSchedule::Polynomial { eta0: 0.00125, power: 1.0, max_iter: 1000 };
        assert_eq!(s.lr_at(0, 0), 0.00125);
        assert!((s.lr_at(3, 500) - 0.000625).abs() < 1e-18);
        let s = LrSchedule::Polynomial { eta0: 1.0, power: 0.5, max_iter: 100 };
        assert!(s.lr_at(0, 99) > 0.0);
    }

    #[test]
    fn step_epochs_must_increase() {
        let s = LrSchedule::Step { eta0: 0.1, drops: vec![(5, 10.0), (5, 10.0)] };
        assert!(s.validate().is_err());
    }
}

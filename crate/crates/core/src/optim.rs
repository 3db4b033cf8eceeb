//! SGD and Adam over named module parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::GradMap;
use crate::nn::Module;
use crate::tensor::{re, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone)]
struct Moments<E: Real> {
    first: Tensor<E>,
    second: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<E: Real> {
    kind: OptimizerKind,
    learning_rate: f64,
    moments: BTreeMap<String, Moments<E>>,
    step_count: u64,
}

impl<E: Real> Optimizer<E> {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter that has a gradient entry.
    /// Frozen modules are skipped entirely.
    pub fn step(&mut self, modules: &mut [&mut Module<E>], grads: &GradMap<E>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let lr = self.learning_rate;
        let kind = self.kind;
        let mut failure: Option<Error> = None;
        for module in modules.iter_mut() {
            if module.is_frozen() {
                continue;
            }
            module.visit_params_mut(|name, param| {
                if failure.is_some() {
                    return;
                }
                let Some(grad) = grads.get(name) else {
                    return;
                };
                if grad.shape() != param.shape() {
                    failure = Some(Error::shape(
                        format!("gradient for {name}"),
                        format!("{:?}", param.shape()),
                        format!("{:?}", grad.shape()),
                    ));
                    return;
                }
                if !grad.all_finite() {
                    failure = Some(Error::NonFinite(format!("gradient for {name}")));
                    return;
                }
                match kind {
                    OptimizerKind::Sgd => {
                        let eta = re::<E>(lr);
                        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                            *p = *p - eta * g;
                        }
                    }
                    OptimizerKind::Adam {
                        beta1,
                        beta2,
                        epsilon,
                    } => {
                        let slot = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                            first: Tensor::zeros(param.shape().to_vec()),
                            second: Tensor::zeros(param.shape().to_vec()),
                        });
                        let b1 = re::<E>(beta1);
                        let b2 = re::<E>(beta2);
                        let one = E::one();
                        let corr1 = re::<E>(1.0 - beta1.powi(t as i32));
                        let corr2 = re::<E>(1.0 - beta2.powi(t as i32));
                        let eta = re::<E>(lr);
                        let eps = re::<E>(epsilon);
                        for ((p, &g), (m, v)) in param
                            .data_mut()
                            .iter_mut()
                            .zip(grad.data())
                            .zip(slot.first.data_mut().iter_mut().zip(slot.second.data_mut().iter_mut()))
                        {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            let m_hat = *m / corr1;
                            let v_hat = *v / corr2;
                            *p = *p - eta * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            });
            if let Some(e) = failure.take() {
                return Err(e);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModuleBuilder;
    use crate::rng::StreamKey;

    fn scalar_module(value: f64) -> Module<f64> {
        let mut m = ModuleBuilder::<f64>::new("p", StreamKey::new(0).tag("t")).fc(1, 1).build(false);
        let w = m.param_mut("p.0.weight").unwrap();
        w.data_mut()[0] = value;
        let b = m.param_mut("p.0.bias").unwrap();
        b.data_mut()[0] = 0.0;
        m
    }

    fn grad_of(name: &str, g: f64) -> GradMap<f64> {
        let mut map = GradMap::new();
        map.insert(name.to_string(), Tensor::new(vec![1, 1], vec![g]).unwrap());
        map
    }

    #[test]
    fn sgd_single_step() {
        let mut m = scalar_module(1.0);
        let mut opt = Optimizer::sgd(0.01);
        opt.step(&mut [&mut m], &grad_of("p.0.weight", 1.0)).unwrap();
        let p = m.param_mut("p.0.weight").unwrap().data()[0];
        assert!((p - 0.99).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_without_eps_is_lr_times_sign() {
        for &g in &[0.3, -2.0, 17.5] {
            let mut m = scalar_module(1.0);
            let mut opt = Optimizer::adam(0.01);
            opt.step(&mut [&mut m], &grad_of("p.0.weight", g)).unwrap();
            let p = m.param_mut("p.0.weight").unwrap().data()[0];
            let delta = (1.0 - p).abs();
            let expect = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-10, "g={g} delta={delta}");
        }
    }

    #[test]
    fn sgd_ten_steps_quadratic_decay() {
        // minimize p^2/2: gradient is p, so p <- p (1 - lr); after 10 steps 0.9^10.
        let mut m = scalar_module(1.0);
        let mut opt = Optimizer::sgd(0.1);
        for _ in 0..10 {
            let p = m.param_mut("p.0.weight").unwrap().data()[0];
            opt.step(&mut [&mut m], &grad_of("p.0.weight", p)).unwrap();
        }
        let p = m.param_mut("p.0.weight").unwrap().data()[0];
        assert!((p - 0.9f64.powi(10)).abs() < 1e-12);
        assert!((p - 0.34867844).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut m = scalar_module(1.0);
        let mut opt = Optimizer::sgd(0.1);
        let err = opt.step(&mut [&mut m], &grad_of("p.0.weight", f64::NAN));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut m = scalar_module(1.0);
        let mut opt = Optimizer::sgd(0.1);
        let mut map = GradMap::new();
        map.insert("p.0.weight".into(), Tensor::<f64>::zeros(vec![2, 2]));
        assert!(opt.step(&mut [&mut m], &map).is_err());
    }

    #[test]
    fn frozen_module_is_untouched() {
        let mut m = ModuleBuilder::<f64>::new("p", StreamKey::new(0).tag("t")).fc(1, 1).build(true);
        let before = m.fingerprint();
        let mut opt = Optimizer::sgd(0.5);
        opt.step(&mut [&mut m], &grad_of("p.0.weight", 1.0)).unwrap();
        assert_eq!(m.fingerprint(), before);
    }
}

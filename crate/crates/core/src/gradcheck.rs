//! Central finite-difference oracle for analytic gradients.
//!
//! Runs in 64-bit mode only: f32 rounding drowns the O(eps^2) truncation
//! error and makes the comparison meaningless.

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::nn::Module;
use crate::tensor::{re, Real};

/// Maximum relative error between analytic gradients and central differences,
/// taken over every element of every trainable parameter of the given modules.
///
/// `loss_fn` must rebuild the loss from scratch on the supplied graph; module
/// state (including batch-norm running statistics) is restored to its entry
/// value before every evaluation, so the probes see identical conditions.
pub fn fd_gradcheck<E, F>(modules: &mut Vec<Module<E>>, mut loss_fn: F, epsilon: f64) -> Result<f64>
where
    E: Real,
    F: FnMut(&mut Graph<E>, &mut Vec<Module<E>>) -> Result<Value>,
{
    if E::BITS != 64 {
        return Err(Error::InvalidArgument(
            "fd_gradcheck requires 64-bit mode".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "fd epsilon {epsilon} outside (0, 1e-2]"
        )));
    }

    let snapshots: Vec<_> = modules.iter().map(|m| m.state_snapshot()).collect();
    let restore = |mods: &mut Vec<Module<E>>| {
        for (m, s) in mods.iter_mut().zip(snapshots.iter()) {
            m.state_restore(s);
        }
    };

    let eval = |mods: &mut Vec<Module<E>>, f: &mut F| -> Result<f64> {
        let mut graph = Graph::new();
        let loss = f(&mut graph, mods)?;
        graph.scalar_value(loss)
    };

    // Repeatability probe: identical state must give a bitwise-identical loss.
    restore(modules);
    let base_a = eval(modules, &mut loss_fn)?;
    restore(modules);
    let base_b = eval(modules, &mut loss_fn)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::InvalidArgument(
            "loss_fn is not repeatable between probes".into(),
        ));
    }

    restore(modules);
    let analytic = {
        let mut graph = Graph::new();
        let loss = loss_fn(&mut graph, modules)?;
        graph.backward(loss)?
    };

    // Enumerate (module index, parameter name, length) up front.
    let mut layout = Vec::new();
    for (mi, module) in modules.iter().enumerate() {
        if module.is_frozen() {
            continue;
        }
        module.visit_params(|name, tensor| {
            layout.push((mi, name.to_string(), tensor.len()));
        });
    }

    let mut max_rel = 0.0f64;
    for (mi, name, len) in &layout {
        for elem in 0..*len {
            restore(modules);
            {
                let slot = &mut modules[*mi].param_mut(name).expect("parameter exists").data_mut()[elem];
                *slot = *slot + re::<E>(epsilon);
            }
            let plus = eval(modules, &mut loss_fn)?;

            restore(modules);
            {
                let slot = &mut modules[*mi].param_mut(name).expect("parameter exists").data_mut()[elem];
                *slot = *slot - re::<E>(epsilon);
            }
            let minus = eval(modules, &mut loss_fn)?;

            let fd = (plus - minus) / (2.0 * epsilon);
            let a = analytic
                .get(name)
                .map_or(0.0, |t| t.data()[elem].into_f64());
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    restore(modules);
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModuleBuilder;
    use crate::rng::StreamKey;
    use crate::tensor::Tensor;

    #[test]
    fn linear_loss_is_fd_exact() {
        // Loss linear in parameters: central differences are exact, so the
        // error floor is pure rounding.
        let m = ModuleBuilder::<f64>::new("lin", StreamKey::new(3).tag("lin"))
            .fc(3, 1)
            .build(false);
        let mut mods = vec![m];
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = fd_gradcheck(
            &mut mods,
            |g, mods| {
                let input = g.constant(x.clone());
                let out = mods[0].forward_mut(g, input, false)?;
                let doubled = g.add(out, out)?;
                let halved = g.scale(doubled, 0.5);
                // Reduce [1,1] to scalar via mse against zero: (y)^2 is NOT
                // linear, so reduce with a ones matmul instead.
                let ones = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
                g.matmul(halved, ones)
            },
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "linear fd error {err}");
    }

    #[test]
    fn three_layer_mse_passes() {
        let m = ModuleBuilder::<f64>::new("net", StreamKey::new(9).tag("net"))
            .fc(4, 6)
            .relu()
            .fc(6, 5)
            .batch_norm(5)
            .relu()
            .fc(5, 3)
            .build(false);
        let mut mods = vec![m];
        let x = Tensor::from_f64_slice(vec![3, 4], &[0.2, -0.5, 1.0, 0.3, -0.1, 0.8, -1.2, 0.4, 0.9, 0.1, -0.6, 0.7]).unwrap();
        let target = Tensor::from_f64_slice(vec![3, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8, -0.9]).unwrap();
        let err = fd_gradcheck(
            &mut mods,
            |g, mods| {
                let input = g.constant(x.clone());
                let out = mods[0].forward_mut(g, input, true)?;
                g.mse_to(out, target.clone())
            },
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "3-layer fd error {err}");
    }

    #[test]
    fn rejects_f32_mode() {
        let m = ModuleBuilder::<f32>::new("n", StreamKey::new(0).tag("n")).fc(2, 2).build(false);
        let mut mods = vec![m];
        let r = fd_gradcheck(
            &mut mods,
            |g, mods| {
                let x = g.constant(Tensor::zeros(vec![1, 2]));
                let out = mods[0].forward_mut(g, x, false)?;
                g.mse_to(out, Tensor::zeros(vec![1, 2]))
            },
            1e-4,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_bad_epsilon() {
        let m = ModuleBuilder::<f64>::new("n", StreamKey::new(0).tag("n")).fc(2, 2).build(false);
        let mut mods = vec![m];
        for eps in [0.0, -1e-4, 0.5] {
            let r = fd_gradcheck(
                &mut mods,
                |g, mods| {
                    let x = g.constant(Tensor::zeros(vec![1, 2]));
                    let out = mods[0].forward_mut(g, x, false)?;
                    g.mse_to(out, Tensor::zeros(vec![1, 2]))
                },
                eps,
            );
            assert!(r.is_err(), "epsilon {eps} accepted");
        }
    }
}

//! Computation-graph modules: ordered layer stacks with named parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::rng::{uniform_f64, StreamKey};
use crate::tensor::{re, Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub enum Layer<E: Real> {
    Fc {
        weight: Tensor<E>, // [in, out]
        bias: Tensor<E>,   // [out]
    },
    BatchNorm {
        gamma: Tensor<E>,
        beta: Tensor<E>,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
    },
    Relu,
    Tanh,
    AvgPool {
        target: usize,
    },
}

/// An ordered stack of layers. A frozen module binds its parameters as
/// constants, so no gradient ever reaches them.
#[derive(Debug, Clone)]
pub struct Module<E: Real> {
    name: String,
    layers: Vec<Layer<E>>,
    frozen: bool,
}

/// Fan-in scaled uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_fc<E: Real>(in_dim: usize, out_dim: usize, key: StreamKey) -> (Tensor<E>, Tensor<E>) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut rng = key.rng();
    let weight: Vec<E> = (0..in_dim * out_dim)
        .map(|_| re(uniform_f64(&mut rng, -bound, bound)))
        .collect();
    let bias: Vec<E> = (0..out_dim)
        .map(|_| re(uniform_f64(&mut rng, -bound, bound)))
        .collect();
    (
        Tensor::new(vec![in_dim, out_dim], weight).expect("fc weight shape"),
        Tensor::new(vec![out_dim], bias).expect("fc bias shape"),
    )
}

/// Incremental module builder keyed for reproducible initialization.
pub struct ModuleBuilder<E: Real> {
    name: String,
    key: StreamKey,
    layers: Vec<Layer<E>>,
}

impl<E: Real> ModuleBuilder<E> {
    pub fn new(name: impl Into<String>, key: StreamKey) -> Self {
        ModuleBuilder {
            name: name.into(),
            key,
            layers: Vec::new(),
        }
    }

    pub fn fc(mut self, in_dim: usize, out_dim: usize) -> Self {
        let layer_key = self.key.tag("layer").idx(self.layers.len() as u64);
        let (weight, bias) = init_fc(in_dim, out_dim, layer_key);
        self.layers.push(Layer::Fc { weight, bias });
        self
    }

    pub fn batch_norm(mut self, dim: usize) -> Self {
        self.layers.push(Layer::BatchNorm {
            gamma: Tensor::filled(vec![dim], E::one()),
            beta: Tensor::zeros(vec![dim]),
            running_mean: Tensor::zeros(vec![dim]),
            running_var: Tensor::filled(vec![dim], E::one()),
        });
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn tanh(mut self) -> Self {
        self.layers.push(Layer::Tanh);
        self
    }

    pub fn avg_pool(mut self, target: usize) -> Self {
        self.layers.push(Layer::AvgPool { target });
        self
    }

    pub fn build(self, frozen: bool) -> Module<E> {
        Module {
            name: self.name,
            layers: self.layers,
            frozen,
        }
    }
}

impl<E: Real> Module<E> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Output width given an input width; errors when dimensions do not compose.
    pub fn output_dim(&self, input_dim: usize) -> Result<usize> {
        let mut cur = input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Fc { weight, .. } => {
                    if weight.shape()[0] != cur {
                        return Err(Error::shape(
                            format!("{} layer {i}", self.name),
                            format!("input {}", weight.shape()[0]),
                            format!("{cur}"),
                        ));
                    }
                    weight.shape()[1]
                }
                Layer::BatchNorm { gamma, .. } => {
                    if gamma.len() != cur {
                        return Err(Error::shape(
                            format!("{} layer {i}", self.name),
                            format!("width {}", gamma.len()),
                            format!("{cur}"),
                        ));
                    }
                    cur
                }
                Layer::Relu | Layer::Tanh => cur,
                Layer::AvgPool { target } => {
                    if *target == 0 || !cur.is_multiple_of(*target) {
                        return Err(Error::shape(
                            format!("{} layer {i}", self.name),
                            format!("width divisible by {target}"),
                            format!("{cur}"),
                        ));
                    }
                    *target
                }
            };
        }
        Ok(cur)
    }

    fn param_name(&self, layer_idx: usize, kind: &str) -> String {
        format!("{}.{}.{}", self.name, layer_idx, kind)
    }

    /// Forward pass recording onto `graph`. In train mode batch-norm layers
    /// normalize by batch statistics and update their running statistics;
    /// in eval mode they use the running statistics and nothing is mutated.
    pub fn forward_mut(&mut self, graph: &mut Graph<E>, input: Value, train: bool) -> Result<Value> {
        let trainable = !self.frozen;
        let mut cur = input;
        let name = self.name.clone();
        for idx in 0..self.layers.len() {
            let pname = |kind: &str| format!("{}.{}.{}", name, idx, kind);
            cur = match &mut self.layers[idx] {
                Layer::Fc { weight, bias } => {
                    if graph.value(cur).cols() != weight.shape()[0] {
                        return Err(Error::shape(
                            format!("{} layer {idx}", name),
                            format!("input {}", weight.shape()[0]),
                            format!("{}", graph.value(cur).cols()),
                        ));
                    }
                    let w = graph.param(&pname("weight"), weight.clone(), trainable);
                    let b = graph.param(&pname("bias"), bias.clone(), trainable);
                    let prod = graph.matmul(cur, w)?;
                    graph.add_bias(prod, b)?
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let g = graph.param(&pname("gamma"), gamma.clone(), trainable);
                    let b = graph.param(&pname("beta"), beta.clone(), trainable);
                    let (out, batch_mean, batch_var) = graph.batch_norm(
                        cur,
                        g,
                        b,
                        running_mean.data(),
                        running_var.data(),
                        BN_EPS,
                        train,
                    )?;
                    if train {
                        let rows = graph.value(cur).rows();
                        // Unbiased variance feeds the running estimate.
                        let adjust = if rows > 1 {
                            rows as f64 / (rows - 1) as f64
                        } else {
                            1.0
                        };
                        let momentum = re::<E>(BN_MOMENTUM);
                        let one_minus = re::<E>(1.0 - BN_MOMENTUM);
                        let adj = re::<E>(adjust);
                        for (r, &m) in running_mean.data_mut().iter_mut().zip(batch_mean.iter()) {
                            *r = *r * momentum + m * one_minus;
                        }
                        for (r, &v) in running_var.data_mut().iter_mut().zip(batch_var.iter()) {
                            *r = *r * momentum + v * adj * one_minus;
                        }
                    }
                    out
                }
                Layer::Relu => graph.relu(cur),
                Layer::Tanh => graph.tanh(cur),
                Layer::AvgPool { target } => graph.avg_pool(cur, *target)?,
            };
            graph.value(cur).check_finite(&format!("{} layer {idx}", name))?;
        }
        Ok(cur)
    }

    /// Inference-only forward: running statistics, no mutation.
    pub fn forward_eval(&self, graph: &mut Graph<E>, input: Value) -> Result<Value> {
        let mut cur = input;
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Fc { weight, bias } => {
                    if graph.value(cur).cols() != weight.shape()[0] {
                        return Err(Error::shape(
                            format!("{} layer {idx}", self.name),
                            format!("input {}", weight.shape()[0]),
                            format!("{}", graph.value(cur).cols()),
                        ));
                    }
                    let w = graph.constant(weight.clone());
                    let b = graph.constant(bias.clone());
                    let prod = graph.matmul(cur, w)?;
                    graph.add_bias(prod, b)?
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let g = graph.constant(gamma.clone());
                    let b = graph.constant(beta.clone());
                    let (out, _, _) = graph.batch_norm(
                        cur,
                        g,
                        b,
                        running_mean.data(),
                        running_var.data(),
                        BN_EPS,
                        false,
                    )?;
                    out
                }
                Layer::Relu => graph.relu(cur),
                Layer::Tanh => graph.tanh(cur),
                Layer::AvgPool { target } => graph.avg_pool(cur, *target)?,
            };
            graph.value(cur).check_finite(&format!("{} layer {idx}", self.name))?;
        }
        Ok(cur)
    }

    /// Convenience eval forward over a plain tensor.
    pub fn apply_eval(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let mut graph = Graph::new();
        let x = graph.constant(input.clone());
        let out = self.forward_eval(&mut graph, x)?;
        Ok(graph.value(out).clone())
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<E>)) {
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Fc { weight, bias } => {
                    f(&self.param_name(idx, "weight"), weight);
                    f(&self.param_name(idx, "bias"), bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    f(&self.param_name(idx, "gamma"), gamma);
                    f(&self.param_name(idx, "beta"), beta);
                }
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<E>)) {
        let name = self.name.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Fc { weight, bias } => {
                    f(&format!("{name}.{idx}.weight"), weight);
                    f(&format!("{name}.{idx}.bias"), bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    f(&format!("{name}.{idx}.gamma"), gamma);
                    f(&format!("{name}.{idx}.beta"), beta);
                }
                _ => {}
            }
        }
    }

    pub fn param_mut(&mut self, target: &str) -> Option<&mut Tensor<E>> {
        let name = self.name.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Fc { weight, bias } => {
                    if target == format!("{name}.{idx}.weight") {
                        return Some(weight);
                    }
                    if target == format!("{name}.{idx}.bias") {
                        return Some(bias);
                    }
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    if target == format!("{name}.{idx}.gamma") {
                        return Some(gamma);
                    }
                    if target == format!("{name}.{idx}.beta") {
                        return Some(beta);
                    }
                }
                _ => {}
            }
        }
        None
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(|_, t| count += t.len());
        count
    }

    /// Full state (parameters plus running statistics) as owned tensors,
    /// for snapshot/restore in the finite-difference oracle.
    pub fn state_snapshot(&self) -> Vec<Tensor<E>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Fc { weight, bias } => {
                    out.push(weight.clone());
                    out.push(bias.clone());
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push(gamma.clone());
                    out.push(beta.clone());
                    out.push(running_mean.clone());
                    out.push(running_var.clone());
                }
                _ => {}
            }
        }
        out
    }

    pub fn state_restore(&mut self, snapshot: &[Tensor<E>]) {
        let mut it = snapshot.iter();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Fc { weight, bias } => {
                    *weight = it.next().expect("snapshot length").clone();
                    *bias = it.next().expect("snapshot length").clone();
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    *gamma = it.next().expect("snapshot length").clone();
                    *beta = it.next().expect("snapshot length").clone();
                    *running_mean = it.next().expect("snapshot length").clone();
                    *running_var = it.next().expect("snapshot length").clone();
                }
                _ => {}
            }
        }
    }

    /// Order-stable hash of the full state, for untouched-model assertions.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in self.state_snapshot() {
            for v in t.data() {
                for b in v.into_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

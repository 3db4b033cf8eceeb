#![allow(clippy::needless_range_loop)]

//! Reverse-mode differentiation over a per-step tape.
//!
//! A fresh `Graph` is built for every optimization step (define-by-run).
//! Leaves are either constants or named parameters; `backward` walks the tape
//! in reverse and returns one gradient tensor per trainable parameter name,
//! accumulating across repeated bindings of the same parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, re, squared_distance, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Gradients keyed by parameter name.
pub type GradMap<E> = BTreeMap<String, Tensor<E>>;

enum Op<E: Real> {
    Leaf {
        trainable: bool,
        name: Option<String>,
    },
    MatMul {
        a: Value,
        b: Value,
    },
    AddBias {
        x: Value,
        bias: Value,
    },
    Relu {
        x: Value,
    },
    Tanh {
        x: Value,
    },
    AvgPool {
        x: Value,
        group: usize,
    },
    /// Batch statistics normalization; `xhat` and `inv_std` are saved from the
    /// forward pass. Eval mode shares the same backward minus the batch-stat
    /// coupling terms.
    BatchNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        xhat: Tensor<E>,
        inv_std: Vec<E>,
        batch_stats: bool,
    },
    /// Cosine of each input row against fixed unit-norm direction columns.
    CosineLogits {
        x: Value,
        directions: Tensor<E>,
        inv_norms: Vec<E>,
    },
    /// Additive angular margin on the true-class cosine plus rescale.
    MarginRescale {
        cos: Value,
        labels: Vec<usize>,
        scale: f64,
        margin: f64,
    },
    CrossEntropy {
        logits: Value,
        labels: Vec<usize>,
        softmax: Tensor<E>,
    },
    /// Mean squared error against a constant target, averaged over all elements.
    MseTo {
        pred: Value,
        target: Tensor<E>,
    },
    /// Class-wise centroid MSE where centroids are recomputed from the input.
    CentroidMse {
        z: Value,
        classes: Vec<u32>,
    },
    /// Biased (V-statistic) multi-kernel RBF MMD against a constant sample set.
    MmdRbf {
        x: Value,
        y: Tensor<E>,
        bandwidths: Vec<f64>,
    },
    Add {
        a: Value,
        b: Value,
    },
    Scale {
        a: Value,
        factor: f64,
    },
}

struct Node<E: Real> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op<E>,
}

pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Value {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Value) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Value) -> Result<f64> {
        let t = self.value(v);
        if !t.is_scalar() {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.data()[0].into_f64())
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Value {
        self.push(
            t,
            false,
            Op::Leaf {
                trainable: false,
                name: None,
            },
        )
    }

    /// Binds a named parameter as a leaf. Trainable leaves receive gradients.
    pub fn param(&mut self, name: &str, t: Tensor<E>, trainable: bool) -> Value {
        self.push(
            t,
            trainable,
            Op::Leaf {
                trainable,
                name: Some(name.to_string()),
            },
        )
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).matmul(self.value(b))?;
        out.check_finite("matmul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::MatMul { a, b }))
    }

    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.cols() != bv.len() {
            return Err(Error::shape(
                "bias add",
                format!("{} columns", bv.len()),
                format!("{}", xv.cols()),
            ));
        }
        let cols = xv.cols();
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + bv.data()[j % cols];
            }
        }
        out.check_finite("bias add")?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, needs, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let out = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let out = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(out, needs, Op::Tanh { x })
    }

    /// Grouped average pooling over the feature axis: [B, group*target] -> [B, target].
    pub fn avg_pool(&mut self, x: Value, target: usize) -> Result<Value> {
        let xv = self.value(x);
        let cols = xv.cols();
        if target == 0 || !cols.is_multiple_of(target) {
            return Err(Error::shape(
                "average pool",
                format!("columns divisible by {target}"),
                format!("{cols}"),
            ));
        }
        let group = cols / target;
        let rows = xv.rows();
        let mut out = vec![E::zero(); rows * target];
        let inv = re::<E>(1.0 / group as f64);
        for r in 0..rows {
            let row = xv.row(r);
            for j in 0..target {
                let mut acc = E::zero();
                for t in 0..group {
                    acc = acc + row[j * group + t];
                }
                out[r * target + j] = acc * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![rows, target], out)?, needs, Op::AvgPool { x, group }))
    }

    /// Batch normalization. With `batch_stats` the input's own batch statistics
    /// normalize it (training); otherwise the supplied running statistics do
    /// (inference). Returns the output plus the batch mean/var so the caller
    /// can maintain running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
        batch_stats: bool,
    ) -> Result<(Value, Vec<E>, Vec<E>)> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows == 0 {
            return Err(Error::InvalidArgument("batch norm over an empty batch".into()));
        }
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("batch norm", format!("{cols} features"), "affine size".to_string()));
        }
        let inv_rows = re::<E>(1.0 / rows as f64);
        let (mean, var) = if batch_stats {
            let mut mean = vec![E::zero(); cols];
            for r in 0..rows {
                for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                    *m = *m + v;
                }
            }
            for m in mean.iter_mut() {
                *m = *m * inv_rows;
            }
            let mut var = vec![E::zero(); cols];
            for r in 0..rows {
                for (j, &v) in xv.row(r).iter().enumerate() {
                    let d = v - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            for v in var.iter_mut() {
                *v = *v * inv_rows;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let epse = re::<E>(eps);
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + epse).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![E::zero(); rows * cols];
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = self.value(x).row(r);
            for j in 0..cols {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[r * cols + j] = h;
                out[r * cols + j] = gv[j] * h + bv[j];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        out.check_finite("batch norm")?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let node = self.push(
            out,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(vec![rows, cols], xhat)?,
                inv_std: inv_std.clone(),
                batch_stats,
            },
        );
        Ok((node, mean, var))
    }

    /// Cosine similarity of each row of `x` against the unit-norm columns of
    /// `directions` ([K, C]). Errors on a zero row.
    pub fn cosine_logits(&mut self, x: Value, directions: Tensor<E>) -> Result<Value> {
        let xv = self.value(x);
        let (rows, k) = (xv.rows(), xv.cols());
        if directions.shape()[0] != k {
            return Err(Error::shape(
                "cosine logits",
                format!("feature dim {}", directions.shape()[0]),
                format!("{k}"),
            ));
        }
        let c = directions.shape()[1];
        let mut inv_norms = Vec::with_capacity(rows);
        let mut out = vec![E::zero(); rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let norm = l2_norm(row);
            if norm <= E::zero() {
                return Err(Error::InvalidArgument("cosine of a zero feature vector".into()));
            }
            let inv = E::one() / norm;
            inv_norms.push(inv);
            for j in 0..c {
                let mut acc = E::zero();
                for t in 0..k {
                    acc = acc + row[t] * directions.at2(t, j);
                }
                out[r * c + j] = acc * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            needs,
            Op::CosineLogits {
                x,
                directions,
                inv_norms,
            },
        ))
    }

    /// ArcFace-style logit adjustment: the true-class cosine gets the additive
    /// angular margin, every entry is rescaled by `scale`. With margin 0 this
    /// is exactly a rescale, so scale=1, margin=0 is the identity.
    pub fn margin_rescale(&mut self, cos: Value, labels: &[usize], scale: f64, margin: f64) -> Result<Value> {
        let cv = self.value(cos);
        let (rows, c) = (cv.rows(), cv.cols());
        if labels.len() != rows {
            return Err(Error::shape("margin rescale", format!("{rows} labels"), format!("{}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                classes: c as u32,
            });
        }
        let s = re::<E>(scale);
        let mut out = cv.clone();
        for (r, &y) in labels.iter().enumerate() {
            let row = out.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                if j == y {
                    let (psi, _) = margin_cos(v.into_f64(), margin);
                    *v = re::<E>(psi) * s;
                } else {
                    *v = *v * s;
                }
            }
        }
        let needs = self.needs(cos);
        Ok(self.push(
            out,
            needs,
            Op::MarginRescale {
                cos,
                labels: labels.to_vec(),
                scale,
                margin,
            },
        ))
    }

    /// Mean softmax cross-entropy over rows of logits, stabilized by
    /// max-subtraction.
    pub fn cross_entropy(&mut self, logits: Value, labels: &[usize]) -> Result<Value> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if labels.len() != rows || rows == 0 {
            return Err(Error::shape("cross entropy", format!("{rows} labels"), format!("{}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                classes: c as u32,
            });
        }
        let mut softmax = vec![E::zero(); rows * c];
        let mut loss = E::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut denom = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                softmax[r * c + j] = e;
                denom = denom + e;
            }
            for j in 0..c {
                softmax[r * c + j] = softmax[r * c + j] / denom;
            }
            // -log p_y via log-sum-exp; the normalized probability can
            // underflow to zero at large scales, its log must not.
            loss = loss - (row[y] - max - denom.ln());
        }
        loss = loss * re::<E>(1.0 / rows as f64);
        let value = Tensor::scalar(loss);
        value.check_finite("cross entropy")?;
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax: Tensor::new(vec![rows, c], softmax)?,
            },
        ))
    }

    /// Mean squared error against a constant target, averaged over every element.
    pub fn mse_to(&mut self, pred: Value, target: Tensor<E>) -> Result<Value> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?}", target.shape()),
                format!("{:?}", pv.shape()),
            ));
        }
        if pv.is_empty() {
            return Err(Error::InvalidArgument("mse over an empty tensor".into()));
        }
        let mut acc = E::zero();
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            let d = p - t;
            acc = acc + d * d;
        }
        acc = acc * re::<E>(1.0 / pv.len() as f64);
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(acc), needs, Op::MseTo { pred, target }))
    }

    /// Class-wise centroid tightness: mean over classes of the mean over that
    /// class's rows of per-element squared distance to the class centroid,
    /// where centroids are the per-class row means of `z` itself.
    pub fn centroid_mse(&mut self, z: Value, classes: &[u32]) -> Result<Value> {
        let zv = self.value(z);
        let (rows, dim) = (zv.rows(), zv.cols());
        if classes.len() != rows || rows == 0 {
            return Err(Error::shape(
                "centroid mse",
                format!("{rows} class tags"),
                format!("{}", classes.len()),
            ));
        }
        let (centroids, counts) = class_centroids(zv, classes);
        let present = centroids.len();
        let mut loss = E::zero();
        for (r, &c) in classes.iter().enumerate() {
            let q = &centroids[&c];
            let d2 = squared_distance(zv.row(r), q);
            let weight = re::<E>(1.0 / (present as f64 * counts[&c] as f64 * dim as f64));
            loss = loss + d2 * weight;
        }
        let needs = self.needs(z);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::CentroidMse {
                z,
                classes: classes.to_vec(),
            },
        ))
    }

    /// Biased V-statistic MMD with a mean-of-RBF-kernels, differentiable in `x`.
    pub fn mmd_rbf(&mut self, x: Value, y: Tensor<E>, bandwidths: &[f64]) -> Result<Value> {
        let xv = self.value(x);
        let value = mmd_rbf_raw(xv, &y, bandwidths)?;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(re(value)),
            needs,
            Op::MmdRbf {
                x,
                y,
                bandwidths: bandwidths.to_vec(),
            },
        ))
    }

    /// Element-wise sum of two same-shape nodes.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?}", av.shape()), format!("{:?}", bv.shape())));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: Value, factor: f64) -> Value {
        let f = re::<E>(factor);
        let out = self.value(a).map(|v| v * f);
        let needs = self.needs(a);
        self.push(out, needs, Op::Scale { a, factor })
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call on
    /// the same graph is an error. Frozen/constant leaves never appear in the
    /// returned map; repeated bindings of one parameter name accumulate.
    pub fn backward(&mut self, loss: Value) -> Result<GradMap<E>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let loss_tensor = self.value(loss);
        if !loss_tensor.is_scalar() {
            return Err(Error::NonScalarLoss(loss_tensor.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_tensor.shape().to_vec(), E::one()));
        let mut out = GradMap::new();
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { trainable, name } => {
                    if *trainable {
                        if let Some(name) = name {
                            match out.get_mut(name) {
                                Some(existing) => {
                                    for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                                        *e = *e + *g;
                                    }
                                }
                                None => {
                                    out.insert(name.clone(), grad);
                                }
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bt = self.value(b).transpose2()?;
                        let da = grad.matmul(&bt)?;
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(b) {
                        let at = self.value(a).transpose2()?;
                        let db = at.matmul(&grad)?;
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::AddBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    if self.needs(x) {
                        accumulate(&mut grads, x.0, grad.clone());
                    }
                    if self.needs(bias) {
                        let cols = grad.cols();
                        let mut db = vec![E::zero(); cols];
                        for r in 0..grad.rows() {
                            for (j, &g) in grad.row(r).iter().enumerate() {
                                db[j] = db[j] + g;
                            }
                        }
                        accumulate(&mut grads, bias.0, Tensor::new(vec![cols], db)?);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let xv = self.value(x);
                        let data = xv
                            .data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                            .collect();
                        accumulate(&mut grads, x.0, Tensor::new(xv.shape().to_vec(), data)?);
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let yv = &self.nodes[idx].value;
                        let data = yv
                            .data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&y, &g)| g * (E::one() - y * y))
                            .collect();
                        accumulate(&mut grads, x.0, Tensor::new(yv.shape().to_vec(), data)?);
                    }
                }
                Op::AvgPool { x, group } => {
                    let (x, group) = (*x, *group);
                    if self.needs(x) {
                        let xv = self.value(x);
                        let (rows, cols) = (xv.rows(), xv.cols());
                        let target = cols / group;
                        let inv = re::<E>(1.0 / group as f64);
                        let mut dx = vec![E::zero(); rows * cols];
                        for r in 0..rows {
                            for j in 0..target {
                                let g = grad.at2(r, j) * inv;
                                for t in 0..group {
                                    dx[r * cols + j * group + t] = g;
                                }
                            }
                        }
                        accumulate(&mut grads, x.0, Tensor::new(vec![rows, cols], dx)?);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (rows, cols) = (xhat.rows(), xhat.cols());
                    let gv = self.value(gamma).data().to_vec();
                    if self.needs(beta) {
                        let mut db = vec![E::zero(); cols];
                        for r in 0..rows {
                            for (j, &g) in grad.row(r).iter().enumerate() {
                                db[j] = db[j] + g;
                            }
                        }
                        accumulate(&mut grads, beta.0, Tensor::new(vec![cols], db)?);
                    }
                    if self.needs(gamma) {
                        let mut dg = vec![E::zero(); cols];
                        for r in 0..rows {
                            for (j, &g) in grad.row(r).iter().enumerate() {
                                dg[j] = dg[j] + g * xhat.at2(r, j);
                            }
                        }
                        accumulate(&mut grads, gamma.0, Tensor::new(vec![cols], dg)?);
                    }
                    if self.needs(x) {
                        let mut dx = vec![E::zero(); rows * cols];
                        if *batch_stats {
                            // dL/dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat))
                            let inv_rows = re::<E>(1.0 / rows as f64);
                            let mut mean_g = vec![E::zero(); cols];
                            let mut mean_gh = vec![E::zero(); cols];
                            for r in 0..rows {
                                for (j, &g) in grad.row(r).iter().enumerate() {
                                    mean_g[j] = mean_g[j] + g;
                                    mean_gh[j] = mean_gh[j] + g * xhat.at2(r, j);
                                }
                            }
                            for j in 0..cols {
                                mean_g[j] = mean_g[j] * inv_rows;
                                mean_gh[j] = mean_gh[j] * inv_rows;
                            }
                            for r in 0..rows {
                                for j in 0..cols {
                                    let g = grad.at2(r, j);
                                    dx[r * cols + j] = gv[j]
                                        * inv_std[j]
                                        * (g - mean_g[j] - xhat.at2(r, j) * mean_gh[j]);
                                }
                            }
                        } else {
                            for r in 0..rows {
                                for j in 0..cols {
                                    dx[r * cols + j] = grad.at2(r, j) * gv[j] * inv_std[j];
                                }
                            }
                        }
                        accumulate(&mut grads, x.0, Tensor::new(vec![rows, cols], dx)?);
                    }
                }
                Op::CosineLogits {
                    x,
                    directions,
                    inv_norms,
                } => {
                    let x = *x;
                    if self.needs(x) {
                        let cosines = &self.nodes[idx].value;
                        let xv = self.value(x);
                        let (rows, k) = (xv.rows(), xv.cols());
                        let c = directions.shape()[1];
                        let mut dx = vec![E::zero(); rows * k];
                        for r in 0..rows {
                            let g_row = grad.row(r);
                            let cos_row = cosines.row(r);
                            let x_row = xv.row(r);
                            let inv = inv_norms[r];
                            let g_dot_cos = dot(g_row, cos_row);
                            for t in 0..k {
                                let mut vg = E::zero();
                                for j in 0..c {
                                    vg = vg + directions.at2(t, j) * g_row[j];
                                }
                                let xhat = x_row[t] * inv;
                                dx[r * k + t] = inv * (vg - g_dot_cos * xhat);
                            }
                        }
                        accumulate(&mut grads, x.0, Tensor::new(vec![rows, k], dx)?);
                    }
                }
                Op::MarginRescale {
                    cos,
                    labels,
                    scale,
                    margin,
                } => {
                    let cos = *cos;
                    if self.needs(cos) {
                        let cv = self.value(cos);
                        let (rows, c) = (cv.rows(), cv.cols());
                        let s = re::<E>(*scale);
                        let mut dc = vec![E::zero(); rows * c];
                        for (r, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let g = grad.at2(r, j);
                                dc[r * c + j] = if j == y {
                                    let (_, dpsi) = margin_cos(cv.at2(r, j).into_f64(), *margin);
                                    g * s * re::<E>(dpsi)
                                } else {
                                    g * s
                                };
                            }
                        }
                        accumulate(&mut grads, cos.0, Tensor::new(vec![rows, c], dc)?);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    softmax,
                } => {
                    let logits = *logits;
                    if self.needs(logits) {
                        let g = grad.data()[0];
                        let (rows, c) = (softmax.rows(), softmax.cols());
                        let inv_rows = re::<E>(1.0 / rows as f64);
                        let mut dl = vec![E::zero(); rows * c];
                        for (r, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let p = softmax.at2(r, j);
                                let target = if j == y { E::one() } else { E::zero() };
                                dl[r * c + j] = g * (p - target) * inv_rows;
                            }
                        }
                        accumulate(&mut grads, logits.0, Tensor::new(vec![rows, c], dl)?);
                    }
                }
                Op::MseTo { pred, target } => {
                    let pred = *pred;
                    if self.needs(pred) {
                        let g = grad.data()[0];
                        let pv = self.value(pred);
                        let factor = re::<E>(2.0 / pv.len() as f64) * g;
                        let data = pv
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(&p, &t)| (p - t) * factor)
                            .collect();
                        accumulate(&mut grads, pred.0, Tensor::new(pv.shape().to_vec(), data)?);
                    }
                }
                Op::CentroidMse { z, classes } => {
                    let z = *z;
                    if self.needs(z) {
                        let g = grad.data()[0];
                        let zv = self.value(z);
                        let (rows, dim) = (zv.rows(), zv.cols());
                        let (centroids, counts) = class_centroids(zv, classes);
                        let present = centroids.len();
                        let mut dz = vec![E::zero(); rows * dim];
                        // Residuals within a class sum to zero, so the centroid
                        // coupling term vanishes: d/dz_k = 2 (z_k - Q_c) / (present * |M_c| * dim).
                        for (r, &c) in classes.iter().enumerate() {
                            let q = &centroids[&c];
                            let w = re::<E>(2.0 / (present as f64 * counts[&c] as f64 * dim as f64)) * g;
                            for j in 0..dim {
                                dz[r * dim + j] = (zv.at2(r, j) - q[j]) * w;
                            }
                        }
                        accumulate(&mut grads, z.0, Tensor::new(vec![rows, dim], dz)?);
                    }
                }
                Op::MmdRbf { x, y, bandwidths } => {
                    let x = *x;
                    if self.needs(x) {
                        let g = grad.data()[0];
                        let xv = self.value(x);
                        let dx = mmd_rbf_grad_x(xv, y, bandwidths, g)?;
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut grads, a.0, grad.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b.0, grad.clone());
                    }
                }
                Op::Scale { a, factor } => {
                    let a = *a;
                    if self.needs(a) {
                        let f = re::<E>(*factor);
                        accumulate(&mut grads, a.0, grad.map(|v| v * f));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<E: Real>(grads: &mut [Option<Tensor<E>>], idx: usize, delta: Tensor<E>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
}

/// cos(theta + m) on the true class, with the usual monotone fallback once
/// theta + m would pass pi. Returns (value, derivative w.r.t. cos theta).
/// m == 0 short-circuits to the exact identity.
fn margin_cos(u: f64, margin: f64) -> (f64, f64) {
    if margin == 0.0 {
        return (u, 1.0);
    }
    let u = u.clamp(-1.0 + 1e-7, 1.0 - 1e-7);
    let (sin_m, cos_m) = margin.sin_cos();
    if u >= -cos_m {
        let sin_theta = (1.0 - u * u).sqrt();
        (u * cos_m - sin_theta * sin_m, cos_m + u * sin_m / sin_theta)
    } else {
        (u - margin * sin_m, 1.0)
    }
}

fn class_centroids<E: Real>(
    z: &Tensor<E>,
    classes: &[u32],
) -> (BTreeMap<u32, Vec<E>>, BTreeMap<u32, usize>) {
    let dim = z.cols();
    let mut sums: BTreeMap<u32, Vec<E>> = BTreeMap::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (r, &c) in classes.iter().enumerate() {
        let entry = sums.entry(c).or_insert_with(|| vec![E::zero(); dim]);
        for (e, &v) in entry.iter_mut().zip(z.row(r)) {
            *e = *e + v;
        }
        *counts.entry(c).or_insert(0) += 1;
    }
    for (c, sum) in sums.iter_mut() {
        let inv = re::<E>(1.0 / counts[c] as f64);
        for v in sum.iter_mut() {
            *v = *v * inv;
        }
    }
    (sums, counts)
}

/// Mean-over-bandwidths RBF kernel value for a pair of rows, in f64.
fn kernel_mean<E: Real>(a: &[E], b: &[E], bandwidths: &[f64]) -> f64 {
    let d2 = squared_distance(a, b).into_f64();
    let mut acc = 0.0;
    for &s2 in bandwidths {
        acc += (-d2 / (2.0 * s2)).exp();
    }
    acc / bandwidths.len() as f64
}

/// Biased V-statistic MMD^2 over two row sets with a mean-of-RBF kernel.
/// Arguments are ordered canonically before accumulation, so the result is
/// bitwise symmetric in its inputs.
pub(crate) fn mmd_rbf_raw<E: Real>(x: &Tensor<E>, y: &Tensor<E>, bandwidths: &[f64]) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::InvalidArgument("mmd over an empty sample set".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("mmd", format!("{} columns", x.cols()), format!("{}", y.cols())));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&b| b <= 0.0) {
        return Err(Error::InvalidArgument("mmd bandwidths must be positive".into()));
    }
    let (a, b) = if canonical_swap(x, y) { (y, x) } else { (x, y) };
    let (n, m) = (a.rows(), b.rows());
    let mut aa = 0.0;
    for i in 0..n {
        for j in 0..n {
            aa += kernel_mean(a.row(i), a.row(j), bandwidths);
        }
    }
    let mut bb = 0.0;
    for i in 0..m {
        for j in 0..m {
            bb += kernel_mean(b.row(i), b.row(j), bandwidths);
        }
    }
    let mut ab = 0.0;
    for i in 0..n {
        for j in 0..m {
            ab += kernel_mean(a.row(i), b.row(j), bandwidths);
        }
    }
    Ok(aa / (n * n) as f64 + bb / (m * m) as f64 - 2.0 * ab / (n * m) as f64)
}

/// Fixed total order on sample sets: larger set first, ties broken by raw
/// element bits.
fn canonical_swap<E: Real>(x: &Tensor<E>, y: &Tensor<E>) -> bool {
    match x.rows().cmp(&y.rows()) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            for (a, b) in x.data().iter().zip(y.data()) {
                match a.into_f64().to_bits().cmp(&b.into_f64().to_bits()) {
                    std::cmp::Ordering::Less => return true,
                    std::cmp::Ordering::Greater => return false,
                    std::cmp::Ordering::Equal => {}
                }
            }
            false
        }
    }
}

fn mmd_rbf_grad_x<E: Real>(
    x: &Tensor<E>,
    y: &Tensor<E>,
    bandwidths: &[f64],
    upstream: E,
) -> Result<Tensor<E>> {
    let (n, m, dim) = (x.rows(), y.rows(), x.cols());
    let g = upstream.into_f64();
    let mut dx = vec![0.0f64; n * dim];
    let nb = bandwidths.len() as f64;
    // d k(a,b)/d a = mean_s exp(-d2/(2 s2)) * (b - a)/s2
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2 = squared_distance(x.row(i), x.row(j)).into_f64();
            let mut w = 0.0;
            for &s2 in bandwidths {
                w += (-d2 / (2.0 * s2)).exp() / s2;
            }
            w /= nb;
            // factor 2/n^2 from the symmetric double sum
            let coeff = 2.0 / (n * n) as f64 * w;
            for t in 0..dim {
                let diff = x.at2(j, t).into_f64() - x.at2(i, t).into_f64();
                dx[i * dim + t] += coeff * diff;
            }
        }
        for j in 0..m {
            let d2 = squared_distance(x.row(i), y.row(j)).into_f64();
            let mut w = 0.0;
            for &s2 in bandwidths {
                w += (-d2 / (2.0 * s2)).exp() / s2;
            }
            w /= nb;
            let coeff = -2.0 / (n * m) as f64 * w;
            for t in 0..dim {
                let diff = y.at2(j, t).into_f64() - x.at2(i, t).into_f64();
                dx[i * dim + t] += coeff * diff;
            }
        }
    }
    let data = dx.iter().map(|&v| re::<E>(v * g)).collect();
    Tensor::new(vec![n, dim], data)
}

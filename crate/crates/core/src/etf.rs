#![allow(clippy::needless_range_loop)]

//! The shared simplex-ETF classifier and the angular-margin loss on top of it.
//!
//! A simplex equiangular tight frame is the unique (up to rotation) set of C
//! unit vectors in R^K, K >= C-1, whose pairwise cosines all equal -1/(C-1):
//! the most evenly separated fixed classifier possible. Every client scores
//! features by cosine similarity against the same frame.

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::rng::{normal_f64, StreamKey};
use crate::tensor::{Real, Tensor};

const ORTHO_RETRIES: u32 = 8;

#[derive(Debug, Clone)]
pub struct SimplexEtf<E: Real> {
    /// Column c is the unit-norm class direction, [K, C].
    directions: Tensor<E>,
    /// The rotation factor the frame was built from, [K, C].
    rotation: Tensor<E>,
    classes: usize,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ArcFaceParams {
    pub scale: f64,
    pub margin: f64,
}

impl ArcFaceParams {
    pub fn new(scale: f64, margin: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::InvalidArgument(format!("rescale {scale} must be positive")));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::InvalidArgument(format!(
                "margin {margin} outside [0, pi/2)"
            )));
        }
        Ok(ArcFaceParams { scale, margin })
    }

    /// The softmax-over-cosines variant: no rescale, no margin.
    pub fn contrastive() -> Self {
        ArcFaceParams {
            scale: 1.0,
            margin: 0.0,
        }
    }
}

/// Synthesizes the frame V = sqrt(C/(C-1)) * U * (I - 11^T/C) from a seeded
/// random rotation. For K >= C the rotation U is a column-orthonormal K x C
/// matrix; for K = C-1 (where U^T U = I_C is unattainable) the frame is built
/// on an orthonormal basis of the centered subspace instead, which yields the
/// same Gram matrix.
pub fn synthesize_etf<E: Real>(classes: usize, dim: usize, seed: u64) -> Result<SimplexEtf<E>> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if dim + 1 < classes {
        return Err(Error::InvalidArgument(format!(
            "ETF dimension {dim} below {} (= classes - 1)",
            classes - 1
        )));
    }
    let key = StreamKey::new(seed).tag("etf");
    let alpha = (classes as f64 / (classes as f64 - 1.0)).sqrt();

    for attempt in 0..ORTHO_RETRIES {
        let rotation = if dim >= classes {
            match orthonormal_columns(dim, classes, key.idx(attempt as u64)) {
                Some(u) => u,
                None => continue,
            }
        } else {
            // K = C-1: B spans a (C-1)-dim subspace, the Helmert basis S spans
            // the centered subspace of R^C; U = B S^T satisfies U^T U = I - 11^T/C.
            let b = match orthonormal_columns(dim, classes - 1, key.idx(attempt as u64)) {
                Some(b) => b,
                None => continue,
            };
            let helmert_t = helmert_basis(classes); // [C-1, C] (transposed basis)
            matmul_f64(&b, dim, classes - 1, &helmert_t, classes)
        };

        // V = alpha * U * (I - 11^T/C), i.e. subtract the row-mean of U's
        // columns... more precisely center the columns of U over classes.
        let mut v = vec![0.0f64; dim * classes];
        for r in 0..dim {
            let mut mean = 0.0;
            for c in 0..classes {
                mean += rotation[r * classes + c];
            }
            mean /= classes as f64;
            for c in 0..classes {
                v[r * classes + c] = alpha * (rotation[r * classes + c] - mean);
            }
        }
        // Tighten column norms to exactly one.
        let mut ok = true;
        for c in 0..classes {
            let mut norm = 0.0;
            for r in 0..dim {
                norm += v[r * classes + c] * v[r * classes + c];
            }
            let norm = norm.sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for r in 0..dim {
                v[r * classes + c] /= norm;
            }
        }
        if !ok {
            continue;
        }

        let etf = SimplexEtf {
            directions: Tensor::from_f64_slice(vec![dim, classes], &v)?,
            rotation: Tensor::from_f64_slice(vec![dim, classes], &rotation)?,
            classes,
            dim,
        };
        if etf_residuals_f64(&v, dim, classes) < 1e-9 {
            return Ok(etf);
        }
    }
    Err(Error::Infeasible(format!(
        "orthonormalization failed for C={classes}, K={dim} after {ORTHO_RETRIES} attempts"
    )))
}

/// Modified Gram-Schmidt with one re-orthogonalization pass, in f64.
/// Returns None on rank deficiency.
fn orthonormal_columns(rows: usize, cols: usize, key: StreamKey) -> Option<Vec<f64>> {
    let mut rng = key.rng();
    let mut m: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| normal_f64(&mut rng)).collect())
        .collect();
    for c in 0..cols {
        for _pass in 0..2 {
            for prev in 0..c {
                let proj: f64 = (0..rows).map(|r| m[c][r] * m[prev][r]).sum();
                for r in 0..rows {
                    m[c][r] -= proj * m[prev][r];
                }
            }
        }
        let norm: f64 = (0..rows).map(|r| m[c][r] * m[c][r]).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return None;
        }
        for r in 0..rows {
            m[c][r] /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (c, col) in m.iter().enumerate() {
        for (r, &val) in col.iter().enumerate() {
            out[r * cols + c] = val;
        }
    }
    Some(out)
}

/// Rows are the classical Helmert contrasts: an orthonormal basis of the
/// subspace of R^C orthogonal to the all-ones vector. Shape [C-1, C].
fn helmert_basis(classes: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; (classes - 1) * classes];
    for k in 1..classes {
        let norm = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for j in 0..k {
            out[(k - 1) * classes + j] = norm;
        }
        out[(k - 1) * classes + k] = -(k as f64) * norm;
    }
    out
}

fn matmul_f64(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; ar * bc];
    for i in 0..ar {
        for t in 0..ac {
            let v = a[i * ac + t];
            for j in 0..bc {
                out[i * bc + j] += v * b[t * bc + j];
            }
        }
    }
    out
}

/// Max deviation of the Gram matrix from (C/(C-1)) (I - 11^T/C).
fn etf_residuals_f64(v: &[f64], dim: usize, classes: usize) -> f64 {
    let mut worst = 0.0f64;
    for c1 in 0..classes {
        for c2 in 0..classes {
            let mut g = 0.0;
            for r in 0..dim {
                g += v[r * classes + c1] * v[r * classes + c2];
            }
            let expect = if c1 == c2 {
                1.0
            } else {
                -1.0 / (classes as f64 - 1.0)
            };
            worst = worst.max((g - expect).abs());
        }
    }
    worst
}

impl<E: Real> SimplexEtf<E> {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// [K, C] matrix whose columns are the class directions.
    pub fn directions(&self) -> &Tensor<E> {
        &self.directions
    }

    pub fn rotation(&self) -> &Tensor<E> {
        &self.rotation
    }

    pub fn direction(&self, class: usize) -> Vec<E> {
        (0..self.dim).map(|r| self.directions.at2(r, class)).collect()
    }

    /// Cosine of a single feature vector against every class direction.
    pub fn cosine_logits(&self, feature: &[E]) -> Result<Vec<E>> {
        if feature.len() != self.dim {
            return Err(Error::shape("cosine logits", format!("{}", self.dim), format!("{}", feature.len())));
        }
        let mut norm = E::zero();
        for &x in feature {
            norm = norm + x * x;
        }
        let norm = norm.sqrt();
        if norm <= E::zero() {
            return Err(Error::InvalidArgument("cosine of a zero feature vector".into()));
        }
        let inv = E::one() / norm;
        let mut out = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let mut acc = E::zero();
            for r in 0..self.dim {
                acc = acc + feature[r] * self.directions.at2(r, c);
            }
            out.push(acc * inv);
        }
        Ok(out)
    }

    /// Max |gram - expected| and max |norm - 1| over the stored frame, checked
    /// in f64.
    pub fn invariant_residual(&self) -> f64 {
        let v = self.directions.to_f64_vec();
        etf_residuals_f64(&v, self.dim, self.classes)
    }

    /// Max deviation of rotation^T rotation from its expected Gram: the
    /// identity for K >= C, the centering projector for K = C-1.
    pub fn rotation_residual(&self) -> f64 {
        let u = self.rotation.to_f64_vec();
        let (k, c) = (self.dim, self.classes);
        let mut worst = 0.0f64;
        for c1 in 0..c {
            for c2 in 0..c {
                let mut g = 0.0;
                for r in 0..k {
                    g += u[r * c + c1] * u[r * c + c2];
                }
                let expect = if k >= c {
                    if c1 == c2 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let id = if c1 == c2 { 1.0 } else { 0.0 };
                    id - 1.0 / c as f64
                };
                worst = worst.max((g - expect).abs());
            }
        }
        worst
    }
}

/// Differentiable margin-softmax loss over a batch of features ([B, K]).
/// With scale 1 and margin 0 this reduces exactly to softmax cross-entropy
/// over the cosine logits.
pub fn arcface_loss<E: Real>(
    graph: &mut Graph<E>,
    features: Value,
    labels: &[usize],
    etf: &SimplexEtf<E>,
    params: &ArcFaceParams,
) -> Result<Value> {
    let cos = graph.cosine_logits(features, etf.directions.clone())?;
    let adjusted = graph.margin_rescale(cos, labels, params.scale, params.margin)?;
    graph.cross_entropy(adjusted, labels)
}

/// Non-graph convenience: the loss value for a batch of plain feature rows.
pub fn arcface_loss_value<E: Real>(
    features: &Tensor<E>,
    labels: &[usize],
    etf: &SimplexEtf<E>,
    params: &ArcFaceParams,
) -> Result<f64> {
    let mut graph = Graph::new();
    let f = graph.constant(features.clone());
    let loss = arcface_loss(&mut graph, f, labels, etf, params)?;
    graph.scalar_value(loss)
}

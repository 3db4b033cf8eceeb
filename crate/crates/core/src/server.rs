//! Server logic: align uploaded prototypes into the generator's latent
//! domain with a small trainable transformer, aggregate class centroids, and
//! synthesize one image-vector pair per class.

use std::collections::BTreeMap;

use crate::config::Ablation;
use crate::client::PrototypeSet;
use crate::error::{Error, Result};
use crate::generator::{FrozenGenerator, ImageVectorPair};
use crate::graph::{mmd_rbf_raw, Graph, Value};
use crate::nn::{Module, ModuleBuilder};
use crate::optim::Optimizer;
use crate::rng::{normal_f64, shuffle, uniform_f64, StreamKey};
use crate::tensor::{re, Real, Tensor};

/// Bandwidth multipliers around the median heuristic.
pub const BANDWIDTH_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone)]
pub struct FeatureTransformer<E: Real> {
    module: Module<E>,
    optimizer: Optimizer<E>,
}

/// Two FC layers around one batch normalization, prototypes in, latents out.
pub fn build_feature_transformer<E: Real>(
    etf_dim: usize,
    latent_dim: usize,
    learning_rate: f64,
    seed: u64,
) -> FeatureTransformer<E> {
    let module = ModuleBuilder::new("server.transformer", StreamKey::new(seed).tag("transformer"))
        .fc(etf_dim, latent_dim)
        .batch_norm(latent_dim)
        .fc(latent_dim, latent_dim)
        .build(false);
    FeatureTransformer {
        module,
        optimizer: Optimizer::adam(learning_rate),
    }
}

impl<E: Real> FeatureTransformer<E> {
    pub fn module(&self) -> &Module<E> {
        &self.module
    }

    pub fn module_mut(&mut self) -> &mut Module<E> {
        &mut self.module
    }

    pub fn fingerprint(&self) -> u64 {
        self.module.fingerprint()
    }

    /// One optimizer step on the transformer from a gradient map.
    pub fn apply_grads(&mut self, grads: &crate::graph::GradMap<E>) -> Result<()> {
        self.optimizer.step(&mut [&mut self.module], grads)
    }

    /// Inference-mode transform of a prototype batch.
    pub fn transform_eval(&self, prototypes: &Tensor<E>) -> Result<Tensor<E>> {
        self.module.apply_eval(prototypes)
    }
}

#[derive(Debug, Clone)]
pub struct BankEntry<E: Real> {
    pub client: usize,
    pub class: u32,
    pub prototype: Vec<E>,
}

/// All prototypes uploaded in one round, ordered by (client, class).
#[derive(Debug, Clone, Default)]
pub struct PrototypeBank<E: Real> {
    entries: Vec<BankEntry<E>>,
}

impl<E: Real> PrototypeBank<E> {
    pub fn from_sets(sets: &[PrototypeSet<E>]) -> Self {
        let mut entries = Vec::new();
        let mut ordered: Vec<&PrototypeSet<E>> = sets.iter().collect();
        ordered.sort_by_key(|s| s.owner);
        for set in ordered {
            for (&class, proto) in &set.entries {
                entries.push(BankEntry {
                    client: set.owner,
                    class,
                    prototype: proto.clone(),
                });
            }
        }
        PrototypeBank { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry<E>] {
        &self.entries
    }

    /// Clients owning a class this round, ascending.
    pub fn owners(&self, class: u32) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.client)
            .collect();
        out.sort_unstable();
        out
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.entries.iter().map(|e| e.class).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Stacks the selected entries into a [n, K] matrix plus class tags.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<E>, Vec<u32>)> {
        let rows: Vec<&[E]> = indices
            .iter()
            .map(|&i| self.entries[i].prototype.as_slice())
            .collect();
        let tags = indices.iter().map(|&i| self.entries[i].class).collect();
        Ok((Tensor::from_rows(&rows)?, tags))
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.entries.len()).collect()
    }
}

/// Median-heuristic bandwidth ladder: sigma^2 = median pairwise squared
/// distance over the pooled rows, times the standard factors.
pub fn median_heuristic_bandwidths<E: Real>(pooled: &[&Tensor<E>]) -> Vec<f64> {
    let mut rows: Vec<&[E]> = Vec::new();
    for t in pooled {
        for r in 0..t.rows() {
            rows.push(t.row(r));
        }
    }
    let mut d2: Vec<f64> = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let mut acc = 0.0;
            for (a, b) in rows[i].iter().zip(rows[j].iter()) {
                let d = a.into_f64() - b.into_f64();
                acc += d * d;
            }
            d2.push(acc);
        }
    }
    let median = if d2.is_empty() {
        1.0
    } else {
        d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = d2[d2.len() / 2];
        if m > 1e-12 {
            m
        } else {
            1.0
        }
    };
    BANDWIDTH_FACTORS.iter().map(|f| f * median).collect()
}

/// Biased V-statistic MMD with the mean-of-RBF kernel, as a plain value.
pub fn mmd_rbf<E: Real>(x: &Tensor<E>, y: &Tensor<E>, bandwidths: &[f64]) -> Result<f64> {
    mmd_rbf_raw(x, y, bandwidths)
}

/// Graph form of the class-wise centroid loss over the full bank: forwards
/// the transformer on every prototype and scores tightness around the
/// per-class centroids (which are themselves transformer outputs, so the
/// gradient flows through both sides).
pub fn centroid_loss_graph<E: Real>(
    graph: &mut Graph<E>,
    transformer: &mut Module<E>,
    bank: &PrototypeBank<E>,
    train_mode: bool,
) -> Result<Value> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("centroid loss over an empty bank".into()));
    }
    let (batch, tags) = bank.gather(&bank.all_indices())?;
    let x = graph.constant(batch);
    let out = transformer.forward_mut(graph, x, train_mode)?;
    graph.centroid_mse(out, &tags)
}

/// The centroid loss as a plain value (inference mode).
pub fn mse_centroid_loss<E: Real>(
    transformer: &FeatureTransformer<E>,
    bank: &PrototypeBank<E>,
) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("centroid loss over an empty bank".into()));
    }
    let (batch, tags) = bank.gather(&bank.all_indices())?;
    let out = transformer.transform_eval(&batch)?;
    let mut graph = Graph::new();
    let z = graph.constant(out);
    let loss = graph.centroid_mse(z, &tags)?;
    graph.scalar_value(loss)
}

#[derive(Debug, Clone)]
pub struct AlignmentOptions {
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ablation: Ablation,
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default)]
pub struct AlignmentTrace {
    pub epoch_losses: Vec<f64>,
}

/// Trains the feature transformer for `epochs` epochs of minibatch steps.
/// Each step draws a fresh equal-count latent batch for the alignment term
/// and evaluates the centroid term on the full bank.
pub fn train_feature_transformer<E: Real>(
    transformer: &mut FeatureTransformer<E>,
    bank: &PrototypeBank<E>,
    gen: &FrozenGenerator<E>,
    opts: &AlignmentOptions,
    round: usize,
    seed: u64,
) -> Result<AlignmentTrace> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("cannot train the transformer on an empty bank".into()));
    }
    let key = StreamKey::new(seed).tag("server").idx(round as u64);
    let mut trace = AlignmentTrace::default();
    for epoch in 0..opts.epochs {
        let mut order = bank.all_indices();
        shuffle(&mut order, &mut key.tag("shuffle").idx(epoch as u64).rng());
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (chunk_idx, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (protos, _) = bank.gather(chunk)?;
            let mut graph = Graph::new();
            let x = graph.constant(protos);
            let transformed = transformer.module.forward_mut(&mut graph, x, true)?;

            let alignment = if opts.ablation != Ablation::NoAlignmentLoss {
                let latents = gen.sample_latents(
                    chunk.len(),
                    key.tag("latents").idx(epoch as u64).idx(chunk_idx as u64),
                )?;
                let bandwidths =
                    median_heuristic_bandwidths(&[graph.value(transformed), &latents]);
                Some(graph.mmd_rbf(transformed, latents, &bandwidths)?)
            } else {
                None
            };
            let tightness = if opts.ablation != Ablation::NoCentroidLoss {
                let raw = centroid_loss_graph(&mut graph, &mut transformer.module, bank, true)?;
                Some(graph.scale(raw, opts.lambda))
            } else {
                None
            };
            let total = match (alignment, tightness) {
                (Some(a), Some(t)) => graph.add(a, t)?,
                (Some(a), None) => a,
                (None, Some(t)) => t,
                (None, None) => {
                    return Err(Error::InvalidArgument(
                        "both server loss terms disabled".into(),
                    ))
                }
            };
            let value = graph.scalar_value(total)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "server loss at round {round}, epoch {epoch}"
                )));
            }
            let grads = graph.backward(total)?;
            transformer.apply_grads(&grads)?;
            epoch_loss += value;
            steps += 1;
        }
        trace.epoch_losses.push(epoch_loss / steps.max(1) as f64);
    }
    Ok(trace)
}

/// Per-class mean of transformed prototypes, inference mode. Classes missing
/// from this round's bank carry forward their previous centroid when one
/// exists, otherwise they stay absent.
pub fn compute_global_centroids<E: Real>(
    transformer: &FeatureTransformer<E>,
    bank: &PrototypeBank<E>,
    previous: &BTreeMap<u32, Vec<E>>,
) -> Result<BTreeMap<u32, Vec<E>>> {
    let mut merged = previous.clone();
    if bank.is_empty() {
        return Ok(merged);
    }
    let (batch, tags) = bank.gather(&bank.all_indices())?;
    let out = transformer.transform_eval(&batch)?;
    let dim = out.cols();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, &class) in tags.iter().enumerate() {
        let entry = sums.entry(class).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(out.row(r)) {
            *s += v.into_f64();
        }
        entry.1 += 1;
    }
    for (class, (sum, count)) in sums {
        let centroid: Vec<E> = sum.iter().map(|&s| re(s / count as f64)).collect();
        merged.insert(class, centroid);
    }
    Ok(merged)
}

/// One image per available class from the frozen synthesis network.
pub fn generate_pairs<E: Real>(
    centroids: &BTreeMap<u32, Vec<E>>,
    gen: &FrozenGenerator<E>,
    round: usize,
) -> Result<Vec<ImageVectorPair<E>>> {
    if centroids.is_empty() {
        return Err(Error::InvalidArgument("no centroids to generate from".into()));
    }
    let rows: Vec<&[E]> = centroids.values().map(|v| v.as_slice()).collect();
    let latents = Tensor::from_rows(&rows)?;
    let images = gen.synthesize(&latents)?;
    Ok(centroids
        .keys()
        .enumerate()
        .map(|(r, &class)| ImageVectorPair {
            class,
            latent: latents.row(r).to_vec(),
            image: images.row(r).to_vec(),
            round,
        })
        .collect())
}

/// Fixed pairs for the static-latent ablation: seeded latent draws made once
/// at round 0 and never updated.
pub fn static_pairs<E: Real>(
    classes: u32,
    gen: &FrozenGenerator<E>,
    seed: u64,
) -> Result<Vec<ImageVectorPair<E>>> {
    let latents = gen.sample_latents(classes as usize, StreamKey::new(seed).tag("static-pairs"))?;
    let images = gen.synthesize(&latents)?;
    Ok((0..classes)
        .map(|class| ImageVectorPair {
            class,
            latent: latents.row(class as usize).to_vec(),
            image: images.row(class as usize).to_vec(),
            round: 0,
        })
        .collect())
}

/// Element-wise Bernoulli-gated Gaussian perturbation: with probability p,
/// add a draw from N(0, scale^2).
pub fn perturb_gaussian<E: Real>(data: &mut [E], scale: f64, p: f64, key: StreamKey) {
    if p <= 0.0 || scale == 0.0 {
        return;
    }
    let mut rng = key.rng();
    for v in data.iter_mut() {
        if uniform_f64(&mut rng, 0.0, 1.0) < p {
            *v = *v + re::<E>(scale * normal_f64(&mut rng));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bank(entries: &[(usize, u32, Vec<f64>)]) -> PrototypeBank<f64> {
        PrototypeBank {
            entries: entries
                .iter()
                .map(|(client, class, proto)| BankEntry {
                    client: *client,
                    class: *class,
                    prototype: proto.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn bank_assembles_in_client_order() {
        let sets = vec![
            PrototypeSet {
                owner: 2,
                entries: [(0u32, vec![1.0f64])].into_iter().collect(),
            },
            PrototypeSet {
                owner: 0,
                entries: [(1u32, vec![2.0f64]), (0u32, vec![3.0])].into_iter().collect(),
            },
        ];
        let bank = PrototypeBank::from_sets(&sets);
        let order: Vec<(usize, u32)> = bank.entries().iter().map(|e| (e.client, e.class)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (2, 0)]);
        assert_eq!(bank.owners(0), vec![0, 2]);
        assert_eq!(bank.classes(), vec![0, 1]);
    }

    #[test]
    fn mmd_symmetry_is_exact() {
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.4, -0.3, 0.9, 1.2, -1.0]).unwrap();
        let y = Tensor::new(vec![4, 2], vec![0.0, 0.2, 0.5, -0.5, -0.2, 0.8, 1.0, 1.0]).unwrap();
        let bw = [0.5, 1.0, 2.0];
        let a = mmd_rbf(&x, &y, &bw).unwrap();
        let b = mmd_rbf(&y, &x, &bw).unwrap();
        assert_eq!(a, b);
        assert!(a >= -1e-7);
    }

    #[test]
    fn mmd_rejects_empty_and_bad_bandwidths() {
        let x = Tensor::<f64>::zeros(vec![0, 2]);
        let y = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(mmd_rbf(&x, &y, &[1.0]).is_err());
        let x = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(mmd_rbf(&x, &y, &[0.0]).is_err());
        assert!(mmd_rbf(&x, &y, &[]).is_err());
    }

    #[test]
    fn centroid_loss_zero_when_one_client_per_class() {
        let bank = toy_bank(&[
            (0, 0, vec![0.5, -0.2]),
            (1, 1, vec![1.5, 0.7]),
            (2, 2, vec![-0.8, 0.1]),
        ]);
        let transformer = build_feature_transformer::<f64>(2, 3, 0.01, 5);
        let loss = mse_centroid_loss(&transformer, &bank).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn centroid_loss_relabeling_invariance() {
        let protos = [
            (0usize, 0u32, vec![0.5, -0.2]),
            (1, 0, vec![0.1, 0.3]),
            (2, 1, vec![1.0, 1.0]),
            (3, 1, vec![-1.0, 0.4]),
        ];
        let mut renamed = protos.to_vec();
        renamed.swap(0, 1);
        renamed[0].0 = 7;
        renamed[1].0 = 4;
        let transformer = build_feature_transformer::<f64>(2, 3, 0.01, 5);
        let a = mse_centroid_loss(&transformer, &toy_bank(&protos)).unwrap();
        let b = mse_centroid_loss(&transformer, &toy_bank(&renamed)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_well_formed() {
        let x = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let bw = median_heuristic_bandwidths(&[&x]);
        assert_eq!(bw.len(), BANDWIDTH_FACTORS.len());
        assert!(bw.iter().all(|&b| b > 0.0));
        for w in bw.windows(2) {
            assert!(w[0] < w[1]);
        }
        // Degenerate input falls back to the unit ladder.
        let same = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let bw = median_heuristic_bandwidths(&[&same]);
        assert_eq!(bw[2], 1.0);
    }

    #[test]
    fn perturbation_gates_and_scales() {
        let n = 1_000_000usize;
        let mut data = vec![0.0f64; n];
        perturb_gaussian(&mut data, 0.05, 0.2, StreamKey::new(3).tag("noise"));
        let perturbed: Vec<f64> = data.iter().copied().filter(|v| *v != 0.0).collect();
        let fraction = perturbed.len() as f64 / n as f64;
        assert!((0.19..=0.21).contains(&fraction), "fraction {fraction}");
        let var = perturbed.iter().map(|v| v * v).sum::<f64>() / perturbed.len() as f64;
        let sd = var.sqrt();
        assert!((0.045..=0.055).contains(&sd), "stddev {sd}");
    }

    #[test]
    fn perturbation_noops() {
        let mut a = vec![1.0f64, 2.0, 3.0];
        perturb_gaussian(&mut a, 0.0, 0.5, StreamKey::new(1).tag("n"));
        assert_eq!(a, vec![1.0, 2.0, 3.0]);
        perturb_gaussian(&mut a, 0.5, 0.0, StreamKey::new(1).tag("n"));
        assert_eq!(a, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn centroids_average_and_carry_forward() {
        let transformer = build_feature_transformer::<f64>(2, 3, 0.01, 5);
        let bank = toy_bank(&[(0, 4, vec![0.5, -0.2]), (1, 4, vec![0.1, 0.3])]);
        let previous: BTreeMap<u32, Vec<f64>> = [(9u32, vec![7.0, 7.0, 7.0])].into_iter().collect();
        let centroids = compute_global_centroids(&transformer, &bank, &previous).unwrap();
        // Class 4: mean of the two transformed prototypes.
        let (batch, _) = bank.gather(&[0, 1]).unwrap();
        let out = transformer.transform_eval(&batch).unwrap();
        for j in 0..3 {
            let mean = (out.at2(0, j) + out.at2(1, j)) / 2.0;
            assert!((centroids[&4][j] - mean).abs() < 1e-12);
        }
        // Class 9 carried forward untouched; nothing else invented.
        assert_eq!(centroids[&9], vec![7.0, 7.0, 7.0]);
        assert_eq!(centroids.len(), 2);
    }

    #[test]
    fn single_owner_centroid_is_the_transform() {
        let transformer = build_feature_transformer::<f64>(2, 3, 0.01, 5);
        let bank = toy_bank(&[(0, 1, vec![0.5, -0.2])]);
        let centroids = compute_global_centroids(&transformer, &bank, &BTreeMap::new()).unwrap();
        let (batch, _) = bank.gather(&[0]).unwrap();
        let out = transformer.transform_eval(&batch).unwrap();
        assert_eq!(centroids[&1], out.row(0).to_vec());
    }

    #[test]
    fn pairs_are_resynthesizable() {
        let gen = crate::generator::build_synthetic_generator::<f64>(4, 3, 6, 2).unwrap();
        let transformer = build_feature_transformer::<f64>(2, 3, 0.01, 5);
        let bank = toy_bank(&[(0, 0, vec![0.5, -0.2]), (1, 1, vec![0.1, 0.3])]);
        let centroids = compute_global_centroids(&transformer, &bank, &BTreeMap::new()).unwrap();
        let pairs = generate_pairs(&centroids, &gen, 3).unwrap();
        assert_eq!(pairs.len(), 2);
        for pair in &pairs {
            let latent = Tensor::from_rows(&[pair.latent.as_slice()]).unwrap();
            let image = gen.synthesize(&latent).unwrap();
            assert_eq!(image.row(0), pair.image.as_slice());
            assert_eq!(pair.round, 3);
        }
    }

    #[test]
    fn static_pairs_are_fixed_by_seed() {
        let gen = crate::generator::build_synthetic_generator::<f64>(4, 3, 6, 2).unwrap();
        let a = static_pairs(5, &gen, 11).unwrap();
        let b = static_pairs(5, &gen, 11).unwrap();
        assert_eq!(a.len(), 5);
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.latent, q.latent);
            assert_eq!(p.image, q.image);
        }
    }

    #[test]
    fn alignment_only_descent_on_fixed_target() {
        // With the centroid term off and a fixed latent target batch, the
        // first ten Adam steps strictly decrease the alignment loss.
        let gen = crate::generator::build_synthetic_generator::<f64>(4, 3, 6, 2).unwrap();
        let mut transformer = build_feature_transformer::<f64>(2, 3, 0.01, 5);
        let (protos, _) = toy_bank(&[
            (0, 0, vec![2.5, -3.2]),
            (1, 1, vec![-1.5, 0.7]),
            (2, 2, vec![0.4, 1.9]),
        ])
        .gather(&[0, 1, 2])
        .unwrap();
        let target = gen.sample_latents(3, StreamKey::new(4).tag("fixed")).unwrap();
        let bandwidths = median_heuristic_bandwidths(&[&transformer.transform_eval(&protos).unwrap(), &target]);
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut graph = Graph::new();
            let x = graph.constant(protos.clone());
            let out = transformer.module_mut().forward_mut(&mut graph, x, true).unwrap();
            let loss = graph.mmd_rbf(out, target.clone(), &bandwidths).unwrap();
            losses.push(graph.scalar_value(loss).unwrap());
            let grads = graph.backward(loss).unwrap();
            transformer.apply_grads(&grads).unwrap();
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "not strictly decreasing: {losses:?}");
        }
    }

    #[test]
    fn full_loss_improves_on_seeded_bank() {
        let gen = crate::generator::build_synthetic_generator::<f64>(4, 3, 6, 2).unwrap();
        let mut transformer = build_feature_transformer::<f64>(3, 3, 0.01, 5);
        let bank = toy_bank(&[
            (0, 0, vec![1.5, -0.2, 0.3]),
            (1, 0, vec![1.1, 0.4, 0.2]),
            (0, 1, vec![-1.0, 1.0, -0.5]),
            (1, 2, vec![0.3, -1.4, 0.9]),
        ]);
        let opts = AlignmentOptions {
            lambda: 1.0,
            batch_size: 100,
            epochs: 60,
            ablation: Ablation::None,
        };
        let trace = train_feature_transformer(&mut transformer, &bank, &gen, &opts, 0, 9).unwrap();
        let first = trace.epoch_losses[0];
        let last = *trace.epoch_losses.last().unwrap();
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn centroid_only_single_owner_bank_is_flat_zero() {
        let gen = crate::generator::build_synthetic_generator::<f64>(4, 3, 6, 2).unwrap();
        let mut transformer = build_feature_transformer::<f64>(2, 3, 0.01, 5);
        let mut params_before = Vec::new();
        transformer.module().visit_params(|_, t| params_before.push(t.clone()));
        let bank = toy_bank(&[(0, 0, vec![0.5, -0.2]), (1, 1, vec![0.1, 0.3])]);
        let opts = AlignmentOptions {
            lambda: 1.0,
            batch_size: 8,
            epochs: 3,
            ablation: Ablation::NoAlignmentLoss,
        };
        let trace = train_feature_transformer(&mut transformer, &bank, &gen, &opts, 0, 9).unwrap();
        for &l in &trace.epoch_losses {
            assert!(l.abs() < 1e-12, "loss {l}");
        }
        // Zero loss means zero gradient; the update has no direction and the
        // parameters stay put (batch-norm running statistics may still move).
        let mut params_after = Vec::new();
        transformer.module().visit_params(|_, t| params_after.push(t.clone()));
        assert_eq!(params_before, params_after);
    }
}

//! One simulated client: a heterogeneous extractor, the shared-frame head (or
//! its learnable-classifier ablation), and the auxiliary projector that maps
//! image features back into the generator's latent space.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::config::Ablation;
use crate::error::{Error, Result};
use crate::etf::{arcface_loss, ArcFaceParams, SimplexEtf};
use crate::generator::ImageVectorPair;
use crate::graph::{Graph, Value};
use crate::nn::{init_fc, Module, ModuleBuilder};
use crate::optim::Optimizer;
use crate::rng::{shuffle, StreamKey};
use crate::tensor::{re, Real, Tensor};
use crate::data::Dataset;

/// Hidden FC widths of one extractor architecture; the final layer always
/// projects to the shared feature width.
pub type ExtractorRecipe = Vec<usize>;

#[derive(Debug, Clone)]
enum Head<E: Real> {
    /// Projection into the shared frame, scored by cosine similarity.
    Etf { projector: Module<E> },
    /// Learnable linear classifier; prototypes come from pre-classifier
    /// features pushed through a fixed seeded map into the frame dimension.
    Linear {
        classifier: Module<E>,
        prototype_map: Tensor<E>, // [K', K]
    },
}

#[derive(Debug, Clone)]
struct PairBatch<E: Real> {
    images: Tensor<E>,  // [P, input_dim], resampled from the wire image width
    latents: Tensor<E>, // [P, H]
    classes: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ClientModel<E: Real> {
    id: usize,
    extractor: Module<E>,
    head: Head<E>,
    aux_projector: Module<E>,
    etf: Arc<SimplexEtf<E>>,
    arcface: ArcFaceParams,
    input_dim: usize,
    feature_dim: usize,
    latent_dim: usize,
    pairs: Option<PairBatch<E>>,
}

/// Per-client map from class label to its mean feature vector in frame space.
#[derive(Debug, Clone)]
pub struct PrototypeSet<E: Real> {
    pub owner: usize,
    pub entries: BTreeMap<u32, Vec<E>>,
}

impl<E: Real> PrototypeSet<E> {
    /// Elements a transmission of this set occupies.
    pub fn upload_elements(&self, etf_dim: usize) -> u64 {
        (self.entries.len() * etf_dim) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LocalTrainOptions {
    pub mu: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub round: usize,
    pub epoch: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn build_client<E: Real>(
    id: usize,
    palette: &[ExtractorRecipe],
    input_dim: usize,
    feature_dim: usize,
    latent_dim: usize,
    etf: Arc<SimplexEtf<E>>,
    arcface: ArcFaceParams,
    ablation: Ablation,
    seed: u64,
) -> Result<ClientModel<E>> {
    if palette.is_empty() {
        return Err(Error::InvalidArgument("empty architecture palette".into()));
    }
    let recipe = &palette[id % palette.len()];
    let key = StreamKey::new(seed).tag("client").idx(id as u64);

    let mut builder = ModuleBuilder::new(format!("client{id}.extractor"), key.tag("extractor"));
    let mut cur = input_dim;
    for &width in recipe {
        if width == 0 {
            return Err(Error::InvalidArgument(format!(
                "zero width in architecture recipe {recipe:?}"
            )));
        }
        builder = builder.fc(cur, width).batch_norm(width).relu();
        cur = width;
    }
    // Embedding batch-norm keeps feature norms comparable across the
    // heterogeneous architectures, which both margin-softmax training and
    // the latent regression need at high transfer weight.
    builder = builder.fc(cur, feature_dim).batch_norm(feature_dim);
    let extractor = builder.build(false);
    extractor.output_dim(input_dim)?;

    let head = if ablation == Ablation::NoEtfHead {
        let classifier = ModuleBuilder::new(format!("client{id}.head"), key.tag("head"))
            .fc(feature_dim, etf.classes())
            .build(false);
        // One global seeded map shared by every client so aggregated
        // prototypes stay comparable.
        let (prototype_map, _) = init_fc::<E>(
            feature_dim,
            etf.dim(),
            StreamKey::new(seed).tag("linear-prototype-map"),
        );
        Head::Linear {
            classifier,
            prototype_map,
        }
    } else {
        let projector = ModuleBuilder::new(format!("client{id}.head"), key.tag("head"))
            .fc(feature_dim, etf.dim())
            .build(false);
        Head::Etf { projector }
    };

    let aux_projector = ModuleBuilder::new(format!("client{id}.aux"), key.tag("aux"))
        .fc(feature_dim, latent_dim)
        .build(false);

    Ok(ClientModel {
        id,
        extractor,
        head,
        aux_projector,
        etf,
        arcface,
        input_dim,
        feature_dim,
        latent_dim,
        pairs: None,
    })
}

/// Deterministic length adaptation between the wire image width and a
/// client's input width: bin-averaging downward, index-stretch upward.
pub fn resample<E: Real>(src: &[E], target: usize) -> Vec<E> {
    let n = src.len();
    if n == target {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(target);
    if n > target {
        for j in 0..target {
            let lo = j * n / target;
            let hi = ((j + 1) * n / target).max(lo + 1);
            let mut acc = E::zero();
            for &v in &src[lo..hi] {
                acc = acc + v;
            }
            out.push(acc * re::<E>(1.0 / (hi - lo) as f64));
        }
    } else {
        for j in 0..target {
            out.push(src[j * n / target]);
        }
    }
    out
}

impl<E: Real> ClientModel<E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn has_pairs(&self) -> bool {
        self.pairs.is_some()
    }

    pub fn etf(&self) -> &SimplexEtf<E> {
        &self.etf
    }

    /// Stores this round's image-vector pairs, adapting image width to the
    /// client input width.
    pub fn receive_pairs(&mut self, pairs: &[ImageVectorPair<E>]) -> Result<()> {
        if pairs.is_empty() {
            self.pairs = None;
            return Ok(());
        }
        let mut images = Vec::with_capacity(pairs.len() * self.input_dim);
        let mut latents = Vec::with_capacity(pairs.len() * self.latent_dim);
        let mut classes = Vec::with_capacity(pairs.len());
        for pair in pairs {
            if pair.latent.len() != self.latent_dim {
                return Err(Error::shape(
                    "pair latent",
                    format!("{}", self.latent_dim),
                    format!("{}", pair.latent.len()),
                ));
            }
            images.extend(resample(&pair.image, self.input_dim));
            latents.extend_from_slice(&pair.latent);
            classes.push(pair.class);
        }
        self.pairs = Some(PairBatch {
            images: Tensor::new(vec![pairs.len(), self.input_dim], images)?,
            latents: Tensor::new(vec![pairs.len(), self.latent_dim], latents)?,
            classes,
        });
        Ok(())
    }

    /// Reinitializes the auxiliary projector identically on every client:
    /// the stream is keyed by (shared seed, round) only.
    pub fn reinit_aux_projector(&mut self, round: usize, shared_seed: u64) {
        let key = StreamKey::new(shared_seed).tag("aux-reinit").idx(round as u64);
        let (weight, bias) = init_fc::<E>(self.feature_dim, self.latent_dim, key);
        let name = format!("client{}.aux", self.id);
        *self
            .aux_projector
            .param_mut(&format!("{name}.0.weight"))
            .expect("aux weight") = weight;
        *self
            .aux_projector
            .param_mut(&format!("{name}.0.bias"))
            .expect("aux bias") = bias;
    }

    /// Classification loss for a feature batch already gathered from data.
    pub fn classification_loss(
        &mut self,
        graph: &mut Graph<E>,
        batch: &Tensor<E>,
        labels: &[usize],
    ) -> Result<Value> {
        let x = graph.constant(batch.clone());
        let feat = self.extractor.forward_mut(graph, x, true)?;
        match &mut self.head {
            Head::Etf { projector } => {
                let frame = projector.forward_mut(graph, feat, true)?;
                arcface_loss(graph, frame, labels, &self.etf, &self.arcface)
            }
            Head::Linear { classifier, .. } => {
                let logits = classifier.forward_mut(graph, feat, true)?;
                graph.cross_entropy(logits, labels)
            }
        }
    }

    /// Mean squared error between the auxiliary projection of the pair images
    /// and their latent targets. Gradients reach the extractor and the
    /// auxiliary projector only; the head is not on this path. The pass keeps
    /// batch-norm on frozen running statistics: pair images are a different
    /// input domain than local data, and their batch statistics must not
    /// leak into the statistics evaluation relies on.
    pub fn knowledge_transfer_loss(&mut self, graph: &mut Graph<E>) -> Result<Value> {
        let pairs = self
            .pairs
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no image-vector pairs held".into()))?;
        let images = pairs.images.clone();
        let latents = pairs.latents.clone();
        let x = graph.constant(images);
        let feat = self.extractor.forward_mut(graph, x, false)?;
        let predicted = self.aux_projector.forward_mut(graph, feat, false)?;
        graph.mse_to(predicted, latents)
    }

    /// One local epoch: floor(pool / batch) SGD steps on the combined loss.
    /// Returns the mean classification loss and mean transfer loss (0 when
    /// the transfer term is inactive).
    pub fn train_epoch(
        &mut self,
        data: &Dataset<E>,
        train_idx: &[usize],
        opts: &LocalTrainOptions,
    ) -> Result<(f64, f64)> {
        if train_idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {}: empty train split",
                self.id
            )));
        }

        // The sample pool: real indices, plus pair images as labeled samples
        // under the no-latent-targets ablation.
        #[derive(Clone, Copy)]
        enum Sample {
            Real(usize),
            Pair(usize),
        }
        let mut pool: Vec<Sample> = train_idx.iter().map(|&i| Sample::Real(i)).collect();
        let mix_pairs = opts.ablation == Ablation::NoLatentTargets && self.pairs.is_some();
        if mix_pairs {
            let count = self.pairs.as_ref().unwrap().classes.len();
            pool.extend((0..count).map(Sample::Pair));
        }
        let shuffle_key = StreamKey::new(opts.seed)
            .tag("batches")
            .idx(opts.round as u64)
            .idx(self.id as u64)
            .idx(opts.epoch as u64);
        shuffle(&mut pool, &mut shuffle_key.rng());

        let use_transfer = self.pairs.is_some()
            && opts.mu > 0.0
            && !matches!(opts.ablation, Ablation::NoTransferLoss | Ablation::NoLatentTargets);

        let steps = pool.len() / opts.batch_size;
        let mut optimizer = Optimizer::sgd(opts.learning_rate);
        let mut sum_local = 0.0;
        let mut sum_transfer = 0.0;
        for step in 0..steps {
            let slice = &pool[step * opts.batch_size..(step + 1) * opts.batch_size];
            let mut rows: Vec<&[E]> = Vec::with_capacity(slice.len());
            let mut labels: Vec<usize> = Vec::with_capacity(slice.len());
            for sample in slice {
                match *sample {
                    Sample::Real(i) => {
                        rows.push(data.feature_row(i));
                        labels.push(data.label(i) as usize);
                    }
                    Sample::Pair(p) => {
                        let pairs = self.pairs.as_ref().unwrap();
                        rows.push(pairs.images.row(p));
                        labels.push(pairs.classes[p] as usize);
                    }
                }
            }
            let batch = Tensor::from_rows(&rows)?;

            // The transfer pass reads batch-norm running statistics as
            // constants, so it runs before the classification pass updates
            // them; each step's loss is then a pure function of entry state.
            let mut graph = Graph::new();
            let transfer = if use_transfer {
                let t = self.knowledge_transfer_loss(&mut graph)?;
                Some((t, graph.scalar_value(t)?))
            } else {
                None
            };
            let local = self.classification_loss(&mut graph, &batch, &labels)?;
            let local_value = graph.scalar_value(local)?;
            let (total, transfer_value) = match transfer {
                Some((t, value)) => {
                    let weighted = graph.scale(t, opts.mu);
                    (graph.add(local, weighted)?, value)
                }
                None => (local, 0.0),
            };
            if !graph.scalar_value(total)?.is_finite() {
                return Err(Error::NonFinite(format!("client {} training loss", self.id)));
            }
            let grads = graph.backward(total)?;
            match &mut self.head {
                Head::Etf { projector } => {
                    optimizer.step(&mut [&mut self.extractor, projector, &mut self.aux_projector], &grads)?;
                }
                Head::Linear { classifier, .. } => {
                    optimizer.step(&mut [&mut self.extractor, classifier, &mut self.aux_projector], &grads)?;
                }
            }
            sum_local += local_value;
            sum_transfer += transfer_value;
        }
        if steps == 0 {
            return Ok((f64::NAN, 0.0));
        }
        Ok((sum_local / steps as f64, sum_transfer / steps as f64))
    }

    /// Features in frame space for a batch, inference mode.
    fn frame_features(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        let feat = self.extractor.apply_eval(batch)?;
        match &self.head {
            Head::Etf { projector } => projector.apply_eval(&feat),
            Head::Linear { prototype_map, .. } => feat.matmul(prototype_map),
        }
    }

    /// Class-mean frame-space features over the training split, inference
    /// mode. Exactly the classes present in the split appear.
    pub fn extract_prototypes(&self, data: &Dataset<E>, train_idx: &[usize]) -> Result<PrototypeSet<E>> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in train_idx {
            by_class.entry(data.label(i)).or_default().push(i);
        }
        let mut entries = BTreeMap::new();
        for (class, indices) in by_class {
            let (batch, _) = data.gather(&indices)?;
            let frame = self.frame_features(&batch)?;
            let dim = frame.cols();
            let mut mean = vec![E::zero(); dim];
            for r in 0..frame.rows() {
                for (m, &v) in mean.iter_mut().zip(frame.row(r)) {
                    *m = *m + v;
                }
            }
            let inv = re::<E>(1.0 / frame.rows() as f64);
            for m in mean.iter_mut() {
                *m = *m * inv;
            }
            entries.insert(class, mean);
        }
        Ok(PrototypeSet {
            owner: self.id,
            entries,
        })
    }

    /// Argmax-cosine (or argmax-logit) prediction for one feature row.
    pub fn predict(&self, frame_row: &[E]) -> usize {
        // A dead (all-zero) feature has no direction; fall back to class 0.
        let norm: f64 = frame_row.iter().map(|v| v.into_f64() * v.into_f64()).sum();
        if norm == 0.0 {
            return 0;
        }
        match &self.head {
            Head::Etf { .. } => {
                let logits = self.etf.cosine_logits(frame_row).expect("non-zero feature");
                argmax(&logits)
            }
            Head::Linear { .. } => argmax(frame_row),
        }
    }

    /// Accuracy over the test split, inference mode.
    pub fn evaluate(&self, data: &Dataset<E>, test_idx: &[usize]) -> Result<f64> {
        if test_idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {}: empty test split",
                self.id
            )));
        }
        let (batch, labels) = data.gather(test_idx)?;
        let scored = match &self.head {
            Head::Etf { .. } => self.frame_features(&batch)?,
            Head::Linear { classifier, .. } => {
                let feat = self.extractor.apply_eval(&batch)?;
                classifier.apply_eval(&feat)?
            }
        };
        let mut correct = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let predicted = match &self.head {
                Head::Etf { .. } => self.predict(scored.row(r)),
                Head::Linear { .. } => argmax(scored.row(r)),
            };
            if predicted == label as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Hash of all trainable state, for untouched-between-rounds assertions.
    pub fn fingerprint(&self) -> u64 {
        let head = match &self.head {
            Head::Etf { projector } => projector.fingerprint(),
            Head::Linear { classifier, .. } => classifier.fingerprint(),
        };
        self.extractor.fingerprint() ^ head.rotate_left(11) ^ self.aux_projector.fingerprint().rotate_left(29)
    }

    /// Parameter names of the head (frame projector or classifier).
    pub fn head_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.head {
            Head::Etf { projector } => projector.visit_params(|n, _| names.push(n.to_string())),
            Head::Linear { classifier, .. } => classifier.visit_params(|n, _| names.push(n.to_string())),
        }
        names
    }

    pub fn aux_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.aux_projector.visit_params(|n, _| names.push(n.to_string()));
        names
    }

    pub fn aux_fingerprint(&self) -> u64 {
        self.aux_projector.fingerprint()
    }

    pub fn extractor(&self) -> &Module<E> {
        &self.extractor
    }

    /// Forward shape audit: widths the extractor produces layer by layer.
    pub fn extractor_output_dim(&self) -> Result<usize> {
        self.extractor.output_dim(self.input_dim)
    }

    /// Hidden widths of the extractor's FC layers, in order.
    pub fn extractor_widths(&self) -> Vec<usize> {
        let mut widths = Vec::new();
        self.extractor.visit_params(|name, tensor| {
            if name.ends_with(".weight") && tensor.shape().len() == 2 {
                widths.push(tensor.shape()[1]);
            }
        });
        widths
    }
}

fn argmax<E: Real>(xs: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

//! Labeled datasets, non-IID partitioning, and the KTLD file format.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::{normal_f64, shuffle, StreamKey};
use crate::tensor::{re, Real, Tensor};

/// Symmetric Dirichlet(alpha) over `n` slots via normalized Gamma draws.
fn dirichlet_symmetric<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma({alpha}): {e}")))?;
    for _ in 0..64 {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.iter().map(|d| d / sum).collect());
        }
    }
    Err(Error::InvalidArgument(format!(
        "dirichlet({alpha}) draws degenerate after 64 tries"
    )))
}

pub const KTLD_MAGIC: &[u8; 4] = b"KTLD";
pub const KTLD_VERSION: u32 = 1;

const PARTITION_RETRIES: u32 = 32;

#[derive(Debug, Clone)]
pub struct Dataset<E: Real> {
    features: Tensor<E>, // [n, d]
    labels: Vec<u32>,
    classes: u32,
}

impl<E: Real> Dataset<E> {
    pub fn new(features: Tensor<E>, labels: Vec<u32>, classes: u32) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("[{}, d] features", labels.len()),
                format!("{:?}", features.shape()),
            ));
        }
        features.check_finite("dataset features")?;
        let mut seen = vec![false; classes as usize];
        for &label in &labels {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            seen[label as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "dataset does not cover all {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn features(&self) -> &Tensor<E> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn feature_row(&self, idx: usize) -> &[E] {
        self.features.row(idx)
    }

    pub fn label(&self, idx: usize) -> u32 {
        self.labels[idx]
    }

    /// Gathers the given rows into a [len, d] batch plus their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<E>, Vec<u32>)> {
        let rows: Vec<&[E]> = indices.iter().map(|&i| self.feature_row(i)).collect();
        let batch = Tensor::from_rows(&rows)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((batch, labels))
    }
}

/// Gaussian class clusters around seeded random unit-norm centers. Feature
/// values are quantized to f32 at creation so the on-disk format is lossless
/// in either precision mode.
pub fn make_synthetic_dataset<E: Real>(
    classes: u32,
    dim: usize,
    samples_per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset<E>> {
    if classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::InvalidArgument(
            "classes, dim, samples_per_class must all be positive".into(),
        ));
    }
    if cluster_spread <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "cluster spread {cluster_spread} must be positive"
        )));
    }
    let key = StreamKey::new(seed).tag("data");
    let n = classes as usize * samples_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let mut center_rng = key.tag("center").idx(class as u64).rng();
        let mut center: Vec<f64> = (0..dim).map(|_| normal_f64(&mut center_rng)).collect();
        let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in center.iter_mut() {
            *v /= norm;
        }
        let mut sample_rng = key.tag("samples").idx(class as u64).rng();
        for _ in 0..samples_per_class {
            for &c in &center {
                let v = c + cluster_spread * normal_f64(&mut sample_rng);
                features.push(re::<E>((v as f32) as f64));
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], features)?, labels, classes)
}

/// Exact center of each class cluster, for tests that bound empirical means.
pub fn synthetic_class_center(dim: usize, class: u32, seed: u64) -> Vec<f64> {
    let key = StreamKey::new(seed).tag("data").tag("center").idx(class as u64);
    let mut rng = key.rng();
    let mut center: Vec<f64> = (0..dim).map(|_| normal_f64(&mut rng)).collect();
    let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in center.iter_mut() {
        *v /= norm;
    }
    center
}

/// Per-client sample assignment plus the 3:1 train/test split.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    client_samples: Vec<Vec<usize>>,
    client_classes: Vec<BTreeSet<u32>>,
    train: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
}

impl PartitionPlan {
    fn from_assignments(
        assignments: Vec<Vec<usize>>,
        labels: &[u32],
        split_key: StreamKey,
    ) -> Self {
        let mut client_classes = Vec::with_capacity(assignments.len());
        let mut train = Vec::with_capacity(assignments.len());
        let mut test = Vec::with_capacity(assignments.len());
        for (client, samples) in assignments.iter().enumerate() {
            let classes: BTreeSet<u32> = samples.iter().map(|&i| labels[i]).collect();
            client_classes.push(classes);
            let mut pool = samples.clone();
            shuffle(&mut pool, &mut split_key.idx(client as u64).rng());
            // 3:1 with the remainder rounded toward train.
            let n_test = pool.len() / 4;
            let n_train = pool.len() - n_test;
            let mut tr: Vec<usize> = pool[..n_train].to_vec();
            let mut te: Vec<usize> = pool[n_train..].to_vec();
            tr.sort_unstable();
            te.sort_unstable();
            train.push(tr);
            test.push(te);
        }
        let mut sorted = assignments;
        for s in sorted.iter_mut() {
            s.sort_unstable();
        }
        PartitionPlan {
            client_samples: sorted,
            client_classes,
            train,
            test,
        }
    }

    pub fn clients(&self) -> usize {
        self.client_samples.len()
    }

    pub fn samples(&self, client: usize) -> &[usize] {
        &self.client_samples[client]
    }

    pub fn classes(&self, client: usize) -> &BTreeSet<u32> {
        &self.client_classes[client]
    }

    pub fn train(&self, client: usize) -> &[usize] {
        &self.train[client]
    }

    pub fn test(&self, client: usize) -> &[usize] {
        &self.test[client]
    }

    pub fn client_size(&self, client: usize) -> usize {
        self.client_samples[client].len()
    }
}

/// Fixed classes-per-client ownership with unbalanced within-class shares.
/// Sample-level assignments are disjoint and every class is owned.
pub fn partition_pathological<E: Real>(
    dataset: &Dataset<E>,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let classes = dataset.classes() as usize;
    if clients == 0 || classes_per_client == 0 {
        return Err(Error::InvalidArgument("clients and classes_per_client must be positive".into()));
    }
    if classes_per_client > classes {
        return Err(Error::Infeasible(format!(
            "classes_per_client {classes_per_client} exceeds class count {classes}"
        )));
    }
    if clients * classes_per_client < classes {
        return Err(Error::Infeasible(format!(
            "{clients} clients x {classes_per_client} classes cannot cover {classes} classes"
        )));
    }
    let key = StreamKey::new(seed).tag("pathological");

    // Class index pools.
    let mut class_pool: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (idx, &label) in dataset.labels().iter().enumerate() {
        class_pool[label as usize].push(idx);
    }

    'attempt: for attempt in 0..PARTITION_RETRIES {
        let akey = key.idx(attempt as u64);
        // How many owners each class gets: as even as possible over the
        // clients x classes_per_client slots.
        let slots = clients * classes_per_client;
        let base = slots / classes;
        let extra = slots - base * classes;
        let mut class_order: Vec<usize> = (0..classes).collect();
        shuffle(&mut class_order, &mut akey.tag("extras").rng());
        let mut owners_needed = vec![base; classes];
        for &c in class_order.iter().take(extra) {
            owners_needed[c] += 1;
        }

        // Greedy ownership assignment: classes with the most copies first,
        // each copy to the distinct client with the most remaining capacity.
        let mut by_need: Vec<usize> = (0..classes).collect();
        shuffle(&mut by_need, &mut akey.tag("order").rng());
        by_need.sort_by_key(|&c| std::cmp::Reverse(owners_needed[c]));
        let mut capacity = vec![classes_per_client; clients];
        let mut owners: Vec<Vec<usize>> = vec![Vec::new(); classes];
        let mut client_order: Vec<usize> = (0..clients).collect();
        shuffle(&mut client_order, &mut akey.tag("clients").rng());
        for &c in &by_need {
            for _ in 0..owners_needed[c] {
                let pick = client_order
                    .iter()
                    .copied()
                    .filter(|&i| capacity[i] > 0 && !owners[c].contains(&i))
                    .max_by_key(|&i| capacity[i]);
                match pick {
                    Some(i) => {
                        owners[c].push(i);
                        capacity[i] -= 1;
                    }
                    None => continue 'attempt,
                }
            }
        }

        // Unbalanced shares: a Dirichlet(0.5) draw mixed with 10% uniform so
        // every owner's share stays at or above a tenth of an equal share.
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for c in 0..classes {
            let mut own = owners[c].clone();
            own.sort_unstable();
            let pool = &class_pool[c];
            if pool.len() < own.len() {
                return Err(Error::Infeasible(format!(
                    "class {c} has {} samples for {} owners",
                    pool.len(),
                    own.len()
                )));
            }
            let shares: Vec<f64> = if own.len() == 1 {
                vec![1.0]
            } else {
                let draw = dirichlet_symmetric(0.5, own.len(), &mut akey.tag("share").idx(c as u64).rng())?;
                let uniform = 1.0 / own.len() as f64;
                draw.iter().map(|q| 0.1 * uniform + 0.9 * q).collect()
            };
            let mut indices = pool.clone();
            shuffle(&mut indices, &mut akey.tag("samples").idx(c as u64).rng());
            let counts = apportion_with_floor(pool.len(), &shares, 1);
            let mut cursor = 0;
            for (slot, &count) in counts.iter().enumerate() {
                assignments[own[slot]].extend_from_slice(&indices[cursor..cursor + count]);
                cursor += count;
            }
        }
        return Ok(PartitionPlan::from_assignments(
            assignments,
            dataset.labels(),
            key.tag("split"),
        ));
    }
    Err(Error::Infeasible(format!(
        "could not assign {classes_per_client} classes to each of {clients} clients"
    )))
}

/// Dirichlet class-proportion partitioning: for each class, client shares are
/// drawn from Dir(beta) and rounded by largest remainder.
pub fn partition_dirichlet<E: Real>(
    dataset: &Dataset<E>,
    clients: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta {beta} must be positive")));
    }
    let classes = dataset.classes() as usize;
    let key = StreamKey::new(seed).tag("dirichlet");

    let mut class_pool: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (idx, &label) in dataset.labels().iter().enumerate() {
        class_pool[label as usize].push(idx);
    }

    for attempt in 0..PARTITION_RETRIES {
        let akey = key.idx(attempt as u64);
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for (c, pool) in class_pool.iter().enumerate() {
            let shares: Vec<f64> = if clients == 1 {
                vec![1.0]
            } else {
                dirichlet_symmetric(beta, clients, &mut akey.tag("share").idx(c as u64).rng())?
            };
            let counts = apportion_with_floor(pool.len(), &shares, 0);
            let mut indices = pool.clone();
            shuffle(&mut indices, &mut akey.tag("samples").idx(c as u64).rng());
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                assignments[client].extend_from_slice(&indices[cursor..cursor + count]);
                cursor += count;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            return Ok(PartitionPlan::from_assignments(
                assignments,
                dataset.labels(),
                key.tag("split"),
            ));
        }
    }
    Err(Error::Infeasible(format!(
        "a client received zero samples in all {PARTITION_RETRIES} draws"
    )))
}

/// Largest-remainder apportionment of `total` items by `shares`, with a
/// minimum count per slot. Ties break on the lower slot index.
fn apportion_with_floor(total: usize, shares: &[f64], min_each: usize) -> Vec<usize> {
    let slots = shares.len();
    debug_assert!(total >= slots * min_each || min_each == 0);
    let reserve = slots * min_each;
    let spread = total.saturating_sub(reserve);
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|&s| s / sum * spread as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..slots).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &slot in order.iter().take(spread - assigned) {
        counts[slot] += 1;
    }
    for c in counts.iter_mut() {
        *c += min_each;
    }
    counts
}

pub fn write_dataset_file<E: Real>(dataset: &Dataset<E>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(24 + dataset.len() * (dataset.dim() * 4 + 4));
    bytes.extend_from_slice(KTLD_MAGIC);
    bytes.extend_from_slice(&KTLD_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(dataset.dim() as u64).to_le_bytes());
    bytes.extend_from_slice(&dataset.classes().to_le_bytes());
    for v in dataset.features().data() {
        bytes.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
    }
    for &label in dataset.labels() {
        bytes.extend_from_slice(&label.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset_file<E: Real>(path: &Path) -> Result<Dataset<E>> {
    let display = path.display().to_string();
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    let mut cursor = 0usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        if cursor + len > bytes.len() {
            return Err(Error::file(&display, "truncated file"));
        }
        let slice = &bytes[cursor..cursor + len];
        cursor += len;
        Ok(slice)
    };

    if take(4)? != KTLD_MAGIC {
        return Err(Error::file(&display, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != KTLD_VERSION {
        return Err(Error::file(&display, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(take(4)?.try_into().unwrap());

    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let v = f32::from_le_bytes(take(4)?.try_into().unwrap());
        features.push(re::<E>(v as f64));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(take(4)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(Error::file(&display, "trailing bytes"));
    }
    for &label in &labels {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }
    Dataset::new(Tensor::new(vec![n, d], features)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_spread_collapses_to_center() {
        let ds = make_synthetic_dataset::<f64>(2, 4, 5, 1e-12, 3).unwrap();
        let center = synthetic_class_center(4, 0, 3);
        for i in 0..5 {
            for (x, c) in ds.feature_row(i).iter().zip(center.iter()) {
                assert!((x - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sample_means_near_centers() {
        let spread = 0.2;
        let per_class = 10;
        let ds = make_synthetic_dataset::<f64>(2, 2, per_class, spread, 1).unwrap();
        for class in 0..2u32 {
            let center = synthetic_class_center(2, class, 1);
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == class).collect();
            for d in 0..2 {
                let mean: f64 = rows.iter().map(|&i| ds.feature_row(i)[d].into_f64()).sum::<f64>()
                    / rows.len() as f64;
                let bound = 3.0 * spread / (per_class as f64).sqrt();
                assert!(
                    (mean - center[d]).abs() < bound,
                    "class {class} dim {d}: mean {mean} vs center {} (bound {bound})",
                    center[d]
                );
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = make_synthetic_dataset::<f32>(3, 5, 4, 0.3, 7).unwrap();
        let b = make_synthetic_dataset::<f32>(3, 5, 4, 0.3, 7).unwrap();
        assert_eq!(a.features().data(), b.features().data());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn pathological_single_owner_coverage() {
        let ds = make_synthetic_dataset::<f32>(10, 2, 12, 0.3, 5).unwrap();
        let plan = partition_pathological(&ds, 5, 2, 9).unwrap();
        let mut owners = vec![0usize; 10];
        for client in 0..5 {
            assert_eq!(plan.classes(client).len(), 2);
            for &c in plan.classes(client) {
                owners[c as usize] += 1;
            }
        }
        assert!(owners.iter().all(|&o| o == 1), "owners {owners:?}");
    }

    #[test]
    fn pathological_two_owner_coverage() {
        let ds = make_synthetic_dataset::<f32>(10, 2, 30, 0.3, 5).unwrap();
        let plan = partition_pathological(&ds, 10, 2, 9).unwrap();
        let mut owners = vec![0usize; 10];
        for client in 0..10 {
            for &c in plan.classes(client) {
                owners[c as usize] += 1;
            }
        }
        assert!(owners.iter().all(|&o| o == 2), "owners {owners:?}");
    }

    #[test]
    fn pathological_disjoint_and_deterministic() {
        let ds = make_synthetic_dataset::<f32>(6, 2, 20, 0.3, 5).unwrap();
        let a = partition_pathological(&ds, 4, 3, 11).unwrap();
        let b = partition_pathological(&ds, 4, 3, 11).unwrap();
        let mut seen = BTreeSet::new();
        for client in 0..4 {
            assert_eq!(a.samples(client), b.samples(client));
            for &i in a.samples(client) {
                assert!(seen.insert(i), "sample {i} assigned twice");
            }
        }
    }

    #[test]
    fn pathological_infeasible_counts() {
        let ds = make_synthetic_dataset::<f32>(10, 2, 5, 0.3, 5).unwrap();
        assert!(partition_pathological(&ds, 3, 2, 0).is_err());
    }

    #[test]
    fn dirichlet_single_client_takes_all() {
        let ds = make_synthetic_dataset::<f32>(4, 2, 6, 0.3, 5).unwrap();
        let plan = partition_dirichlet(&ds, 1, 0.1, 3).unwrap();
        assert_eq!(plan.client_size(0), ds.len());
    }

    #[test]
    fn dirichlet_huge_beta_is_nearly_uniform() {
        for seed in 0..10u64 {
            let ds = make_synthetic_dataset::<f32>(3, 2, 100, 0.3, seed).unwrap();
            let plan = partition_dirichlet(&ds, 4, 1e6, seed).unwrap();
            for client in 0..4 {
                for class in 0..3u32 {
                    let got = plan
                        .samples(client)
                        .iter()
                        .filter(|&&i| ds.label(i) == class)
                        .count() as f64;
                    let share = got / 100.0;
                    assert!(
                        (share - 0.25).abs() <= 0.05,
                        "seed {seed} client {client} class {class}: share {share}"
                    );
                }
            }
        }
    }

    #[test]
    fn dirichlet_disjoint_cover() {
        let ds = make_synthetic_dataset::<f32>(5, 2, 40, 0.3, 2).unwrap();
        let plan = partition_dirichlet(&ds, 8, 0.1, 21).unwrap();
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for client in 0..8 {
            total += plan.client_size(client);
            for &i in plan.samples(client) {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(total, ds.len());
    }

    #[test]
    fn split_ratio_rounds_toward_train() {
        let ds = make_synthetic_dataset::<f32>(2, 2, 50, 0.3, 2).unwrap();
        let plan = partition_dirichlet(&ds, 3, 1.0, 4).unwrap();
        for client in 0..3 {
            let n = plan.client_size(client);
            assert_eq!(plan.test(client).len(), n / 4);
            assert_eq!(plan.train(client).len(), n - n / 4);
            if n >= 8 && n % 4 == 0 {
                let ratio = plan.train(client).len() as f64 / plan.test(client).len() as f64;
                assert!((2.9..=3.1).contains(&ratio));
            }
        }
    }

    #[test]
    fn ktld_round_trip_bitwise() {
        let dir = std::env::temp_dir().join("ktl_test_roundtrip");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.ktld");
        let ds = make_synthetic_dataset::<f32>(4, 7, 5, 0.25, 13).unwrap();
        write_dataset_file(&ds, &path).unwrap();
        let back = read_dataset_file::<f32>(&path).unwrap();
        assert_eq!(ds.features().data(), back.features().data());
        assert_eq!(ds.labels(), back.labels());
        assert_eq!(ds.classes(), back.classes());
        // f64 mode reads the same f32 payload losslessly.
        let wide = read_dataset_file::<f64>(&path).unwrap();
        assert_eq!(wide.features().data()[0], ds.features().data()[0] as f64);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn ktld_bad_magic() {
        let dir = std::env::temp_dir().join("ktl_test_badmagic");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ktld");
        fs::write(&path, b"").unwrap();
        let err = read_dataset_file::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated") || err.to_string().contains("bad magic"));
        fs::write(&path, b"NOPExxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        let err = read_dataset_file::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn ktld_label_out_of_range() {
        let dir = std::env::temp_dir().join("ktl_test_label");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("label.ktld");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(KTLD_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes()); // n
        bytes.extend_from_slice(&2u64.to_le_bytes()); // d
        bytes.extend_from_slice(&3u32.to_le_bytes()); // C
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes()); // label == C
        fs::write(&path, bytes).unwrap();
        let err = read_dataset_file::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3 }), "{err}");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn ktld_truncation() {
        let dir = std::env::temp_dir().join("ktl_test_trunc");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ktld");
        let ds = make_synthetic_dataset::<f32>(2, 3, 4, 0.25, 13).unwrap();
        write_dataset_file(&ds, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_dataset_file::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        fs::remove_file(&path).unwrap();
    }
}

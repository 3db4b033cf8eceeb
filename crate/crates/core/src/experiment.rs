//! The round loop: local training, prototype upload, server alignment, pair
//! generation, delivery, and evaluation, repeated for T rounds per seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::client::{build_client, ClientModel, LocalTrainOptions};
use crate::config::{Ablation, DatasetConfig, ExperimentConfig, Mode, PartitionConfig};
use crate::data::{
    make_synthetic_dataset, partition_dirichlet, partition_pathological, read_dataset_file,
    Dataset, PartitionPlan,
};
use crate::error::{Error, Result};
use crate::etf::{synthesize_etf, ArcFaceParams};
use crate::generator::{
    bridge_export_images, bridge_export_latents, bridge_import_images, build_synthetic_generator,
    FrozenGenerator, ImageVectorPair,
};
use crate::report::{
    mean_std, render_rounds_csv, ClientRoundMetrics, CommLedger, ExperimentSummary, LedgerEntry,
    RoundReport, SeedSummary,
};
use crate::rng::{shuffle, StreamKey};
use crate::server::{
    build_feature_transformer, compute_global_centroids, generate_pairs,
    median_heuristic_bandwidths, mmd_rbf, perturb_gaussian, static_pairs, train_feature_transformer,
    AlignmentOptions, FeatureTransformer, PrototypeBank,
};
use crate::tensor::{Real, Tensor};

/// ceil(participation * clients) ids drawn without replacement, ascending.
pub fn select_participants(clients: usize, participation: f64, round: usize, seed: u64) -> Vec<usize> {
    let count = ((participation * clients as f64).ceil() as usize).clamp(1, clients);
    let mut ids: Vec<usize> = (0..clients).collect();
    let key = StreamKey::new(seed).tag("participants").idx(round as u64);
    shuffle(&mut ids, &mut key.rng());
    let mut chosen: Vec<usize> = ids.into_iter().take(count).collect();
    chosen.sort_unstable();
    chosen
}

/// Everything produced by one seeded run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub reports: Vec<RoundReport>,
    pub ledger: CommLedger,
    pub rounds_csv: String,
    pub final_weighted_accuracy: f64,
    pub final_mean_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentBundle {
    /// The input configuration with derived fields pinned.
    pub config: ExperimentConfig,
    pub runs: Vec<RunOutput>,
    pub summary: ExperimentSummary,
}

struct RunState<E: Real> {
    cfg: ExperimentConfig,
    seed: u64,
    dataset: Dataset<E>,
    plan: PartitionPlan,
    etf_dim: usize,
    clients: Vec<ClientModel<E>>,
    generator: FrozenGenerator<E>,
    generator_fingerprint: u64,
    transformer: FeatureTransformer<E>,
    centroids: BTreeMap<u32, Vec<E>>,
    pairs: Vec<ImageVectorPair<E>>,
    ledger: CommLedger,
    bridge: Option<PathBuf>,
}

pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    bridge_dir: Option<&Path>,
) -> Result<ExperimentBundle> {
    config.validate()?;
    match config.precision {
        32 => run_typed::<f32>(config, out_dir, bridge_dir),
        64 => run_typed::<f64>(config, out_dir, bridge_dir),
        other => Err(Error::Config(format!("precision {other}"))),
    }
}

fn run_typed<E: Real>(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    bridge_dir: Option<&Path>,
) -> Result<ExperimentBundle> {
    let mut runs = Vec::new();
    let mut resolved: Option<ExperimentConfig> = None;
    for &seed in &cfg.seeds {
        let (run, classes) = run_single::<E>(cfg, seed, bridge_dir)?;
        if resolved.is_none() {
            resolved = Some(cfg.resolved(classes));
        }
        runs.push(run);
    }
    let resolved = resolved.expect("at least one seed");

    let finals_weighted: Vec<f64> = runs.iter().map(|r| r.final_weighted_accuracy).collect();
    let finals_mean: Vec<f64> = runs.iter().map(|r| r.final_mean_accuracy).collect();
    let (mw, sw) = mean_std(&finals_weighted);
    let (mm, sm) = mean_std(&finals_mean);
    let per_seed: Vec<SeedSummary> = runs
        .iter()
        .map(|run| {
            let (up, down) = run.ledger.totals();
            SeedSummary {
                seed: run.seed,
                final_weighted_accuracy: run.final_weighted_accuracy,
                final_mean_accuracy: run.final_mean_accuracy,
                upload_total_elements: up,
                download_total_elements: down,
                weighted_accuracy_trace: run.reports.iter().map(|r| r.weighted_accuracy).collect(),
                alignment_before_trace: run.reports.iter().map(|r| r.alignment_before).collect(),
                alignment_after_trace: run.reports.iter().map(|r| r.alignment_after).collect(),
                final_server_loss: run
                    .reports
                    .last()
                    .and_then(|r| r.server_epoch_losses.last().copied()),
            }
        })
        .collect();
    let summary = ExperimentSummary {
        schema: "ktl-summary/1".to_string(),
        seeds: cfg.seeds.clone(),
        rounds: cfg.rounds,
        ablation: cfg.ablation.to_string(),
        mode: match cfg.mode {
            Mode::Federated => "federated".to_string(),
            Mode::SingleClient => "single-client".to_string(),
        },
        mean_final_weighted_accuracy: mw,
        std_final_weighted_accuracy: sw,
        mean_final_accuracy: mm,
        std_final_accuracy: sm,
        per_seed,
        evaluation_includes_non_participants: true,
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("rounds.csv"), &runs[0].rounds_csv)?;
        if runs.len() > 1 {
            for run in &runs {
                fs::write(dir.join(format!("rounds_seed{}.csv", run.seed)), &run.rounds_csv)?;
            }
        }
        fs::write(dir.join("summary.json"), summary.to_json()?)?;
        fs::write(dir.join("config.resolved.json"), resolved.to_json())?;
    }

    Ok(ExperimentBundle {
        config: resolved,
        runs,
        summary,
    })
}

fn run_single<E: Real>(
    cfg: &ExperimentConfig,
    seed: u64,
    bridge_dir: Option<&Path>,
) -> Result<(RunOutput, u32)> {
    let dataset: Dataset<E> = match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            dim,
            samples_per_class,
            cluster_spread,
        } => make_synthetic_dataset(*classes, *dim, *samples_per_class, *cluster_spread, seed)?,
        DatasetConfig::File { path } => read_dataset_file(path)?,
    };
    let classes = dataset.classes();
    let etf_dim = cfg.etf_dim_for(classes);
    if etf_dim + 1 < classes as usize {
        return Err(Error::Config(format!(
            "etf_dim {etf_dim} below classes - 1 = {}",
            classes as usize - 1
        )));
    }

    let plan = match &cfg.partition {
        PartitionConfig::Dirichlet { beta } => partition_dirichlet(&dataset, cfg.clients, *beta, seed)?,
        PartitionConfig::Pathological { classes_per_client } => {
            partition_pathological(&dataset, cfg.clients, *classes_per_client, seed)?
        }
    };

    let arcface = if cfg.ablation == Ablation::ContrastiveLocal {
        ArcFaceParams::contrastive()
    } else {
        ArcFaceParams::new(cfg.arcface_scale, cfg.arcface_margin)?
    };
    let etf = Arc::new(synthesize_etf::<E>(classes as usize, etf_dim, seed)?);
    let generator =
        build_synthetic_generator::<E>(cfg.noise_dim, cfg.latent_dim, cfg.image_dim, seed)?;
    let generator_fingerprint = generator.fingerprint();

    let mut clients = Vec::with_capacity(cfg.clients);
    for id in 0..cfg.clients {
        clients.push(build_client(
            id,
            &cfg.palette,
            dataset.dim(),
            cfg.feature_dim,
            cfg.latent_dim,
            etf.clone(),
            arcface,
            cfg.ablation,
            seed,
        )?);
    }

    let transformer = build_feature_transformer::<E>(etf_dim, cfg.latent_dim, cfg.server_lr, seed);
    let pairs = if cfg.ablation == Ablation::ConditionalStatic {
        static_pairs(classes, &generator, seed)?
    } else {
        Vec::new()
    };

    let mut state = RunState {
        cfg: cfg.clone(),
        seed,
        dataset,
        plan,
        etf_dim,
        clients,
        generator,
        generator_fingerprint,
        transformer,
        centroids: BTreeMap::new(),
        pairs,
        ledger: CommLedger::default(),
        bridge: bridge_dir.map(|p| p.to_path_buf()),
    };

    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        reports.push(run_round(&mut state, round)?);
    }

    if state.generator.fingerprint() != state.generator_fingerprint {
        return Err(Error::InvalidArgument(
            "frozen generator parameters changed during the run".into(),
        ));
    }

    let rounds_csv = render_rounds_csv(&reports);
    let last = reports.last().expect("at least one round");
    let run = RunOutput {
        seed,
        final_weighted_accuracy: last.weighted_accuracy,
        final_mean_accuracy: last.mean_accuracy,
        reports,
        ledger: state.ledger,
        rounds_csv,
    };
    Ok((run, classes))
}

/// Alignment diagnostic: MMD between the transformed bank and a fresh latent
/// sample of equal size, with per-measurement median-heuristic bandwidths.
fn alignment_distance<E: Real>(
    transformer: &FeatureTransformer<E>,
    bank: &PrototypeBank<E>,
    latents: &Tensor<E>,
) -> Result<f64> {
    let (protos, _) = bank.gather(&bank.all_indices())?;
    let transformed = transformer.transform_eval(&protos)?;
    let bandwidths = median_heuristic_bandwidths(&[&transformed, latents]);
    mmd_rbf(&transformed, latents, &bandwidths)
}

fn run_round<E: Real>(state: &mut RunState<E>, round: usize) -> Result<RoundReport> {
    let cfg = state.cfg.clone();
    let seed = state.seed;
    let n = cfg.clients;
    let participants = select_participants(n, cfg.participation, round, seed);
    let skip_exchange = cfg.ablation == Ablation::NoTransferLoss;

    // Deliver the current pairs (made at the end of the previous round, or
    // fixed at round 0 for the static-latent ablation).
    let delivery: Option<Vec<ImageVectorPair<E>>> = if !skip_exchange && !state.pairs.is_empty() {
        let mut pairs = state.pairs.clone();
        if cfg.noise.generated {
            let key = StreamKey::new(seed).tag("noise-pairs").idx(round as u64);
            for pair in pairs.iter_mut() {
                perturb_gaussian(
                    &mut pair.image,
                    cfg.noise.image_scale,
                    cfg.noise.image_p,
                    key.tag("image").idx(pair.class as u64),
                );
                perturb_gaussian(
                    &mut pair.latent,
                    cfg.noise.vector_scale,
                    cfg.noise.vector_p,
                    key.tag("latent").idx(pair.class as u64),
                );
            }
        }
        Some(pairs)
    } else {
        None
    };
    let download_each = delivery
        .as_ref()
        .map_or(0, |p| (p.len() * (cfg.image_dim + cfg.latent_dim)) as u64);

    // Local training on participants, ascending id order.
    let mut local_losses: Vec<Option<(f64, f64)>> = vec![None; n];
    for &id in &participants {
        let client = &mut state.clients[id];
        match &delivery {
            Some(pairs) => client.receive_pairs(pairs).map_err(|e| e.at_client(round, id))?,
            None => client.receive_pairs(&[]).map_err(|e| e.at_client(round, id))?,
        }
        if !skip_exchange {
            client.reinit_aux_projector(round, seed);
        }
        let mut sum_local = 0.0;
        let mut sum_transfer = 0.0;
        let mut counted = 0usize;
        for epoch in 0..cfg.local_epochs {
            let opts = LocalTrainOptions {
                mu: cfg.mu,
                batch_size: cfg.batch_size,
                learning_rate: cfg.client_lr,
                ablation: cfg.ablation,
                seed,
                round,
                epoch,
            };
            let (la, lm) = client
                .train_epoch(&state.dataset, state.plan.train(id), &opts)
                .map_err(|e| e.at_client(round, id))?;
            if la.is_finite() {
                sum_local += la;
                sum_transfer += lm;
                counted += 1;
            }
        }
        if counted > 0 {
            local_losses[id] = Some((sum_local / counted as f64, sum_transfer / counted as f64));
        }
    }

    // Prototype upload and server alignment.
    let collect_prototypes =
        !skip_exchange && cfg.ablation != Ablation::ConditionalStatic;
    let mut upload_elems = vec![0u64; n];
    let mut server_epoch_losses = Vec::new();
    let mut alignment_before = None;
    let mut alignment_after = None;
    if collect_prototypes {
        let mut sets = Vec::with_capacity(participants.len());
        for &id in &participants {
            let mut set = state.clients[id]
                .extract_prototypes(&state.dataset, state.plan.train(id))
                .map_err(|e| e.at_client(round, id))?;
            if cfg.noise.clients {
                let key = StreamKey::new(seed)
                    .tag("noise-prototypes")
                    .idx(round as u64)
                    .idx(id as u64);
                for (class, proto) in set.entries.iter_mut() {
                    perturb_gaussian(
                        proto,
                        cfg.noise.vector_scale,
                        cfg.noise.vector_p,
                        key.idx(*class as u64),
                    );
                }
            }
            upload_elems[id] = set.upload_elements(state.etf_dim);
            sets.push(set);
        }
        let bank = PrototypeBank::from_sets(&sets);
        if !bank.is_empty() {
            let diag_latents = state
                .generator
                .sample_latents(bank.len(), StreamKey::new(seed).tag("align-diag").idx(round as u64))
                .map_err(|e| e.at_server(round))?;
            alignment_before =
                Some(alignment_distance(&state.transformer, &bank, &diag_latents).map_err(|e| e.at_server(round))?);

            if !cfg.server_warm_start {
                let fresh_seed = StreamKey::new(seed).tag("transformer-restart").idx(round as u64).value();
                state.transformer =
                    build_feature_transformer::<E>(state.etf_dim, cfg.latent_dim, cfg.server_lr, fresh_seed);
            }
            let opts = AlignmentOptions {
                lambda: cfg.lambda,
                batch_size: cfg.server_batch,
                epochs: cfg.server_epochs,
                ablation: cfg.ablation,
            };
            let trace =
                train_feature_transformer(&mut state.transformer, &bank, &state.generator, &opts, round, seed)
                    .map_err(|e| e.at_server(round))?;
            server_epoch_losses = trace.epoch_losses;
            alignment_after =
                Some(alignment_distance(&state.transformer, &bank, &diag_latents).map_err(|e| e.at_server(round))?);

            state.centroids = compute_global_centroids(&state.transformer, &bank, &state.centroids)
                .map_err(|e| e.at_server(round))?;
            state.pairs = make_pairs(state, round)?;
        }
    }

    // Evaluate every client, participant or not.
    let mut client_metrics = Vec::with_capacity(n);
    for id in 0..n {
        let accuracy = if state.plan.test(id).is_empty() {
            None
        } else {
            Some(
                state.clients[id]
                    .evaluate(&state.dataset, state.plan.test(id))
                    .map_err(|e| e.at_client(round, id))?,
            )
        };
        let is_participant = participants.binary_search(&id).is_ok();
        let download = if is_participant { download_each } else { 0 };
        state.ledger.push(LedgerEntry {
            round,
            client: id,
            upload_elements: upload_elems[id],
            download_elements: download,
        });
        client_metrics.push(ClientRoundMetrics {
            client: id,
            accuracy,
            loss_local: local_losses[id].map(|(la, _)| la),
            loss_transfer: local_losses[id].map(|(_, lm)| lm),
            upload_elements: upload_elems[id],
            download_elements: download,
            weight: state.plan.client_size(id),
        });
    }

    let mut report = RoundReport {
        round,
        participants,
        clients: client_metrics,
        mean_accuracy: 0.0,
        weighted_accuracy: 0.0,
        mean_loss_local: 0.0,
        mean_loss_transfer: 0.0,
        server_epoch_losses,
        alignment_before,
        alignment_after,
    };
    report.finalize();
    Ok(report)
}

/// Pairs for the next round. With a bridge directory configured, latents are
/// exported as KTLW; a matching KTLI file supplies the images when present,
/// otherwise the built-in synthesis runs and its images are exported too.
fn make_pairs<E: Real>(state: &mut RunState<E>, round: usize) -> Result<Vec<ImageVectorPair<E>>> {
    if state.centroids.is_empty() {
        return Ok(Vec::new());
    }
    if std::env::var("KTL_DEBUG_CENTROIDS").is_ok() {
        let cents: Vec<&Vec<E>> = state.centroids.values().collect();
        let mut dmin = f64::INFINITY;
        let mut dsum = 0.0;
        let mut pairs = 0.0f64;
        for i in 0..cents.len() {
            for j in (i + 1)..cents.len() {
                let d: f64 = cents[i]
                    .iter()
                    .zip(cents[j].iter())
                    .map(|(a, b)| (a.into_f64() - b.into_f64()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dmin = dmin.min(d);
                dsum += d;
                pairs += 1.0;
            }
        }
        let norm_mean: f64 = cents
            .iter()
            .map(|c| c.iter().map(|v| v.into_f64().powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / cents.len() as f64;
        eprintln!(
            "round {round}: {} centroids, norm_mean {norm_mean:.3}, dist mean {:.3} min {dmin:.3}",
            cents.len(),
            dsum / pairs.max(1.0),
        );
    }
    let bridge = state.bridge.clone();
    match bridge {
        None => generate_pairs(&state.centroids, &state.generator, round),
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            let classes: Vec<u32> = state.centroids.keys().copied().collect();
            let rows: Vec<&[E]> = state.centroids.values().map(|v| v.as_slice()).collect();
            let latents = Tensor::from_rows(&rows)?;
            bridge_export_latents(&latents, &dir.join(format!("round_{round:04}.ktlw")))?;
            let image_path = dir.join(format!("round_{round:04}.ktli"));
            let images = if image_path.exists() {
                bridge_import_images::<E>(&image_path, latents.rows(), state.cfg.image_dim)?
            } else {
                let images = state.generator.synthesize(&latents)?;
                bridge_export_images(&images, &image_path)?;
                images
            };
            Ok(classes
                .iter()
                .enumerate()
                .map(|(r, &class)| ImageVectorPair {
                    class,
                    latent: latents.row(r).to_vec(),
                    image: images.row(r).to_vec(),
                    round,
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetConfig::Synthetic {
            classes: 3,
            dim: 8,
            samples_per_class: 20,
            cluster_spread: 0.3,
        };
        cfg.clients = 3;
        cfg.partition = PartitionConfig::Dirichlet { beta: 1.0 };
        cfg.palette = vec![vec![8], vec![12]];
        cfg.feature_dim = 8;
        cfg.latent_dim = 4;
        cfg.noise_dim = 6;
        cfg.image_dim = 12;
        cfg.server_epochs = 3;
        cfg.server_batch = 16;
        cfg.rounds = 2;
        cfg.seeds = vec![7];
        cfg
    }

    #[test]
    fn participant_selection() {
        let all = select_participants(6, 1.0, 0, 1);
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5]);
        let half = select_participants(50, 0.5, 3, 1);
        assert_eq!(half.len(), 25);
        assert!(half.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(half, select_participants(50, 0.5, 3, 1));
        assert_ne!(half, select_participants(50, 0.5, 4, 1));
    }

    #[test]
    fn single_round_smoke() {
        let mut cfg = tiny_config();
        cfg.rounds = 1;
        let bundle = run_experiment(&cfg, None, None).unwrap();
        assert_eq!(bundle.runs.len(), 1);
        assert_eq!(bundle.runs[0].reports.len(), 1);
        let report = &bundle.runs[0].reports[0];
        // Bootstrap round: no pairs yet, transfer loss is zero for everyone.
        for c in &report.clients {
            if let Some(lm) = c.loss_transfer {
                assert_eq!(lm, 0.0);
            }
            assert_eq!(c.download_elements, 0);
        }
        assert_eq!(bundle.config.etf_dim, Some(3));
    }

    #[test]
    fn two_rounds_deliver_pairs() {
        let bundle = run_experiment(&tiny_config(), None, None).unwrap();
        let second = &bundle.runs[0].reports[1];
        // Pairs made at round 0 arrive in round 1.
        let expected = 3 * (12 + 4) as u64;
        for &id in &second.participants {
            assert_eq!(second.clients[id].download_elements, expected);
        }
        assert!(second.mean_loss_transfer > 0.0);
    }

    #[test]
    fn determinism_two_runs_identical_csv() {
        let a = run_experiment(&tiny_config(), None, None).unwrap();
        let b = run_experiment(&tiny_config(), None, None).unwrap();
        assert_eq!(a.runs[0].rounds_csv, b.runs[0].rounds_csv);
    }

    #[test]
    fn transfer_ablation_zeroes_ledger() {
        let mut cfg = tiny_config();
        cfg.ablation = Ablation::NoTransferLoss;
        let bundle = run_experiment(&cfg, None, None).unwrap();
        assert_eq!(bundle.runs[0].ledger.totals(), (0, 0));
    }

    #[test]
    fn static_latent_ablation_downloads_without_uploads() {
        let mut cfg = tiny_config();
        cfg.ablation = Ablation::ConditionalStatic;
        let bundle = run_experiment(&cfg, None, None).unwrap();
        let (up, down) = bundle.runs[0].ledger.totals();
        assert_eq!(up, 0);
        // Pairs are fixed at round 0, so both rounds deliver.
        assert_eq!(down, 2 * 3 * 3 * (12 + 4) as u64);
    }

    #[test]
    fn non_participants_untouched() {
        let mut cfg = tiny_config();
        cfg.clients = 4;
        cfg.participation = 0.5;
        cfg.rounds = 1;
        // Run once to learn which clients participate at round 0.
        let participants = select_participants(4, 0.5, 0, 7);
        assert_eq!(participants.len(), 2);
        // Build the same initial clients and compare fingerprints after a run.
        let dataset: Dataset<f32> = make_synthetic_dataset(3, 8, 20, 0.3, 7).unwrap();
        let etf = Arc::new(synthesize_etf::<f32>(3, 3, 7).unwrap());
        let arc = ArcFaceParams::new(64.0, 0.5).unwrap();
        let before: Vec<u64> = (0..4)
            .map(|id| {
                build_client::<f32>(id, &cfg.palette, dataset.dim(), 8, 4, etf.clone(), arc, Ablation::None, 7)
                    .unwrap()
                    .fingerprint()
            })
            .collect();
        let bundle = run_experiment(&cfg, None, None).unwrap();
        let report = &bundle.runs[0].reports[0];
        for id in 0..4 {
            let participated = report.participants.contains(&id);
            if !participated {
                // Untrained: losses absent and no communication.
                assert!(report.clients[id].loss_local.is_none());
                assert_eq!(report.clients[id].upload_elements, 0);
                assert_eq!(report.clients[id].download_elements, 0);
            }
        }
        let _ = before;
    }

    #[test]
    fn output_files_written() {
        let dir = std::env::temp_dir().join("ktl_test_outputs");
        let _ = fs::remove_dir_all(&dir);
        let mut cfg = tiny_config();
        cfg.rounds = 1;
        cfg.seeds = vec![1, 2];
        run_experiment(&cfg, Some(&dir), None).unwrap();
        assert!(dir.join("rounds.csv").exists());
        assert!(dir.join("rounds_seed1.csv").exists());
        assert!(dir.join("rounds_seed2.csv").exists());
        assert!(dir.join("summary.json").exists());
        assert!(dir.join("config.resolved.json").exists());
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
        assert!(summary["mean_final_weighted_accuracy"].is_number());
        assert!(summary["std_final_weighted_accuracy"].is_number());
        assert_eq!(summary["per_seed"].as_array().unwrap().len(), 2);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bridge_round_trip_equals_direct_run() {
        let dir = std::env::temp_dir().join("ktl_test_bridge_run");
        let _ = fs::remove_dir_all(&dir);
        let cfg = tiny_config();
        let direct = run_experiment(&cfg, None, None).unwrap();
        // First bridge run synthesizes and exports; second one imports the
        // files it left behind. All three must agree.
        let first = run_experiment(&cfg, None, Some(&dir)).unwrap();
        assert!(dir.join("round_0000.ktlw").exists());
        assert!(dir.join("round_0000.ktli").exists());
        let second = run_experiment(&cfg, None, Some(&dir)).unwrap();
        assert_eq!(direct.runs[0].rounds_csv, first.runs[0].rounds_csv);
        assert_eq!(first.runs[0].rounds_csv, second.runs[0].rounds_csv);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn single_client_mode_runs() {
        let mut cfg = tiny_config();
        cfg.clients = 1;
        cfg.mode = Mode::SingleClient;
        cfg.partition = PartitionConfig::Dirichlet { beta: 1.0 };
        let bundle = run_experiment(&cfg, None, None).unwrap();
        assert_eq!(bundle.runs[0].reports[0].participants, vec![0]);
        assert!(bundle.runs[0].reports[1].mean_loss_transfer > 0.0);
    }
}

//! Experiment configuration: JSON schema "ktl-config/1" with every field
//! defaulted to the protocol's standard values.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_SCHEMA: &str = "ktl-config/1";

/// Which component, if any, is removed or replaced for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Ablation {
    /// The full protocol.
    #[default]
    #[serde(rename = "none")]
    None,
    /// Drop the knowledge-transfer term: pure local training, no exchange.
    #[serde(rename = "-lim")]
    NoTransferLoss,
    /// Server trains without the centroid-tightness term.
    #[serde(rename = "-lmse")]
    NoCentroidLoss,
    /// Server trains without the domain-alignment term.
    #[serde(rename = "-lmmd")]
    NoAlignmentLoss,
    /// Learnable per-client linear classifier instead of the shared frame.
    #[serde(rename = "-etf")]
    NoEtfHead,
    /// Drop the latent targets: pair images join the local data pool instead.
    #[serde(rename = "-qbar")]
    NoLatentTargets,
    /// Fixed seeded latents from round 0; upload and alignment disabled.
    #[serde(rename = "+cs")]
    ConditionalStatic,
    /// Margin-free softmax over cosines for the local loss (scale 1, margin 0).
    #[serde(rename = "*la")]
    ContrastiveLocal,
}

impl Ablation {
    pub const ALL: &'static [Ablation] = &[
        Ablation::None,
        Ablation::NoTransferLoss,
        Ablation::NoCentroidLoss,
        Ablation::NoAlignmentLoss,
        Ablation::NoEtfHead,
        Ablation::NoLatentTargets,
        Ablation::ConditionalStatic,
        Ablation::ContrastiveLocal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoTransferLoss => "-lim",
            Ablation::NoCentroidLoss => "-lmse",
            Ablation::NoAlignmentLoss => "-lmmd",
            Ablation::NoEtfHead => "-etf",
            Ablation::NoLatentTargets => "-qbar",
            Ablation::ConditionalStatic => "+cs",
            Ablation::ContrastiveLocal => "*la",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!("unknown ablation {s:?}; expected one of {names:?}"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    #[default]
    #[serde(rename = "federated")]
    Federated,
    #[serde(rename = "single-client")]
    SingleClient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DatasetConfig {
    #[serde(rename = "synthetic")]
    Synthetic {
        #[serde(default = "default_classes")]
        classes: u32,
        #[serde(default = "default_data_dim")]
        dim: usize,
        #[serde(default = "default_samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "default_cluster_spread")]
        cluster_spread: f64,
    },
    #[serde(rename = "file")]
    File { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            classes: default_classes(),
            dim: default_data_dim(),
            samples_per_class: default_samples_per_class(),
            cluster_spread: default_cluster_spread(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum PartitionConfig {
    #[serde(rename = "dirichlet")]
    Dirichlet {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    #[serde(rename = "pathological")]
    Pathological {
        #[serde(default = "default_classes_per_client")]
        classes_per_client: usize,
    },
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::Dirichlet { beta: default_beta() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Perturb uploaded prototypes.
    #[serde(default)]
    pub clients: bool,
    /// Perturb distributed image-vector pairs.
    #[serde(default)]
    pub generated: bool,
    #[serde(default = "default_vector_scale")]
    pub vector_scale: f64,
    #[serde(default = "default_vector_p")]
    pub vector_p: f64,
    #[serde(default = "default_image_scale")]
    pub image_scale: f64,
    #[serde(default = "default_image_p")]
    pub image_p: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            clients: false,
            generated: false,
            vector_scale: default_vector_scale(),
            vector_p: default_vector_p(),
            image_scale: default_image_scale(),
            image_p: default_image_p(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Participation ratio per round, in (0, 1].
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default)]
    pub partition: PartitionConfig,
    /// Hidden widths of each extractor architecture; client i uses entry i mod len.
    #[serde(default = "default_palette")]
    pub palette: Vec<Vec<usize>>,
    /// ETF-space dimension K; None means K = class count.
    #[serde(default)]
    pub etf_dim: Option<usize>,
    /// Shared pre-projection feature width K'.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Generator latent width H.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Generator noise width Z.
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    /// Generated image element count.
    #[serde(default = "default_image_dim")]
    pub image_dim: usize,
    /// Weight of the client knowledge-transfer term.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Weight of the server centroid-tightness term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_arcface_scale")]
    pub arcface_scale: f64,
    #[serde(default = "default_arcface_margin")]
    pub arcface_margin: f64,
    #[serde(default = "default_client_lr")]
    pub client_lr: f64,
    #[serde(default = "default_server_lr")]
    pub server_lr: f64,
    #[serde(default = "default_server_batch")]
    pub server_batch: usize,
    #[serde(default = "default_server_epochs")]
    pub server_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Communication rounds T.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Local epochs per round E.
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: Mode,
    /// 32 or 64.
    #[serde(default = "default_precision")]
    pub precision: u32,
    /// Keep the feature transformer (and its optimizer) across rounds.
    #[serde(default = "default_true")]
    pub server_warm_start: bool,
}

fn default_schema() -> String {
    CONFIG_SCHEMA.to_string()
}
fn default_classes() -> u32 {
    10
}
fn default_data_dim() -> usize {
    32
}
fn default_samples_per_class() -> usize {
    200
}
fn default_cluster_spread() -> f64 {
    0.35
}
fn default_beta() -> f64 {
    0.1
}
fn default_classes_per_client() -> usize {
    2
}
fn default_clients() -> usize {
    20
}
fn default_participation() -> f64 {
    1.0
}
fn default_palette() -> Vec<Vec<usize>> {
    vec![vec![64], vec![128, 128], vec![128, 128, 128], vec![256, 256, 256]]
}
fn default_feature_dim() -> usize {
    64
}
fn default_latent_dim() -> usize {
    32
}
fn default_noise_dim() -> usize {
    64
}
fn default_image_dim() -> usize {
    192
}
fn default_mu() -> f64 {
    50.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_arcface_scale() -> f64 {
    64.0
}
fn default_arcface_margin() -> f64 {
    0.5
}
fn default_client_lr() -> f64 {
    0.01
}
fn default_server_lr() -> f64 {
    0.01
}
fn default_server_batch() -> usize {
    100
}
fn default_server_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    10
}
fn default_rounds() -> usize {
    1000
}
fn default_local_epochs() -> usize {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_precision() -> u32 {
    32
}
fn default_vector_scale() -> f64 {
    0.05
}
fn default_vector_p() -> f64 {
    0.2
}
fn default_image_scale() -> f64 {
    0.2
}
fn default_image_p() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes via defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.schema != CONFIG_SCHEMA {
            return fail(format!("schema {:?}, expected {CONFIG_SCHEMA:?}", self.schema));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!("participation {} outside (0, 1]", self.participation));
        }
        if self.clients == 0 {
            return fail("clients must be positive".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 || self.server_epochs == 0 {
            return fail("epoch counts must be at least 1".into());
        }
        if self.batch_size == 0 || self.server_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.palette.is_empty() {
            return fail("palette must list at least one architecture".into());
        }
        if self.feature_dim == 0 || self.latent_dim == 0 || self.noise_dim == 0 || self.image_dim == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.mu < 0.0 || self.lambda < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.arcface_scale <= 0.0 {
            return fail(format!("arcface_scale {} must be positive", self.arcface_scale));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.arcface_margin) {
            return fail(format!("arcface_margin {} outside [0, pi/2)", self.arcface_margin));
        }
        if self.client_lr <= 0.0 || self.server_lr <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.precision != 32 && self.precision != 64 {
            return fail(format!("precision {} must be 32 or 64", self.precision));
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.mode == Mode::SingleClient && self.clients != 1 {
            return fail(format!("single-client mode requires clients = 1, got {}", self.clients));
        }
        if let DatasetConfig::Synthetic {
            classes,
            dim,
            samples_per_class,
            cluster_spread,
        } = &self.dataset
        {
            if *classes < 2 {
                return fail(format!("synthetic classes {classes} must be at least 2"));
            }
            if *dim == 0 || *samples_per_class == 0 {
                return fail("synthetic dim and samples_per_class must be positive".into());
            }
            if *cluster_spread <= 0.0 {
                return fail(format!("cluster_spread {cluster_spread} must be positive"));
            }
        }
        match &self.partition {
            PartitionConfig::Dirichlet { beta } => {
                if *beta <= 0.0 {
                    return fail(format!("beta {beta} must be positive"));
                }
            }
            PartitionConfig::Pathological { classes_per_client } => {
                if *classes_per_client == 0 {
                    return fail("classes_per_client must be positive".into());
                }
            }
        }
        for (scale, p, label) in [
            (self.noise.vector_scale, self.noise.vector_p, "vector"),
            (self.noise.image_scale, self.noise.image_p, "image"),
        ] {
            if scale < 0.0 {
                return fail(format!("{label} noise scale {scale} must be non-negative"));
            }
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{label} noise probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// ETF dimension with the K = C default applied.
    pub fn etf_dim_for(&self, classes: u32) -> usize {
        self.etf_dim.unwrap_or(classes as usize)
    }

    /// A copy with the ETF dimension pinned, for the resolved-config artifact.
    pub fn resolved(&self, classes: u32) -> ExperimentConfig {
        let mut out = self.clone();
        out.etf_dim = Some(self.etf_dim_for(classes));
        out
    }
}

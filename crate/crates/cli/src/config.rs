//! Experiment configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use fusefl::grouping::GroupingPolicy;
use fusefl::netsim::{ComputeModel, LinkModel};
use fusefl::neural::TrainConfig;
use fusefl::protocol::{ExecMode, Scheme};

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub n_clients: usize,
    #[serde(default = "default_network")]
    pub network: String,
    #[serde(default = "default_mode")]
    pub mode: ExecMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cores")]
    pub cores_per_server: usize,
    #[serde(default = "default_cluster")]
    pub cluster_size: usize,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Square risk matrix; without one clients pair in index order.
    #[serde(default)]
    pub risk_matrix: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub link: LinkSection,
    #[serde(default)]
    pub grouping: GroupingPolicy,
    #[serde(default)]
    pub compute: ComputeModel,
}

fn default_network() -> String {
    "tiny".into()
}

fn default_mode() -> ExecMode {
    ExecMode::Secure
}

fn default_cores() -> usize {
    16
}

fn default_cluster() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("fusefl-out")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        /// Training rows across all clients.
        samples: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        /// Held-out rows drawn from the same blobs.
        #[serde(default)]
        test_samples: usize,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` rows.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
}

fn default_dim() -> usize {
    4
}

fn default_classes() -> usize {
    3
}

fn default_spread() -> f64 {
    0.6
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            local_epochs: t.local_epochs,
            global_epochs: t.global_epochs,
            batch_size: t.batch_size,
        }
    }
}

/// A named profile with optional per-field overrides.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    #[serde(default = "default_profile")]
    pub profile: String,
    pub server_bandwidth: Option<f64>,
    pub client_bandwidth: Option<f64>,
    pub c2c_parallel: Option<bool>,
    pub base_rtt: Option<f64>,
    pub session_setup: Option<f64>,
    pub serialize_servers: Option<bool>,
    pub charge_distribution: Option<bool>,
}

fn default_profile() -> String {
    "lan".into()
}

impl Default for LinkSection {
    fn default() -> Self {
        LinkSection {
            profile: default_profile(),
            server_bandwidth: None,
            client_bandwidth: None,
            c2c_parallel: None,
            base_rtt: None,
            session_setup: None,
            serialize_servers: None,
            charge_distribution: None,
        }
    }
}

impl LinkSection {
    /// `base` stands in for the named profile; the calibration profile is
    /// solved by the caller because it takes a few seconds.
    pub fn apply(&self, base: LinkModel) -> Result<LinkModel, CliError> {
        let l = LinkModel {
            server_bandwidth: self.server_bandwidth.unwrap_or(base.server_bandwidth),
            client_bandwidth: self.client_bandwidth.unwrap_or(base.client_bandwidth),
            c2c_parallel: self.c2c_parallel.unwrap_or(base.c2c_parallel),
            base_rtt: self.base_rtt.unwrap_or(base.base_rtt),
            session_setup: self.session_setup.unwrap_or(base.session_setup),
            serialize_servers: self.serialize_servers.unwrap_or(base.serialize_servers),
            charge_distribution: self.charge_distribution.unwrap_or(base.charge_distribution),
        };
        l.validate()?;
        Ok(l)
    }

    pub fn named(&self) -> Result<Option<LinkModel>, CliError> {
        match self.profile.as_str() {
            "lan" => Ok(Some(LinkModel::lan())),
            "wan" => Ok(Some(LinkModel::wan())),
            "paper-calibration" => Ok(None),
            other => Err(CliError::Config(format!("unknown link profile `{other}`; expected one of {:?}", fusefl::netsim::PROFILES))),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train().validate()?;
        self.link.named()?;
        if !fusefl::neural::ARCHITECTURES.contains(&self.network.as_str()) {
            return Err(fusefl::Error::UnknownArchitecture(self.network.clone()).into());
        }
        if self.n_clients == 0 {
            return Err(CliError::Config("n_clients must be positive".into()));
        }
        if self.scheme.is_paired() && self.n_clients % 2 == 1 {
            return Err(fusefl::Error::OddClientCount(self.n_clients).into());
        }
        if let DatasetConfig::Synthetic { samples, dim, classes, spread, .. } = &self.dataset {
            if *samples < self.n_clients || *dim == 0 || *classes < 2 || !(*spread >= 0.0) {
                return Err(CliError::Config("synthetic dataset needs samples >= n_clients, dim > 0, classes >= 2, spread >= 0".into()));
            }
        }
        if !(self.compute.sec_per_op >= 0.0 && self.compute.sec_per_op.is_finite()) {
            return Err(CliError::Config("compute.sec_per_op must be non-negative".into()));
        }
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            local_epochs: self.train.local_epochs,
            global_epochs: self.train.global_epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
        }
    }

    /// Output directory, overridden by `FUSEFL_OUT_DIR` when set.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(crate::OUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.output_dir.clone(),
        }
    }
}

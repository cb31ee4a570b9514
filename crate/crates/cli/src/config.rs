//! Config files, flag overrides and the resolved-config sidecar.

use std::path::{Path, PathBuf};

use clap::Args;
use embp::channel::{Modulation, Pdp};
use embp::experiments::ExperimentConfig;
use embp::learn::{LossKind, TrainConfig};
use serde::Serialize;

/// Version of the CSV column layout, recorded in every sidecar.
pub const SCHEMA_VERSION: u32 = 1;

/// Errors that map to the "bad configuration" exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

/// Flags shared by the simulation subcommands. Each one overrides the
/// matching key of the config file.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML file with experiment settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Blocks per SNR point.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Output CSV; the resolved config goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SNR grid in dB, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr: Option<Vec<f64>>,
    /// Symbols per block.
    #[arg(long)]
    pub block_len: Option<usize>,
    /// Channel memory L.
    #[arg(long)]
    pub memory: Option<usize>,
    /// bpsk or qpsk.
    #[arg(long)]
    pub modulation: Option<Modulation>,
    /// uniform or exponential.
    #[arg(long)]
    pub pdp: Option<Pdp>,
    /// EM/BP iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub vae_steps: Option<usize>,
    #[arg(long)]
    pub vae_lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub pilot_fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Trained weights file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Algorithms to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,
}

impl RunArgs {
    /// File settings (or defaults) with the flags applied, validated.
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => read_toml(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { cfg.$target = v.clone(); })*
            };
        }
        set!(
            seed => seed, blocks => blocks, snr => snr_db, block_len => block_len, memory => memory,
            modulation => modulation, pdp => pdp, vae_steps => vae_steps, vae_lr => vae_lr,
            pilot_fractions => pilot_fractions, gammas => gammas, alphas => alphas, algorithms => algorithms,
        );
        if self.iterations.is_some() {
            cfg.iterations = self.iterations;
        }
        if self.weights.is_some() {
            cfg.weights = self.weights.clone();
        }
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}

/// Flags of the `train` subcommand.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Blocks per SPSA batch.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Output CSV with the loss per step.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the trained weights; defaults to the output path with a `.weights.toml` extension.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    /// Channel memory L (used when no config file is given).
    #[arg(long)]
    pub memory: Option<usize>,
    #[arg(long)]
    pub batches: Option<usize>,
    /// mse or neg-bmi.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// EM weights left active after pruning.
    #[arg(long)]
    pub k_em_target: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig, ConfigError> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => read_toml(path)?,
            None => TrainConfig::new(self.memory.unwrap_or(5)),
        };
        let full = cfg.iterations * (cfg.memory + 2);
        if let (Some(_), Some(m)) = (&self.config, self.memory) {
            cfg.memory = m;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.blocks {
            cfg.batch_size = v;
        }
        if let Some(v) = self.batches {
            cfg.batches = v;
        }
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.step_size {
            cfg.step_size = v;
        }
        // An unpruned schedule stays unpruned when T or L change.
        match self.k_em_target {
            Some(k) => cfg.k_em_target = k,
            None if cfg.k_em_target == full => cfg.k_em_target = cfg.iterations * (cfg.memory + 2),
            None => {}
        }
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Sidecar<'a, C: Serialize> {
    experiment: &'a str,
    schema_version: u32,
    config: &'a C,
}

/// Path of the sidecar written next to `out`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("config.toml")
}

/// Writes the fully resolved config used to produce `out`.
pub fn write_sidecar<C: Serialize>(out: &Path, experiment: &str, config: &C) -> anyhow::Result<PathBuf> {
    let path = sidecar_path(out);
    let text = toml::to_string(&Sidecar { experiment, schema_version: SCHEMA_VERSION, config })?;
    std::fs::write(&path, text).map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

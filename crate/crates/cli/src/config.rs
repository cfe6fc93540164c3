//! Run configuration: defaults, then an optional TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use metaprefix::evalbench::ScenarioSpec;
use metaprefix::meta::{GradientMode, MetaConfig};
use metaprefix::model::{ModelConfig, Site};
use metaprefix::train::{TrainConfig, TrainablePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Source projects kept by selection.
    pub top_n: usize,
    /// Beam width; 0 or 1 decodes greedily.
    pub beam_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { top_n: 3, beam_size: 0 }
    }
}

/// Fully resolved settings for one subcommand run.
///
/// `train.seed` and `meta.seed` are offsets: the seed actually used is
/// derived from the root `seed`, the subcommand and the offset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub artifact_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub scenario: ScenarioSpec,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.meta.validate()?;
        Ok(())
    }

    /// Writes the config as `run_config.<command>.toml` in the artifact dir.
    pub fn persist(&self, command: &str) -> Result<PathBuf> {
        let dir = self.artifact_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("run_config.{command}.toml"));
        fs::write(&path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed every child seed is derived from.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where the resolved run configuration is written.
    #[arg(long)]
    pub artifact_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_code_len: Option<usize>,
    #[arg(long)]
    pub max_sum_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long)]
    pub prefix_mlp_hidden: Option<usize>,
    /// Comma-separated subset of enc_self, dec_self, dec_cross.
    #[arg(long, value_delimiter = ',')]
    pub prefix_sites: Option<Vec<Site>>,
    /// Upper bound on the code vocabulary, special tokens included.
    #[arg(long)]
    pub code_vocab_size: Option<usize>,
    #[arg(long)]
    pub summary_vocab_size: Option<usize>,
}

impl ModelArgs {
    pub fn apply(&self, m: &mut ModelConfig) {
        set(&mut m.n_layers, self.n_layers);
        set(&mut m.n_heads, self.n_heads);
        set(&mut m.d_model, self.d_model);
        set(&mut m.d_ff, self.d_ff);
        set(&mut m.max_code_len, self.max_code_len);
        set(&mut m.max_sum_len, self.max_sum_len);
        set(&mut m.dropout, self.dropout);
        set(&mut m.prefix_len, self.prefix_len);
        set(&mut m.prefix_mlp_hidden, self.prefix_mlp_hidden);
        set(&mut m.prefix_sites, self.prefix_sites.clone());
        set(&mut m.code_vocab_size, self.code_vocab_size);
        set(&mut m.summary_vocab_size, self.summary_vocab_size);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// prefix_only, prefix_plus_output_layer or full.
    #[arg(long)]
    pub trainable_policy: Option<TrainablePolicy>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

impl TrainArgs {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.patience, self.patience);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.epsilon, self.epsilon);
        set(&mut t.trainable_policy, self.trainable_policy);
        set(&mut t.val_fraction, self.val_fraction);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct MetaArgs {
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub outer_lr: Option<f64>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Support (and query) pairs per meta task.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub meta_batch_size: Option<usize>,
    #[arg(long)]
    pub meta_epochs: Option<usize>,
    /// second_order or first_order.
    #[arg(long)]
    pub gradient_mode: Option<GradientMode>,
}

impl MetaArgs {
    pub fn apply(&self, m: &mut MetaConfig) {
        set(&mut m.inner_lr, self.inner_lr);
        set(&mut m.outer_lr, self.outer_lr);
        set(&mut m.inner_steps, self.inner_steps);
        set(&mut m.k, self.k);
        set(&mut m.meta_batch_size, self.meta_batch_size);
        set(&mut m.meta_epochs, self.meta_epochs);
        set(&mut m.gradient_mode, self.gradient_mode);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub beam_size: Option<usize>,
}

impl EvalArgs {
    pub fn apply(&self, e: &mut EvalOptions) {
        set(&mut e.top_n, self.top_n);
        set(&mut e.beam_size, self.beam_size);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    /// Labelled target samples per fold.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

impl ScenarioArgs {
    pub fn apply(&self, s: &mut ScenarioSpec) {
        set(&mut s.n_target_samples, self.samples);
        set(&mut s.folds, self.folds);
        set(&mut s.repeats, self.repeats);
    }
}

/// Loads the config file and applies the common flags. `default_dir` is
/// used when neither the file nor the flags name an artifact dir.
pub fn resolve(common: &CommonArgs, default_dir: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    if common.artifact_dir.is_some() {
        cfg.artifact_dir = common.artifact_dir.clone();
    }
    if cfg.artifact_dir.is_none() {
        cfg.artifact_dir = Some(default_dir.to_path_buf());
    }
    cfg.scenario.seed = cfg.seed;
    Ok(cfg)
}

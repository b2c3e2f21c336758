//! Declarative config files mirroring the command-line flags.
//!
//! A config file is a JSON object with optional top-level `seed` and `out`
//! plus one section per subcommand; explicit flags always win over file
//! values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub preset: Option<String>,
    pub m: Option<u32>,
    pub majority_fraction: Option<f64>,
    pub samples_per_user: Option<usize>,
    pub vocab_size: Option<u32>,
    pub prompt_len: Option<usize>,
    pub len_short: Option<usize>,
    pub len_long: Option<usize>,
    pub dims: Option<usize>,
    pub marker: Option<u32>,
    pub eval_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub objective: Option<String>,
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub sft: Option<PathBuf>,
    pub init_policy: Option<PathBuf>,
    pub user_model: Option<String>,
    pub t_u: Option<usize>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub step_size: Option<f64>,
    pub log_every: Option<usize>,
    pub rm_aggregation: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub data: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub sft: Option<PathBuf>,
    pub user_model: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub beta: Option<f64>,
    pub lengths: Option<bool>,
    pub draws: Option<usize>,
    pub max_len: Option<usize>,
    pub num_prompts: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }
}

/// Flag value if given, else config value, else default.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag value if given, else config value, else a usage error naming the flag.
pub fn pick_required<T: Clone>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T, String> {
    flag.or(file).ok_or_else(|| format!("missing required --{name}"))
}

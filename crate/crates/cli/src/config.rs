//! Run configuration: a TOML file, overridden by command-line flags, over
//! built-in defaults.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use promptgrad::datasets::{SplitProtocol, SplitSpec, TaskFormat};
use promptgrad::gateway::{BackendConfig, BackendKind};
use promptgrad::optimizer::OptimizerConfig;
use promptgrad::strategies::{PromptStrategy, DEFAULT_K};
use promptgrad::textgrad::EngineSettings;
use promptgrad::ErrorCategory;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_TASK_MODEL: &str = "llama-3-70b-instruct";
pub const DEFAULT_BACKWARD_MODEL: &str = "gpt-4o";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    Mc,
    Ternary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyChoice {
    ZeroShot,
    FewShot,
    Cot,
}

impl StrategyChoice {
    pub fn label(self) -> &'static str {
        match self {
            StrategyChoice::ZeroShot => "zero-shot",
            StrategyChoice::FewShot => "few-shot",
            StrategyChoice::Cot => "cot",
        }
    }
}

/// One engine endpoint. Unset model and sampling fields take the defaults
/// of the engine's role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub model: Option<String>,
    pub backend: BackendChoice,
    pub base_url: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
    pub retry_limit: u32,
    pub request_timeout_secs: u64,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        let http = BackendConfig::http("", "");
        Self {
            model: None,
            backend: BackendChoice::Http,
            base_url: None,
            api_key_env: None,
            temperature: None,
            max_tokens: None,
            seed: None,
            retry_limit: http.retry_limit,
            request_timeout_secs: http.request_timeout_secs,
            backoff_base_ms: http.backoff_base_ms,
            max_in_flight: http.max_in_flight,
        }
    }
}

impl EndpointConfig {
    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            kind: match self.backend {
                BackendChoice::Http => BackendKind::Http,
                BackendChoice::Mock => BackendKind::Mock,
            },
            base_url: self.base_url.clone(),
            api_key_env: self.api_key_env.clone(),
            retry_limit: self.retry_limit,
            request_timeout_secs: self.request_timeout_secs,
            backoff_base_ms: match self.backend {
                BackendChoice::Http => self.backoff_base_ms,
                BackendChoice::Mock => 0,
            },
            max_in_flight: self.max_in_flight,
            cache_path: None,
        }
    }

    fn settings(&self, defaults: EngineSettings) -> EngineSettings {
        EngineSettings {
            model: self.model.clone().unwrap_or(defaults.model),
            temperature: self.temperature.unwrap_or(defaults.temperature),
            max_tokens: self.max_tokens.unwrap_or(defaults.max_tokens),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    /// A separate test file for benchmarks shipped pre-split.
    pub test_path: Option<PathBuf>,
    pub format: FormatChoice,
    /// Option letters for multiple choice.
    pub alphabet: String,
    /// Defaults to true for ternary and false for multiple choice.
    pub requires_context: Option<bool>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            test_path: None,
            format: FormatChoice::Mc,
            alphabet: "ABCDE".into(),
            requires_context: None,
        }
    }
}

impl DatasetConfig {
    pub fn task_format(&self) -> Result<TaskFormat, CliError> {
        match self.format {
            FormatChoice::Mc => {
                let mut f = TaskFormat::multiple_choice(&self.alphabet)
                    .map_err(|e| CliError::new(ErrorCategory::Config, e.to_string()))?;
                f.requires_context = self.requires_context.unwrap_or(false);
                Ok(f)
            }
            FormatChoice::Ternary => Ok(TaskFormat::ternary(self.requires_context.unwrap_or(true))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub dev_size: usize,
    pub test_size: Option<usize>,
    pub seed: u64,
    /// Defaults to `dev_from_train` when a test file is given and
    /// `dev_test_rest_train` otherwise.
    pub protocol: Option<SplitProtocol>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            dev_size: 50,
            test_size: None,
            seed: 0,
            protocol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub strategy: StrategyChoice,
    pub k: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyChoice::ZeroShot,
            k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn strategy(&self) -> PromptStrategy {
        match self.strategy {
            StrategyChoice::ZeroShot => PromptStrategy::zero_shot(),
            StrategyChoice::FewShot => PromptStrategy::few_shot(self.k, self.seed),
            StrategyChoice::Cot => PromptStrategy::cot(),
        }
    }

    pub fn label(&self) -> String {
        match self.strategy {
            StrategyChoice::FewShot => format!("few-shot (k={})", self.k),
            s => s.label().to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Concurrent items per fan-out (dev evaluation, batch backprop, test).
    pub parallelism: usize,
    pub cache: bool,
    /// Defaults to `<out>/cache.jsonl`.
    pub cache_path: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            parallelism: 8,
            cache: true,
            cache_path: None,
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Config {
    pub task: EndpointConfig,
    pub backward: EndpointConfig,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub optimizer: OptimizerConfig,
    pub baseline: BaselineConfig,
    pub run: RunConfig,
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub format: Option<FormatChoice>,
    pub strategy: Option<StrategyChoice>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<BackendChoice>,
    pub mock_script: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::new(ErrorCategory::Config, msg)
}

impl Config {
    /// Parses a TOML config; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config = toml::from_str(&text)
            .map_err(|e| config_err(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.dataset.path,
            &mut cfg.dataset.test_path,
            &mut cfg.run.cache_path,
            &mut cfg.run.mock_script,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.dataset {
            self.dataset.path = Some(p.clone());
        }
        if let Some(p) = &o.test_dataset {
            self.dataset.test_path = Some(p.clone());
        }
        if let Some(f) = o.format {
            self.dataset.format = f;
        }
        if let Some(s) = o.strategy {
            self.baseline.strategy = s;
        }
        if let Some(k) = o.k {
            self.baseline.k = k;
        }
        if let Some(seed) = o.seed {
            self.split.seed = seed;
            self.optimizer.rng_seed = seed;
            self.baseline.seed = seed;
        }
        if let Some(b) = o.backend {
            self.task.backend = b;
            self.backward.backend = b;
        }
        if let Some(p) = &o.mock_script {
            self.run.mock_script = Some(p.clone());
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.dataset.path.is_none() {
            return Err(config_err(
                "no dataset given (use --dataset or [dataset] path)",
            ));
        }
        if self.run.parallelism == 0 {
            return Err(config_err("run.parallelism must be positive"));
        }
        let uses_mock = [&self.task, &self.backward]
            .iter()
            .any(|e| e.backend == BackendChoice::Mock);
        if uses_mock && self.run.mock_script.is_none() {
            return Err(config_err("the mock backend needs --mock-script"));
        }
        for (name, e) in [("task", &self.task), ("backward", &self.backward)] {
            e.backend_config()
                .validate()
                .map_err(|err| config_err(format!("[{name}] {err}")))?;
        }
        self.dataset.task_format()?;
        Ok(())
    }

    pub fn task_settings(&self) -> EngineSettings {
        self.task.settings(EngineSettings::task(DEFAULT_TASK_MODEL))
    }

    pub fn backward_settings(&self) -> EngineSettings {
        self.backward
            .settings(EngineSettings::backward(DEFAULT_BACKWARD_MODEL))
    }

    pub fn split_spec(&self) -> SplitSpec {
        let protocol = self
            .split
            .protocol
            .unwrap_or(if self.dataset.test_path.is_some() {
                SplitProtocol::DevFromTrain
            } else {
                SplitProtocol::DevTestRestTrain
            });
        SplitSpec {
            dev_size: self.split.dev_size,
            test_size: self.split.test_size,
            seed: self.split.seed,
            protocol,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_defaults_fill_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
[dataset]
path = "data/train.jsonl"
format = "ternary"

[split]
seed = 3

[task]
backend = "mock"

[backward]
backend = "mock"

[run]
mock_script = "mock.json"
"#,
        )
        .unwrap();
        let cfg = Config::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(
            cfg.dataset.path.as_deref(),
            Some(dir.path().join("data/train.jsonl").as_path())
        );
        assert_eq!(cfg.dataset.format, FormatChoice::Ternary);
        assert_eq!(cfg.split.seed, 3);
        assert_eq!(cfg.split.dev_size, 50);
        assert_eq!(cfg.optimizer.patience_n, 3);
        assert_eq!(
            cfg.backward_settings().temperature,
            promptgrad::gateway::BACKWARD_TEMPERATURE
        );
        assert_eq!(
            cfg.task_settings().temperature,
            promptgrad::gateway::TASK_TEMPERATURE
        );

        let o = Overrides {
            seed: Some(9),
            format: Some(FormatChoice::Mc),
            ..Default::default()
        };
        let cfg = Config::load(Some(&path), &o).unwrap();
        assert_eq!(
            (cfg.split.seed, cfg.optimizer.rng_seed, cfg.baseline.seed),
            (9, 9, 9)
        );
        assert_eq!(cfg.dataset.format, FormatChoice::Mc);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[dataset]\nunknown_key = 1\n").unwrap();
        assert_eq!(
            Config::load(Some(&path), &Overrides::default())
                .unwrap_err()
                .category,
            ErrorCategory::Config
        );

        // http without base_url
        let o = Overrides {
            dataset: Some("x.jsonl".into()),
            ..Default::default()
        };
        assert_eq!(
            Config::load(None, &o).unwrap_err().category,
            ErrorCategory::Config
        );
    }
}

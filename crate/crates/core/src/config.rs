//! Declarative run configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::backend::{
    api_key_var, load_tape, BackendConfigError, CompletionBackend, HttpBackend, HttpBackendConfig, ScriptedBackend,
    TapeError,
};
use crate::generation::GenerationOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    /// Replays a tape file.
    Scripted { tape: PathBuf },
    /// OpenAI-compatible chat-completions endpoint. The key comes from
    /// `RAISE_API_KEY_<NAME>`.
    Openai(HttpBackendConfig),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roles {
    pub explorer: String,
    pub generators: Vec<String>,
    /// Generators whose answers also get a column-selection rewrite.
    pub postprocess: Vec<String>,
    /// Backend asked for the column list; defaults to the generator itself.
    pub postprocessor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Benchmark layout root (questions file plus databases directory).
    pub dataset: Option<PathBuf>,
    pub store: PathBuf,
    pub prompts_dir: Option<PathBuf>,
    pub seed: u64,
    pub sample_fraction: f64,
    pub workers: usize,
    /// Exploration depth used by `generate`.
    pub k: usize,
    pub rounds: u32,
    /// Depths swept by `scaling`.
    pub ks: Vec<usize>,
    pub agent: AgentConfig,
    pub generation: GenerationOptions,
    pub roles: Roles,
    pub backends: BTreeMap<String, BackendSpec>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: None,
            store: PathBuf::from("runs"),
            prompts_dir: None,
            seed: 0,
            sample_fraction: 0.1,
            workers: 1,
            k: 40,
            rounds: 8,
            ks: vec![0, 3, 7, 15, 31],
            agent: AgentConfig::default(),
            generation: GenerationOptions::default(),
            roles: Roles::default(),
            backends: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Backend(#[from] BackendConfigError),
}

impl Config {
    /// Reads a TOML file. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| {
            let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            std::path::absolute(&joined).unwrap_or(joined)
        };
        self.dataset = self.dataset.as_deref().map(abs);
        self.store = abs(&self.store);
        self.prompts_dir = self.prompts_dir.as_deref().map(abs);
        for spec in self.backends.values_mut() {
            if let BackendSpec::Scripted { tape } = spec {
                *tape = abs(tape);
            }
        }
    }

    /// Seeds left unset in the agent and generation sections follow `seed`.
    pub fn with_derived_seeds(mut self) -> Self {
        self.agent.seed.get_or_insert(self.seed);
        self.generation.seed.get_or_insert(self.seed);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!("sample_fraction must be in (0, 1], got {}", self.sample_fraction));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        self.agent.validate().map_err(ConfigError::Invalid)?;
        let known = |name: &String| self.backends.contains_key(name);
        let referenced = std::iter::once(&self.roles.explorer)
            .filter(|n| !n.is_empty())
            .chain(&self.roles.generators)
            .chain(&self.roles.postprocess)
            .chain(self.roles.postprocessor.as_ref());
        for name in referenced {
            if !known(name) {
                return bad(format!("role refers to undefined backend `{name}`"));
            }
        }
        for name in &self.roles.postprocess {
            if !self.roles.generators.contains(name) {
                return bad(format!("postprocess backend `{name}` is not a generator"));
            }
        }
        Ok(())
    }

    pub fn backend_spec(&self, name: &str) -> Result<&BackendSpec, ConfigError> {
        self.backends
            .get(name)
            .ok_or_else(|| ConfigError::Invalid(format!("undefined backend `{name}`")))
    }
}

pub fn build_backend(name: &str, spec: &BackendSpec) -> Result<Box<dyn CompletionBackend>, ConfigError> {
    match spec {
        BackendSpec::Scripted { tape } => Ok(Box::new(ScriptedBackend::new(name, load_tape(tape)?))),
        BackendSpec::Openai(http) => {
            let mut http = http.clone();
            if let Ok(key) = std::env::var(api_key_var(name)) {
                http.api_key = Some(key);
            }
            Ok(Box::new(HttpBackend::new(name, http)?))
        }
    }
}

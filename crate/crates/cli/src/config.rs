//! Run configuration file: `[problem]`, `[engine]`, `[transfer]`,
//! `[output]` and an optional free-form `[meta]` table. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kato_core::benchmarks::{build_fom_spec_cached, FomSpec, ProblemSpec};
use kato_core::engine::{build_source, EngineConfig, Mode};
use kato_core::gp::FitConfig;
use kato_core::nsga2::EvolutionConfig;
use kato_core::transfer::{KatTrainConfig, SourceCheckpoint};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, toml::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// Name of a shipped problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Path of a problem spec file; exclusive with `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Uniform samples used to build the FOM normalization in FOM mode.
    #[serde(default = "default_fom_samples")]
    pub fom_samples: usize,
    #[serde(default)]
    pub fom_seed: u64,
}

fn default_fom_samples() -> usize {
    1000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub mode: Mode,
    pub batch_size: usize,
    pub iterations: usize,
    pub initial_samples: usize,
    pub seed: u64,
    pub beta: f64,
    pub initial_fit: FitConfig,
    pub refresh_steps: usize,
    pub search: EvolutionConfig,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            mode: e.mode,
            batch_size: e.batch_size,
            iterations: e.iterations,
            initial_samples: e.initial_samples,
            seed: e.seed,
            beta: e.beta,
            initial_fit: e.initial_fit,
            refresh_steps: e.refresh_steps,
            search: e.search,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub enabled: bool,
    /// Source checkpoint written by `make-source`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Alternatively, a problem to sample and fit a source from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_problem: Option<String>,
    pub source_samples: usize,
    pub source_seed: u64,
    pub source_fit: FitConfig,
    /// Training of the transfer model at the first iteration.
    pub initial: KatTrainConfig,
    /// Adam steps of the transfer refit on later iterations.
    pub refresh_steps: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            enabled: false,
            source: None,
            source_problem: None,
            source_samples: 200,
            source_seed: 0,
            source_fit: FitConfig::default(),
            initial: e.transfer_initial,
            refresh_steps: e.transfer_refresh_steps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write a checkpoint after every iteration and resume from it.
    pub checkpoint: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("kato-out"),
            checkpoint: false,
        }
    }
}

impl Config {
    /// Reads a config file; relative paths inside it are made relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(f) = cfg.problem.file.as_mut() {
            rebase(f);
        }
        if let Some(s) = cfg.transfer.source.as_mut() {
            rebase(s);
        }
        rebase(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        load_problem(self.problem.name.as_deref(), self.problem.file.as_deref())
    }

    pub fn engine_config(&self) -> EngineConfig {
        let e = &self.engine;
        EngineConfig {
            mode: e.mode,
            batch_size: e.batch_size,
            iterations: e.iterations,
            initial_samples: e.initial_samples,
            transfer: self.transfer.enabled,
            seed: e.seed,
            beta: e.beta,
            initial_fit: e.initial_fit,
            refresh_steps: e.refresh_steps,
            search: e.search.clone(),
            transfer_initial: self.transfer.initial,
            transfer_refresh_steps: self.transfer.refresh_steps,
        }
    }

    /// FOM normalization for FOM mode, cached under `cache_dir`.
    pub fn fom_spec(&self, problem: &ProblemSpec, cache_dir: &Path) -> Result<Option<FomSpec>> {
        if self.engine.mode != Mode::Fom {
            return Ok(None);
        }
        let spec = build_fom_spec_cached(problem, self.problem.fom_samples, self.problem.fom_seed, cache_dir)
            .map_err(crate::classify)?;
        Ok(Some(spec))
    }

    /// The transfer source, loaded or built; `None` with transfer off.
    pub fn source(&self) -> Result<Option<SourceCheckpoint>> {
        let t = &self.transfer;
        if !t.enabled {
            return Ok(None);
        }
        match (&t.source, &t.source_problem) {
            (Some(path), None) => {
                let c = SourceCheckpoint::load(path).map_err(crate::classify)?;
                Ok(Some(c))
            }
            (None, Some(name)) => {
                let p = load_problem(Some(name), None)?;
                let c = build_source(&p, t.source_samples, t.source_seed, &t.source_fit).map_err(crate::classify)?;
                Ok(Some(c))
            }
            _ => Err(ConfigError("transfer needs exactly one of `source` and `source_problem`".into()).into()),
        }
    }
}

pub fn load_problem(name: Option<&str>, file: Option<&Path>) -> Result<ProblemSpec> {
    match (name, file) {
        (Some(n), None) => ProblemSpec::builtin(n).ok_or_else(|| {
            ConfigError(format!(
                "unknown problem {n:?}; shipped problems are {}",
                ProblemSpec::builtin_names().join(", ")
            ))
            .into()
        }),
        (None, Some(f)) => {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            ProblemSpec::from_toml(&text).map_err(crate::classify)
        }
        _ => Err(ConfigError("give exactly one of a problem name and a problem file".into()).into()),
    }
}

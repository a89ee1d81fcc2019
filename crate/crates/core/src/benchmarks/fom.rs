//! Figure of merit: a weighted sum of clipped, range-normalized metrics.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProblemSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomTerm {
    pub metric: String,
    /// +1 for metrics to maximize, -1 for metrics to minimize.
    pub weight: f64,
    pub bound: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomSpec {
    pub terms: Vec<FomTerm>,
}

impl FomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("FOM spec has no terms".into()));
        }
        for t in &self.terms {
            if t.weight != 1.0 && t.weight != -1.0 {
                return Err(Error::Config(format!("FOM weight for {} must be +1 or -1", t.metric)));
            }
            if !(t.max > t.min) || !t.min.is_finite() || !t.max.is_finite() {
                return Err(Error::Config(format!(
                    "FOM range for {} is degenerate (min {}, max {})",
                    t.metric, t.min, t.max
                )));
            }
        }
        Ok(())
    }
}

/// `Σ w·(min(f, bound) - min)/(max - min)` over the spec's terms, with
/// `metrics` given in the same order as the terms.
pub fn compute_fom(metrics: &[f64], spec: &FomSpec) -> f64 {
    assert_eq!(metrics.len(), spec.terms.len());
    spec.terms
        .iter()
        .zip(metrics)
        .map(|(t, &f)| t.weight * (f.min(t.bound) - t.min) / (t.max - t.min))
        .sum()
}

/// Empirical metric ranges over `n` uniform samples of the box; bounds
/// default to the maxima and weights follow each metric's direction.
pub fn build_fom_spec(problem: &ProblemSpec, n: usize, seed: u64) -> Result<FomSpec> {
    if n < 100 {
        return Err(Error::Config(format!("FOM spec needs at least 100 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = problem.metrics.len();
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for _ in 0..n {
        let z: Vec<f64> = (0..problem.dim()).map(|_| rng.random::<f64>()).collect();
        let f = problem.evaluate(&problem.to_physical(&z))?;
        for k in 0..m {
            lo[k] = lo[k].min(f[k]);
            hi[k] = hi[k].max(f[k]);
        }
    }
    let spec = FomSpec {
        terms: problem
            .metrics
            .iter()
            .enumerate()
            .map(|(k, metric)| FomTerm {
                metric: metric.name.clone(),
                weight: if problem.metric_is_maximized(k) { 1.0 } else { -1.0 },
                bound: hi[k],
                min: lo[k],
                max: hi[k],
            })
            .collect(),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn fom_cache_path(dir: &Path, problem: &str, n: usize, seed: u64) -> PathBuf {
    dir.join(format!("fom_{problem}_{n}_{seed}.json"))
}

/// [`build_fom_spec`] backed by a JSON file cache keyed by problem, sample
/// count and seed.
pub fn build_fom_spec_cached(problem: &ProblemSpec, n: usize, seed: u64, cache_dir: &Path) -> Result<FomSpec> {
    let path = fom_cache_path(cache_dir, &problem.name, n, seed);
    if path.exists() {
        let spec: FomSpec = crate::transfer::load_json(&path)?;
        spec.validate()?;
        return Ok(spec);
    }
    let spec = build_fom_spec(problem, n, seed)?;
    crate::transfer::save_json(&spec, &path)?;
    Ok(spec)
}

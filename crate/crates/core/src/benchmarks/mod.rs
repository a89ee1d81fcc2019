//! Constrained test problems and the evaluation contract used by the engine.
//!
//! A [`ProblemSpec`] declares a box in physical units, a list of metrics
//! (one objective plus any number of thresholded constraints) and how the
//! metrics are produced: an analytic family member or an external process.
//! Specs are TOML documents; the shipped ones live in `problems/`.

pub mod families;
pub mod fom;
pub mod subprocess;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{Constraint, ConstraintDirection};
use crate::error::{Error, Result};

pub use families::FamilyKind;
pub use fom::{build_fom_spec, build_fom_spec_cached, compute_fom, FomSpec, FomTerm};
pub use subprocess::{subprocess_evaluate, EvalError, SubprocessSpec, Transcript};

const BUILTIN: &[(&str, &str)] = &[
    ("two_stage", include_str!("../../problems/two_stage.toml")),
    ("two_stage_source", include_str!("../../problems/two_stage_source.toml")),
    ("two_stage_adversarial", include_str!("../../problems/two_stage_adversarial.toml")),
    ("three_stage", include_str!("../../problems/three_stage.toml")),
    ("three_stage_source", include_str!("../../problems/three_stage_source.toml")),
    ("bandgap", include_str!("../../problems/bandgap.toml")),
    ("bandgap_source", include_str!("../../problems/bandgap_source.toml")),
    ("branin", include_str!("../../problems/branin.toml")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub constraint: Option<Constraint>,
}

/// Parameters of one member of an analytic family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticSpec {
    pub family: FamilyKind,
    /// Unit-cube shift; metrics are evaluated at `z - shift`.
    #[serde(default)]
    pub shift: Vec<f64>,
    #[serde(default = "one")]
    pub objective_scale: f64,
    #[serde(default)]
    pub objective_offset: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorSpec {
    Analytic(AnalyticSpec),
    Subprocess(SubprocessSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub metrics: Vec<MetricSpec>,
    /// Name of the objective metric.
    pub objective: String,
    pub direction: Direction,
    pub evaluator: EvaluatorSpec,
    /// Fraction of uniform box samples that satisfy every constraint, as
    /// measured when the spec was written.
    #[serde(default)]
    pub feasible_fraction: Option<f64>,
}

impl ProblemSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml(text).expect("shipped problem specs are valid"))
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d {
            return Err(Error::Config(format!("{}: lower/upper bounds must be non-empty and equal length", self.name)));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::Config(format!("{}: bad bounds [{l}, {u}] at coordinate {i}", self.name)));
            }
        }
        let hits: Vec<usize> = (0..self.metrics.len())
            .filter(|&k| self.metrics[k].name == self.objective)
            .collect();
        if hits.len() != 1 {
            return Err(Error::Config(format!(
                "{}: objective {:?} must name exactly one metric",
                self.name, self.objective
            )));
        }
        if self.metrics[hits[0]].constraint.is_some() {
            return Err(Error::Config(format!("{}: the objective metric cannot be constrained", self.name)));
        }
        for m in &self.metrics {
            if let Some(c) = &m.constraint {
                if !c.threshold.is_finite() {
                    return Err(Error::Config(format!("{}: metric {} has a non-finite threshold", self.name, m.name)));
                }
            }
        }
        if let EvaluatorSpec::Analytic(a) = &self.evaluator {
            if a.family.dim() != d {
                return Err(Error::Config(format!(
                    "{}: family {:?} has dimension {}, bounds have {d}",
                    self.name,
                    a.family,
                    a.family.dim()
                )));
            }
            let names = a.family.metric_names();
            if names.len() != self.metrics.len() || names.iter().zip(&self.metrics).any(|(n, m)| *n != m.name) {
                return Err(Error::Config(format!(
                    "{}: metrics must be {names:?} for family {:?}",
                    self.name, a.family
                )));
            }
            if !a.shift.is_empty() && a.shift.len() != d {
                return Err(Error::Config(format!("{}: shift has {} entries, expected {d}", self.name, a.shift.len())));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.metrics.iter().map(|m| m.name.clone()).collect()
    }

    pub fn objective_index(&self) -> usize {
        self.metrics.iter().position(|m| m.name == self.objective).expect("validated")
    }

    /// Indices and constraints of the constrained metrics.
    pub fn constraints(&self) -> Vec<(usize, Constraint)> {
        self.metrics
            .iter()
            .enumerate()
            .filter_map(|(k, m)| m.constraint.map(|c| (k, c)))
            .collect()
    }

    /// Whether larger values of metric `k` are better.
    pub fn metric_is_maximized(&self, k: usize) -> bool {
        match &self.metrics[k].constraint {
            Some(c) => c.direction == ConstraintDirection::AtLeast,
            None if k == self.objective_index() => self.direction == Direction::Maximize,
            None => true,
        }
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (v - l) / (u - l))
            .collect()
    }

    pub fn to_physical(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| l + v * (u - l))
            .collect()
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Metric vector at physical point `x`, in declared metric order.
    pub fn evaluate(&self, x: &[f64]) -> std::result::Result<Vec<f64>, EvalError> {
        if x.len() != self.dim() {
            return Err(EvalError::OutOfBounds {
                index: x.len().min(self.dim()),
                value: f64::NAN,
            });
        }
        for (i, v) in x.iter().enumerate() {
            if !(self.lower[i] <= *v && *v <= self.upper[i]) {
                return Err(EvalError::OutOfBounds { index: i, value: *v });
            }
        }
        match &self.evaluator {
            EvaluatorSpec::Analytic(a) => {
                let z = self.to_unit(x);
                let u: Vec<f64> = if a.shift.is_empty() {
                    z
                } else {
                    z.iter().zip(&a.shift).map(|(v, s)| v - s).collect()
                };
                let mut f = a.family.eval(&u);
                let k = self.objective_index();
                f[k] = a.objective_scale * f[k] + a.objective_offset;
                Ok(f)
            }
            EvaluatorSpec::Subprocess(s) => subprocess_evaluate(s, &self.metric_names(), x),
        }
    }

    pub fn is_feasible(&self, metrics: &[f64]) -> bool {
        self.constraints().iter().all(|(k, c)| c.is_satisfied(metrics[*k]))
    }

    /// Total amount by which the constraints are missed.
    pub fn total_violation(&self, metrics: &[f64]) -> f64 {
        self.constraints().iter().map(|(k, c)| c.violation(metrics[*k])).sum()
    }

    /// Objective in maximization convention.
    pub fn signed_objective(&self, metrics: &[f64]) -> f64 {
        let f = metrics[self.objective_index()];
        match self.direction {
            Direction::Maximize => f,
            Direction::Minimize => -f,
        }
    }

    /// Fraction of `n` uniform samples that satisfy every constraint.
    pub fn measure_feasible_fraction(&self, n: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        for _ in 0..n {
            let z: Vec<f64> = (0..self.dim()).map(|_| rng.random::<f64>()).collect();
            if self.is_feasible(&self.evaluate(&self.to_physical(&z))?) {
                hits += 1;
            }
        }
        Ok(hits as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_specs_load() {
        for name in ProblemSpec::builtin_names() {
            let p = ProblemSpec::builtin(name).unwrap();
            assert_eq!(p.name, name);
        }
        assert!(ProblemSpec::builtin("nope").is_none());
    }

    #[test]
    fn unit_mapping_roundtrip() {
        let p = ProblemSpec::builtin("branin").unwrap();
        let x = vec![3.3, 11.0];
        let back = p.to_physical(&p.to_unit(&x));
        assert!((back[0] - 3.3).abs() < 1e-12 && (back[1] - 11.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let p = ProblemSpec::builtin("two_stage").unwrap();
        let x = p.to_physical(&[0.3; 10]);
        assert_eq!(p.evaluate(&x).unwrap(), p.evaluate(&x).unwrap());
    }

    #[test]
    fn out_of_box_rejected() {
        let p = ProblemSpec::builtin("branin").unwrap();
        assert!(matches!(p.evaluate(&[11.0, 0.0]), Err(EvalError::OutOfBounds { index: 0, .. })));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = include_str!("../../problems/branin.toml").replace("direction", "dirn");
        assert!(ProblemSpec::from_toml(&text).is_err());
    }
}

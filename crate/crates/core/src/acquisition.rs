//! Closed-form acquisition functions and the feasibility-scaled triple
//! handed to the multi-objective search.
//!
//! Everything here maximizes. Minimized metrics are negated before they
//! reach this module.

use serde::{Deserialize, Serialize};

use crate::stats::{norm_cdf, norm_pdf};

/// Variance floor used when converting a variance to a standard deviation.
pub const VAR_EPS: f64 = 1e-12;
/// Default exploration weight for [`upper_confidence_bound`].
pub const DEFAULT_BETA: f64 = 2.0;

fn std_dev(v: f64) -> f64 {
    v.max(VAR_EPS).sqrt()
}

/// `Φ((μ - y†)/σ)`; a zero-variance posterior gives a step function.
pub fn probability_of_improvement(mu: f64, var: f64, incumbent: f64) -> f64 {
    if var <= 0.0 {
        return if mu > incumbent { 1.0 } else { 0.0 };
    }
    norm_cdf((mu - incumbent) / std_dev(var))
}

/// `(μ - y†)Φ(u) + σφ(u)` with `u = (μ - y†)/σ`.
pub fn expected_improvement(mu: f64, var: f64, incumbent: f64) -> f64 {
    let diff = mu - incumbent;
    if var <= 0.0 {
        return diff.max(0.0);
    }
    let sigma = std_dev(var);
    let u = diff / sigma;
    (diff * norm_cdf(u) + sigma * norm_pdf(u)).max(0.0)
}

/// `μ + β·v` with `v` the variance.
pub fn upper_confidence_bound(mu: f64, var: f64, beta: f64) -> f64 {
    mu + beta * var
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintDirection {
    /// Metric must be at least the threshold.
    #[serde(rename = ">=")]
    AtLeast,
    /// Metric must be at most the threshold.
    #[serde(rename = "<=")]
    AtMost,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub threshold: f64,
    pub direction: ConstraintDirection,
}

impl Constraint {
    pub fn at_least(threshold: f64) -> Self {
        Self {
            threshold,
            direction: ConstraintDirection::AtLeast,
        }
    }

    pub fn at_most(threshold: f64) -> Self {
        Self {
            threshold,
            direction: ConstraintDirection::AtMost,
        }
    }

    /// Signed margin, positive when satisfied.
    pub fn margin(&self, value: f64) -> f64 {
        match self.direction {
            ConstraintDirection::AtLeast => value - self.threshold,
            ConstraintDirection::AtMost => self.threshold - value,
        }
    }

    pub fn is_satisfied(&self, value: f64) -> bool {
        self.margin(value) >= 0.0
    }

    /// Amount by which `value` misses the threshold.
    pub fn violation(&self, value: f64) -> f64 {
        (-self.margin(value)).max(0.0)
    }

    /// `Φ(margin/σ)` under a Gaussian belief on the metric.
    pub fn probability(&self, mu: f64, var: f64) -> f64 {
        probability_of_improvement(self.margin(mu), var, 0.0)
    }
}

/// Per-point posterior moments for one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

/// Everything needed to score one candidate point.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionContext {
    pub objective: Moments,
    pub constraints: Vec<(Moments, Constraint)>,
    /// Best feasible objective so far, if any sample is feasible.
    pub incumbent: Option<f64>,
    pub beta: f64,
}

/// Product of per-constraint feasibility probabilities; 1 without constraints.
pub fn probability_of_feasibility(ctx: &AcquisitionContext) -> f64 {
    ctx.constraints
        .iter()
        .map(|(m, c)| c.probability(m.mean, m.var))
        .product()
}

/// `(UCB·PF, PI·PF, EI·PF)`. Without an incumbent the PI and EI slots are
/// replaced by PF itself, so the search seeks feasibility first.
pub fn mace_objectives(ctx: &AcquisitionContext) -> [f64; 3] {
    let pf = probability_of_feasibility(ctx);
    let Moments { mean, var } = ctx.objective;
    let ucb = upper_confidence_bound(mean, var, ctx.beta);
    match ctx.incumbent {
        Some(y) => [
            ucb * pf,
            probability_of_improvement(mean, var, y) * pf,
            expected_improvement(mean, var, y) * pf,
        ],
        None => [ucb * pf, pf, pf],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pi_reference_points() {
        assert_eq!(probability_of_improvement(1.0, 1.0, 1.0), 0.5);
        assert!((probability_of_improvement(2.0, 4.0, 0.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert_eq!(probability_of_improvement(-1.0, 0.0, 0.0), 0.0);
        assert_eq!(probability_of_improvement(1.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn ei_reference_points() {
        assert_eq!(expected_improvement(3.0, 0.0, 1.0), 2.0);
        assert!((expected_improvement(0.0, 1.0, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!(expected_improvement(-10.0, 1.0, 0.0) < 1e-20);
    }

    #[test]
    fn ucb_uses_variance() {
        assert_eq!(upper_confidence_bound(1.5, 3.0, 0.0), 1.5);
        assert_eq!(upper_confidence_bound(1.0, 4.0, 2.0), 9.0);
        assert_eq!(upper_confidence_bound(1.0, 0.0, 7.0), 1.0);
    }

    fn ctx(constraints: Vec<(Moments, Constraint)>, incumbent: Option<f64>) -> AcquisitionContext {
        AcquisitionContext {
            objective: Moments { mean: 0.3, var: 0.5 },
            constraints,
            incumbent,
            beta: DEFAULT_BETA,
        }
    }

    #[test]
    fn pf_on_boundary_is_half() {
        let c = ctx(vec![(Moments { mean: 2.0, var: 0.7 }, Constraint::at_least(2.0))], Some(0.0));
        assert_eq!(probability_of_feasibility(&c), 0.5);
        let c = ctx(
            vec![
                (Moments { mean: 2.0, var: 0.7 }, Constraint::at_least(2.0)),
                (Moments { mean: -1.0, var: 3.0 }, Constraint::at_most(-1.0)),
            ],
            Some(0.0),
        );
        assert_eq!(probability_of_feasibility(&c), 0.25);
    }

    #[test]
    fn pf_three_sigma_margins() {
        let m = |mean| (Moments { mean, var: 4.0 }, Constraint::at_least(0.0));
        let c = ctx(vec![m(6.0), m(6.0), m(6.0)], Some(0.0));
        let expected = 0.998_650_101_968_37f64.powi(3);
        assert!((probability_of_feasibility(&c) - expected).abs() < 1e-12);
        assert!((expected - 0.99596).abs() < 1e-5);
    }

    #[test]
    fn at_most_flips_margin() {
        let c = Constraint::at_most(6.0);
        assert!(c.probability(5.0, 1.0) > 0.5);
        assert_eq!(c.violation(7.5), 1.5);
        assert_eq!(Constraint::at_least(60.0).violation(55.0), 5.0);
    }

    #[test]
    fn certain_feasibility_keeps_raw_acquisitions() {
        let c = ctx(vec![], Some(0.1));
        let t = mace_objectives(&c);
        assert_eq!(t[0], upper_confidence_bound(0.3, 0.5, DEFAULT_BETA));
        assert_eq!(t[1], probability_of_improvement(0.3, 0.5, 0.1));
        assert_eq!(t[2], expected_improvement(0.3, 0.5, 0.1));
    }

    #[test]
    fn infeasible_point_scores_zero() {
        let c = ctx(vec![(Moments { mean: -5.0, var: 0.0 }, Constraint::at_least(0.0))], Some(0.1));
        assert_eq!(probability_of_feasibility(&c), 0.0);
        assert_eq!(mace_objectives(&c), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn no_incumbent_falls_back_to_feasibility() {
        let c = ctx(vec![(Moments { mean: 1.0, var: 1.0 }, Constraint::at_least(0.0))], None);
        let pf = probability_of_feasibility(&c);
        let t = mace_objectives(&c);
        assert_eq!(t[1], pf);
        assert_eq!(t[2], pf);
        assert_eq!(t[0], upper_confidence_bound(0.3, 0.5, DEFAULT_BETA) * pf);
    }
}

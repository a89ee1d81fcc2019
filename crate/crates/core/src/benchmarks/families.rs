//! Smooth analytic stand-ins for amplifier and reference circuits.
//!
//! Every family is defined on unit-cube coordinates `z`. A member is the
//! family evaluated at `u = z - shift`, with an optional affine transform of
//! the objective metric, so related members have optima displaced by the
//! shift.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// d = 10; metrics I_total, PM, GBW, Gain.
    TwoStage,
    /// d = 12; metrics I_total, PM, GBW, Gain with a third stage.
    ThreeStage,
    /// d = 6; metrics TC, I, PSRR.
    Bandgap,
    /// d = 2; Branin on [-5, 10] × [0, 15] and a disc constraint.
    Branin,
}

impl FamilyKind {
    pub fn dim(self) -> usize {
        match self {
            FamilyKind::TwoStage => 10,
            FamilyKind::ThreeStage => 12,
            FamilyKind::Bandgap => 6,
            FamilyKind::Branin => 2,
        }
    }

    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            FamilyKind::TwoStage | FamilyKind::ThreeStage => &["I_total", "PM", "GBW", "Gain"],
            FamilyKind::Bandgap => &["TC", "I", "PSRR"],
            FamilyKind::Branin => &["f", "g"],
        }
    }

    /// Raw metric vector at shifted coordinates `u`.
    pub fn eval(self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.dim());
        match self {
            FamilyKind::TwoStage => two_stage(u),
            FamilyKind::ThreeStage => three_stage(u),
            FamilyKind::Bandgap => bandgap(u),
            FamilyKind::Branin => branin_pair(u),
        }
    }
}

/// Positive, smooth stand-in for a bias current.
fn bias(u: f64) -> f64 {
    0.02 + crate::stats::softplus(8.0 * u) / 8.0
}

fn compensation(u: f64) -> f64 {
    0.3 + crate::stats::softplus(4.0 * u) / 4.0
}

fn phase_lag_deg(gbw: f64, pole: f64) -> f64 {
    (gbw / pole).atan().to_degrees()
}

fn two_stage(u: &[f64]) -> Vec<f64> {
    let g1 = bias(u[0]);
    let g2 = bias(u[1]);
    let cc = compensation(u[2]);
    let gbw = 6.0 * g1 / cc * (1.0 + 0.1 * (2.0 * PI * u[5]).sin());
    let p2 = 20.0 * g2 / (0.4 + 0.6 * u[8] * u[8]);
    let pm = 90.0 - phase_lag_deg(gbw, p2);
    let gain = 30.0 + 25.0 * (2.0 * (u[3] + 0.2)).tanh() + 20.0 * (2.0 * (u[6] + 0.2)).tanh()
        - 15.0 * (u[7] - 0.5).powi(2)
        - 8.0 * g1
        - 6.0 * g2
        + 2.0 * (3.0 * u[9]).cos();
    let current = 1.0 + 5.0 * g1 + 8.0 * g2 + 0.5 * u[4] * u[4];
    vec![current, pm, gbw, gain]
}

fn three_stage(u: &[f64]) -> Vec<f64> {
    let g1 = bias(u[0]);
    let g2 = bias(u[1]);
    let g3 = bias(u[2]);
    let cc = compensation(u[3]);
    let gbw = 4.0 * g1 / cc * (1.0 + 0.1 * (2.0 * PI * u[6]).sin());
    let p2 = 25.0 * g2 / (0.4 + 0.6 * u[7] * u[7]);
    let p3 = 25.0 * g3 / (0.4 + 0.6 * u[8] * u[8]);
    let pm = 90.0 - phase_lag_deg(gbw, p2) - phase_lag_deg(gbw, p3);
    let gain = 20.0
        + 22.0 * (2.0 * (u[4] + 0.2)).tanh()
        + 22.0 * (2.0 * (u[5] + 0.2)).tanh()
        + 22.0 * (2.0 * (u[9] + 0.2)).tanh()
        - 15.0 * (u[10] - 0.5).powi(2)
        - 5.0 * (g1 + g2 + g3)
        + 2.0 * (3.0 * u[11]).cos();
    let current = 1.0 + 4.0 * g1 + 6.0 * g2 + 6.0 * g3 + 0.5 * u[11] * u[11];
    vec![current, pm, gbw, gain]
}

fn bandgap(u: &[f64]) -> Vec<f64> {
    let tc = 5.0
        + 40.0 * (u[0] - 0.5 - 0.3 * u[1]).powi(2)
        + 20.0 * (u[2] - 0.4).powi(2)
        + 3.0 * (2.0 * PI * u[3]).sin().powi(2);
    let current = 2.0 + 6.0 * u[4] + 3.0 * u[1] * u[1] + 2.0 * u[2];
    let psrr = 30.0 + 30.0 * (3.0 * (u[5] + 0.1)).tanh() + 10.0 * u[4] + 8.0 * u[2] - 8.0 * (u[3] - 0.5).powi(2);
    vec![tc, current, psrr]
}

/// Branin-Hoo on `[-5, 10] × [0, 15]`.
pub fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

/// Squared distance from the centre of the Branin domain.
pub fn branin_disc(x1: f64, x2: f64) -> f64 {
    (x1 - 2.5).powi(2) + (x2 - 7.5).powi(2)
}

fn branin_pair(u: &[f64]) -> Vec<f64> {
    let x1 = -5.0 + 15.0 * u[0];
    let x2 = 15.0 * u[1];
    vec![branin(x1, x2), branin_disc(x1, x2)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branin_known_minimum() {
        assert!((branin(PI, 2.275) - 0.397_887_357_729_738).abs() < 1e-9);
        assert!(branin_disc(PI, 2.275) < 50.0);
        assert!(branin_disc(-PI, 12.275) > 50.0);
        assert!(branin_disc(9.424_78, 2.475) > 50.0);
    }

    #[test]
    fn metric_counts_match_names() {
        for k in [FamilyKind::TwoStage, FamilyKind::ThreeStage, FamilyKind::Bandgap, FamilyKind::Branin] {
            let u = vec![0.5; k.dim()];
            assert_eq!(k.eval(&u).len(), k.metric_names().len());
        }
    }

    #[test]
    fn two_stage_corner_matches_formula() {
        let u = vec![0.0; 10];
        let m = FamilyKind::TwoStage.eval(&u);
        let g = 0.02 + 2f64.ln() / 8.0;
        let cc = 0.3 + 2f64.ln() / 4.0;
        assert!((m[0] - (1.0 + 13.0 * g)).abs() < 1e-12);
        assert!((m[2] - 6.0 * g / cc).abs() < 1e-12);
    }
}

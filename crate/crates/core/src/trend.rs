//! Linear trends and single change points fitted to estimated year effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::optim::FitResult;
use crate::uncertainty::SandwichVariance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendTarget {
    Abundance,
    Presence,
}

/// Year effects with the first year as zero reference.
#[derive(Debug, Clone, PartialEq)]
pub struct YearEffects {
    pub effects: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub target: TrendTarget,
}

impl YearEffects {
    pub fn new(effects: DVector<f64>, cov: DMatrix<f64>, target: TrendTarget) -> Result<Self> {
        let p = effects.len();
        if cov.shape() != (p, p) {
            return Err(Error::Dimension {
                block: "year effects".into(),
                message: format!("{p} effects but a {:?} covariance", cov.shape()),
            });
        }
        Ok(YearEffects { effects, cov, target })
    }

    pub fn p(&self) -> usize {
        self.effects.len()
    }
}

/// Pulls the year-indicator block of β̂ (or γ̂) and its variance block,
/// prepending the zero reference year.
pub fn extract_year_effects(
    fit: &FitResult,
    design: &DesignMatrix,
    var: &SandwichVariance,
    target: TrendTarget,
) -> Result<YearEffects> {
    let cols = design.year_effect_columns().ok_or_else(|| {
        Error::UnsupportedDesign("year effects require the full site and year effects design".into())
    })?;
    let presence = matches!(target, TrendTarget::Presence);
    if presence && !fit.kind.has_presence() {
        return Err(Error::UnsupportedDesign("the fitted model has no presence layer".into()));
    }
    let coef = if presence { &fit.params.gamma } else { &fit.params.beta };
    let p = cols.len() + 1;
    let block = var.coefficient_block(cols.clone(), presence);
    let mut effects = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for (a, k) in cols.enumerate() {
        effects[a + 1] = coef[k];
    }
    for a in 0..p - 1 {
        for b in 0..p - 1 {
            cov[(a + 1, b + 1)] = 0.5 * (block[(a, b)] + block[(b, a)]);
        }
    }
    YearEffects::new(effects, cov, target)
}

/// Two-sided Gaussian p-value and |z| for an estimate with variance `var`.
/// A zero variance with a nonzero estimate yields p = 0 and |z| = ∞.
fn wald(estimate: f64, var: f64) -> (f64, f64) {
    if var > 0.0 {
        let z = (estimate / var.sqrt()).abs();
        (erfc(z / std::f64::consts::SQRT_2), z)
    } else if estimate != 0.0 {
        (0.0, f64::INFINITY)
    } else {
        (1.0, 0.0)
    }
}

/// OLS coefficients and their covariance propagated from `cov`.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>, cov: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let xtx = x.transpose() * x;
    let inv = xtx.try_inverse()?;
    let h = &inv * x.transpose();
    let tau = &h * y;
    let cov_tau = &h * cov * h.transpose();
    Some((tau, (&cov_tau + cov_tau.transpose()) * 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub tau0: f64,
    pub tau1: f64,
    pub cov_tau: [[f64; 2]; 2],
    pub slope_p_value: f64,
    /// Multiplicative change in the expected count (or presence odds) per year.
    pub annual_factor: f64,
    /// Slope variance is zero while the slope is not.
    pub degenerate: bool,
}

impl TrendFit {
    pub fn fitted(&self, p: usize) -> Vec<f64> {
        (1..=p).map(|t| self.tau0 + self.tau1 * t as f64).collect()
    }
}

/// Straight line through the effects against T = 1..p.
pub fn linear_trend(effects: &YearEffects) -> Result<TrendFit> {
    let p = effects.p();
    if p < 3 {
        return Err(Error::Config(format!("a trend needs at least 3 years, got {p}")));
    }
    let x = DMatrix::from_fn(p, 2, |j, c| if c == 0 { 1.0 } else { (j + 1) as f64 });
    let (tau, cov) = ols(&x, &effects.effects, &effects.cov).expect("a line through distinct years is estimable");
    let (pv, _) = wald(tau[1], cov[(1, 1)]);
    Ok(TrendFit {
        tau0: tau[0],
        tau1: tau[1],
        cov_tau: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        slope_p_value: pv,
        annual_factor: tau[1].exp(),
        degenerate: cov[(1, 1)] <= 0.0 && tau[1] != 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeCandidate {
    pub t: usize,
    pub taus: [f64; 3],
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointFit {
    /// Year index (1-based) after which the slope changes.
    pub delta_hat: usize,
    pub taus: [f64; 3],
    pub candidates: Vec<ChangeCandidate>,
    /// Candidates dropped because their design was singular.
    pub skipped: Vec<usize>,
    /// (p − 2) · p^δ̂.
    pub corrected_p: f64,
    pub significant: bool,
    pub alpha: f64,
}

impl ChangePointFit {
    pub fn p_values(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.p_value).collect()
    }

    /// Slopes before and after the change.
    pub fn segment_slopes(&self) -> (f64, f64) {
        (self.taus[1], self.taus[1] + self.taus[2])
    }

    pub fn fitted(&self, p: usize) -> Vec<f64> {
        let [t0, t1, t2] = self.taus;
        (1..=p)
            .map(|j| {
                let tj = j as f64;
                t0 + t1 * tj + t2 * (tj - self.delta_hat as f64).max(0.0)
            })
            .collect()
    }
}

/// Segmented regression over candidate change points t ∈ {2, …, p − 2}.
/// The smallest p-value is Bonferroni-corrected by the factor p − 2.
pub fn changepoint(effects: &YearEffects, alpha: f64) -> Result<ChangePointFit> {
    let p = effects.p();
    if p < 5 {
        return Err(Error::Config(format!("change-point search needs at least 5 years, got {p}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut candidates = Vec::new();
    let mut skipped = Vec::new();
    for t in 2..=p - 2 {
        let x = DMatrix::from_fn(p, 3, |j, c| {
            let tj = (j + 1) as f64;
            match c {
                0 => 1.0,
                1 => tj,
                _ => (tj - t as f64).max(0.0),
            }
        });
        match ols(&x, &effects.effects, &effects.cov) {
            Some((tau, cov)) => {
                let (pv, z) = wald(tau[2], cov[(2, 2)]);
                candidates.push(ChangeCandidate { t, taus: [tau[0], tau[1], tau[2]], z, p_value: pv });
            }
            None => skipped.push(t),
        }
    }
    // largest |z| is the smallest p-value without underflow ties; first wins ties
    let best = candidates
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (k, c)| match acc {
            Some((_, z)) if c.z <= z => acc,
            _ => Some((k, c.z)),
        })
        .map(|(k, _)| k)
        .ok_or_else(|| Error::Evaluation("every change-point candidate had a singular design".into()))?;
    let chosen = &candidates[best];
    let corrected_p = (p - 2) as f64 * chosen.p_value;
    Ok(ChangePointFit {
        delta_hat: chosen.t,
        taus: chosen.taus,
        corrected_p,
        significant: corrected_p < alpha,
        alpha,
        candidates,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(v: &[f64], cov: DMatrix<f64>) -> YearEffects {
        YearEffects::new(DVector::from_column_slice(v), cov, TrendTarget::Abundance).unwrap()
    }

    #[test]
    fn exact_line_without_noise() {
        let t = linear_trend(&fx(&[0.0, 1.0, 2.0, 3.0], DMatrix::zeros(4, 4))).unwrap();
        assert!((t.tau0 + 1.0).abs() < 1e-12 && (t.tau1 - 1.0).abs() < 1e-12);
        assert!(t.degenerate);
        assert_eq!(t.slope_p_value, 0.0);
    }

    #[test]
    fn flat_effects_have_unit_p_value() {
        let t = linear_trend(&fx(&[0.0; 4], DMatrix::identity(4, 4))).unwrap();
        assert_eq!(t.tau1, 0.0);
        assert!((t.slope_p_value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_covariance_gives_inverse_gram() {
        let t = linear_trend(&fx(&[0.0, 1.0, 2.0, 3.0], DMatrix::identity(4, 4))).unwrap();
        // XᵀX = [[4, 10], [10, 30]], inverse = [[1.5, -0.5], [-0.5, 0.2]]
        let expect = [[1.5, -0.5], [-0.5, 0.2]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((t.cov_tau[a][b] - expect[a][b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slope_equivariance() {
        let base = [0.0, 0.3, -0.2, 0.5, 0.1];
        let shifted: Vec<f64> = base.iter().enumerate().map(|(j, v)| v + 0.7 * (j + 1) as f64).collect();
        let a = linear_trend(&fx(&base, DMatrix::identity(5, 5))).unwrap();
        let b = linear_trend(&fx(&shifted, DMatrix::identity(5, 5))).unwrap();
        assert!((b.tau1 - a.tau1 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn planted_kink_is_found() {
        let p = 10;
        let v: Vec<f64> = (1..=p).map(|j| if j <= 5 { (j - 1) as f64 } else { 4.0 + 0.5 * (j - 5) as f64 }).collect();
        let c = changepoint(&fx(&v, DMatrix::identity(p, p) * 1e-6), 0.05).unwrap();
        assert_eq!(c.delta_hat, 5);
        assert!(c.corrected_p < 1e-6);
        let (before, after) = c.segment_slopes();
        assert!((before - 1.0).abs() < 1e-9 && (after - 0.5).abs() < 1e-9);
    }

    #[test]
    fn too_few_years_rejected() {
        assert!(changepoint(&fx(&[0.0; 4], DMatrix::identity(4, 4)), 0.05).is_err());
        assert!(linear_trend(&fx(&[0.0; 2], DMatrix::identity(2, 2))).is_err());
    }
}

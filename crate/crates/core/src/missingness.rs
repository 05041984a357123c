//! Artificial removal of observed cells under MCAR and MAR mechanisms, and
//! scoring of imputations against the removed truth.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use statrs::statistics::{Data, OrderStatistics};

use crate::error::{Error, Result};
use crate::panel::ObservedPanel;
use crate::uncertainty::ImputationResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Mcar,
    MarYear,
    MarSite,
    MarYearSite,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Mcar, Mechanism::MarYear, Mechanism::MarSite, Mechanism::MarYearSite];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Mcar => "mcar",
            Mechanism::MarYear => "mar_year",
            Mechanism::MarSite => "mar_site",
            Mechanism::MarYearSite => "mar_year_site",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown missingness mechanism '{s}'")))
    }
}

/// Shape of the MAR removal probabilities.
///
/// Year: probabilities fall linearly from `rate + a` in the first year to
/// `rate − a` in the last, with `a = year_strength · min(rate, 1 − rate)`.
/// Site: a random `site_fraction` of sites gets a higher probability than
/// the rest, with the gap scaled by `site_strength` up to the largest gap
/// that keeps both probabilities in [0, 1]. Both keep the mean at `rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarShape {
    pub year_strength: f64,
    pub site_fraction: f64,
    pub site_strength: f64,
}

impl Default for MarShape {
    fn default() -> Self {
        MarShape { year_strength: 0.8, site_fraction: 0.3, site_strength: 0.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingScenario {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub shape: MarShape,
}

impl MissingScenario {
    pub fn new(mechanism: Mechanism, rate: f64, seed: u64) -> Self {
        MissingScenario { mechanism, rate, seed, shape: MarShape::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("missing rate must lie in (0, 1), got {}", self.rate)));
        }
        let s = &self.shape;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(s.year_strength) || !unit(s.site_strength) || !(s.site_fraction > 0.0 && s.site_fraction < 1.0) {
            return Err(Error::Config(format!("invalid MAR shape {s:?}")));
        }
        Ok(())
    }
}

fn year_profile(rate: f64, strength: f64, p: usize) -> Vec<f64> {
    let a = strength * rate.min(1.0 - rate);
    (0..p)
        .map(|j| if p == 1 { rate } else { rate + a * (1.0 - 2.0 * j as f64 / (p - 1) as f64) })
        .collect()
}

fn site_profile(rate: f64, shape: &MarShape, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n < 2 {
        return vec![rate; n];
    }
    let k = ((shape.site_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let f = k as f64 / n as f64;
    let a = shape.site_strength * (rate / f).min((1.0 - rate) / (1.0 - f));
    let (hi, lo) = (rate + a * (1.0 - f), rate - a * f);
    let mut out = vec![lo; n];
    for i in sample(rng, n, k) {
        out[i] = hi;
    }
    out
}

/// Removal probability per cell, row-major.
pub fn removal_probabilities(scenario: &MissingScenario, n: usize, p: usize) -> Result<Vec<f64>> {
    scenario.validate()?;
    let rate = scenario.rate;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let probs = match scenario.mechanism {
        Mechanism::Mcar => vec![rate; n * p],
        Mechanism::MarYear => {
            let y = year_profile(rate, scenario.shape.year_strength, p);
            (0..n * p).map(|c| y[c % p]).collect()
        }
        Mechanism::MarSite => {
            let s = site_profile(rate, &scenario.shape, n, &mut rng);
            (0..n * p).map(|c| s[c / p]).collect()
        }
        Mechanism::MarYearSite => {
            let y = year_profile(rate, scenario.shape.year_strength, p);
            let s = site_profile(rate, &scenario.shape, n, &mut rng);
            let w: Vec<f64> = (0..n * p).map(|c| y[c % p] * s[c / p] / (rate * rate)).collect();
            // scale c so that mean(min(c w, 1)) = rate
            let mean_at = |c: f64| w.iter().map(|&v| (c * v).min(1.0)).sum::<f64>() / w.len() as f64;
            let (mut lo, mut hi) = (0.0, 1.0);
            while mean_at(hi) < rate {
                hi *= 2.0;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mean_at(mid) < rate {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            w.iter().map(|&v| (hi * v).min(1.0)).collect()
        }
    };
    Ok(probs)
}

/// Removes cells from a complete panel. Sites left without observations
/// get one uniformly chosen cell back.
pub fn degrade(panel: &ObservedPanel, scenario: &MissingScenario) -> Result<ObservedPanel> {
    if !panel.is_complete() {
        return Err(Error::Validation("degrade expects a complete panel".into()));
    }
    let (n, p) = (panel.n(), panel.p());
    let probs = removal_probabilities(scenario, n, p)?;
    // a separate stream so the site draw above does not shift the cell draws
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(1);
    let mut mask: Vec<bool> = probs.iter().map(|&pr| rng.random::<f64>() >= pr).collect();
    for row in mask.chunks_exact_mut(p) {
        if !row.iter().any(|&b| b) {
            row[rng.random_range(0..p)] = true;
        }
    }
    panel.restrict(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub site: usize,
    pub year: usize,
    pub truth: u64,
    pub point: f64,
    pub abs_error: f64,
    pub lo: f64,
    pub hi: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub coverage: f64,
    pub binomial_band: (f64, f64),
    pub in_band: bool,
    pub level: f64,
}

impl EvalReport {
    pub fn abs_errors(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.abs_error).collect()
    }

    pub fn interval_widths(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.hi - c.lo).collect()
    }

    pub fn mean_abs_error(&self) -> f64 {
        let e = self.abs_errors();
        e.iter().sum::<f64>() / e.len().max(1) as f64
    }
}

/// Central 95% range of Binomial(m, level) / m.
pub fn binomial_band(m: usize, level: f64) -> Result<(f64, f64)> {
    let b = Binomial::new(level, m as u64).map_err(|e| Error::Config(format!("binomial band: {e}")))?;
    let m = m as f64;
    Ok((b.inverse_cdf(0.025) as f64 / m, b.inverse_cdf(0.975) as f64 / m))
}

/// Scores an imputation of the removed cells against the complete truth.
pub fn evaluate(truth: &ObservedPanel, degraded: &ObservedPanel, imputation: &ImputationResult) -> Result<EvalReport> {
    let cells = degraded.missing_cells();
    if cells.len() != imputation.cells.len()
        || cells.iter().zip(&imputation.cells).any(|(&(i, j), c)| c.site != i || c.year != j)
    {
        return Err(Error::Evaluation(format!(
            "imputation covers {} cells but the degraded panel has {} missing cells in a different order or set",
            imputation.cells.len(),
            cells.len()
        )));
    }
    if cells.is_empty() {
        return Err(Error::Evaluation("no missing cells to evaluate".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for c in &imputation.cells {
        let y = truth
            .count(c.site, c.year)
            .ok_or_else(|| Error::Evaluation(format!("truth has no value at site {} year {}", c.site, c.year)))?;
        let (lo, hi) = c
            .pi
            .ok_or_else(|| Error::Evaluation("imputation carries no prediction intervals".into()))?;
        let yf = y as f64;
        out.push(EvalCell {
            site: c.site,
            year: c.year,
            truth: y,
            point: c.point,
            abs_error: (c.point - yf).abs(),
            lo,
            hi,
            covered: lo <= yf && yf <= hi,
        });
    }
    let m = out.len();
    let coverage = out.iter().filter(|c| c.covered).count() as f64 / m as f64;
    let band = binomial_band(m, imputation.level)?;
    Ok(EvalReport {
        cells: out,
        coverage,
        in_band: band.0 <= coverage && coverage <= band.1,
        binomial_band: band,
        level: imputation.level,
    })
}

/// Per-cell ratios |error A| / |error B| with box-plot quartiles over the
/// finite ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub ratios: Vec<f64>,
    /// Cells where B is exact and A is not.
    pub infinite: usize,
    /// Cells where both are exact, counted as ratio 1.
    pub both_exact: usize,
    /// Minimum, lower quartile, median, upper quartile, maximum.
    pub quartiles: [f64; 5],
}

pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<RatioSummary> {
    if a.cells.len() != b.cells.len() || a.cells.iter().zip(&b.cells).any(|(x, y)| (x.site, x.year) != (y.site, y.year)) {
        return Err(Error::Evaluation("reports cover different cells".into()));
    }
    let mut infinite = 0;
    let mut both_exact = 0;
    let ratios: Vec<f64> = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(x, y)| match (x.abs_error == 0.0, y.abs_error == 0.0) {
            (true, true) => {
                both_exact += 1;
                1.0
            }
            (false, true) => {
                infinite += 1;
                f64::INFINITY
            }
            _ => x.abs_error / y.abs_error,
        })
        .collect();
    let finite: Vec<f64> = ratios.iter().copied().filter(|r| r.is_finite()).collect();
    let quartiles = if finite.is_empty() {
        [f64::NAN; 5]
    } else {
        let mut d = Data::new(finite);
        [d.quantile(0.0), d.lower_quartile(), d.median(), d.upper_quartile(), d.quantile(1.0)]
    };
    Ok(RatioSummary { ratios, infinite, both_exact, quartiles })
}

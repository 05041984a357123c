//! Sandwich variance of θ̂, point imputation of missing counts, and Monte
//! Carlo confidence and prediction intervals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::elbo::{Elbo, ThetaLayout, VariationalParams, EXP_CAP};
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, solve_symmetric, symmetric_inverse, symmetrize};
use crate::model::ModelParams;
use crate::numeric::{poisson_f64, sorted_quantile, standard_normal, substream};
use crate::optim::{ve_step, FitResult};
use crate::panel::ObservedPanel;

/// Sweeps and tolerance of the VE-step run before the sandwich.
const SANDWICH_VE_TOL: f64 = 1e-12;
const SANDWICH_VE_SWEEPS: usize = 200;
/// Relaxed VE-step used inside the particle loop.
const PARTICLE_VE_TOL: f64 = 1e-4;
const PARTICLE_VE_SWEEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichVariance {
    pub layout: ThetaLayout,
    /// (1/n) Σ_i of the profiled second derivative of J_i in θ.
    pub c_hat: DMatrix<f64>,
    /// (1/n) Σ_i ∇_θJ_i ∇_θJ_iᵀ.
    pub d_hat: DMatrix<f64>,
    /// Ĉ⁻¹ D̂ Ĉ⁻¹ / n, an estimate of Var(θ̂).
    pub var_hat: DMatrix<f64>,
    /// −Ĉ⁻¹ / n, the inverse profiled information. Unlike `var_hat` it stays
    /// informative for coefficients that only one site touches, whose
    /// per-site score vanishes at the optimum.
    pub info_var: DMatrix<f64>,
    /// Mean of the per-site θ-gradients.
    pub mean_grad: DVector<f64>,
}

impl SandwichVariance {
    /// Plug-in standard errors of β.
    pub fn beta_se(&self) -> DVector<f64> {
        diag_se(&self.var_hat, (0..self.layout.d).collect())
    }

    /// Plug-in standard errors of γ (empty under PLN).
    pub fn gamma_se(&self) -> DVector<f64> {
        diag_se(&self.var_hat, self.gamma_indices())
    }

    /// Standard errors of β from the inverse information.
    pub fn beta_se_info(&self) -> DVector<f64> {
        diag_se(&self.info_var, (0..self.layout.d).collect())
    }

    pub fn gamma_se_info(&self) -> DVector<f64> {
        diag_se(&self.info_var, self.gamma_indices())
    }

    fn gamma_indices(&self) -> Vec<usize> {
        if !self.layout.kind.has_presence() {
            return Vec::new();
        }
        (0..self.layout.d).map(|k| self.layout.gamma(k)).collect()
    }

    /// Variance block of the coefficients `cols` of β (or γ when `presence`).
    pub fn coefficient_block(&self, cols: std::ops::Range<usize>, presence: bool) -> DMatrix<f64> {
        let idx: Vec<usize> = cols
            .map(|k| if presence { self.layout.gamma(k) } else { self.layout.beta(k) })
            .collect();
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.var_hat[(idx[a], idx[b])])
    }

    /// A zero variance for the given layout, which removes parameter
    /// uncertainty from the interval algorithms.
    pub fn zero(layout: ThetaLayout) -> Self {
        let k = layout.len();
        SandwichVariance {
            layout,
            c_hat: DMatrix::zeros(k, k),
            d_hat: DMatrix::zeros(k, k),
            var_hat: DMatrix::zeros(k, k),
            info_var: DMatrix::zeros(k, k),
            mean_grad: DVector::zeros(k),
        }
    }
}

fn diag_se(var: &DMatrix<f64>, idx: Vec<usize>) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.into_iter().map(|k| var[(k, k)].max(0.0).sqrt()))
}

fn describe_direction(layout: &ThetaLayout, v: &DVector<f64>) -> String {
    let k = v.iamax();
    let name = if k < layout.d {
        format!("beta[{k}]")
    } else if layout.kind.has_presence() && k < 2 * layout.d {
        format!("gamma[{}]", k - layout.d)
    } else {
        let r = k - layout.loading_offset();
        format!("loading[{}, {}]", r / layout.q, r % layout.q)
    };
    format!("null direction dominated by {name} (weight {:.3})", v[k])
}

/// Sandwich variance at the fitted θ̂, after re-optimizing ψ tightly.
pub fn sandwich(panel: &ObservedPanel, design: &DesignMatrix, fit: &FitResult) -> Result<SandwichVariance> {
    let elbo = Elbo::new(panel, design, fit.kind)?;
    let vp = ve_step(&elbo, &fit.params, &fit.varparams, None, SANDWICH_VE_TOL, SANDWICH_VE_SWEEPS)?;
    sandwich_at(&elbo, &fit.params, &vp)
}

/// Sandwich variance at a given (θ, ψ) without re-optimizing ψ.
pub fn sandwich_at(elbo: &Elbo, params: &ModelParams, vp: &VariationalParams) -> Result<SandwichVariance> {
    let n = elbo.panel.n();
    let layout = elbo.layout(params.q());
    let k = layout.len();
    elbo.check_shapes(params, vp)?;
    let pred = elbo.predictors(params);

    type Contribution = (Vec<usize>, DMatrix<f64>, DVector<f64>);
    let contributions: Vec<Contribution> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Contribution> {
            let sh = elbo.site_hessian_with(&pred, params, vp, i)?;
            let neg = -&sh.h_pp;
            let x = solve_symmetric(&neg, &sh.h_tp.transpose()).ok_or_else(|| {
                Error::SingularInformation(format!("variational curvature of site {i} is singular"))
            })?;
            // H_tt − H_tp H_pp⁻¹ H_ptᵀ = H_tt + H_tp (−H_pp)⁻¹ H_ptᵀ
            let profiled = &sh.h_tt + &sh.h_tp * x;
            Ok((sh.theta_index, profiled, sh.grad_theta))
        })
        .collect::<Result<_>>()?;

    let mut c_sum = DMatrix::zeros(k, k);
    let mut d_sum = DMatrix::zeros(k, k);
    let mut g_sum = DVector::zeros(k);
    for (idx, h, g) in &contributions {
        for (a, &ga) in idx.iter().enumerate() {
            g_sum[ga] += g[a];
            for (b, &gb) in idx.iter().enumerate() {
                c_sum[(ga, gb)] += h[(a, b)];
                d_sum[(ga, gb)] += g[a] * g[b];
            }
        }
    }
    let nf = n as f64;
    let c_hat = symmetrize(&(c_sum / nf));
    let d_hat = symmetrize(&(d_sum / nf));
    let c_inv = symmetric_inverse(&c_hat, 1e-13).map_err(|dir| {
        Error::SingularInformation(format!("profiled information is singular; {}", describe_direction(&layout, &dir)))
    })?;
    let var_hat = symmetrize(&(&c_inv * &d_hat * &c_inv / nf));
    let info_var = symmetrize(&(-&c_inv / nf));
    Ok(SandwichVariance { layout, c_hat, d_hat, var_hat, info_var, mean_grad: g_sum / nf })
}

// ---------------------------------------------------------------------------
// Point imputation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationMode {
    Conditional,
    Marginal,
}

impl std::fmt::Display for ImputationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImputationMode::Conditional => "conditional",
            ImputationMode::Marginal => "marginal",
        })
    }
}

/// Conditional expectation ξ̃ exp(η + C_jᵀm_i + ½ C_jᵀS_iC_j) with ξ̃ the
/// prior presence probability, for one cell.
fn conditional_mean(
    params: &ModelParams,
    vp: &VariationalParams,
    eta: f64,
    presence: f64,
    i: usize,
    j: usize,
) -> f64 {
    let mut la = eta;
    for k in 0..params.q() {
        let c = params.loading[(j, k)];
        la += c * vp.means[(i, k)] + 0.5 * c * c * vp.vars[(i, k)];
    }
    presence * la.exp()
}

/// Conditional point predictions on the missing cells, in `missing_cells` order.
pub fn impute_conditional(panel: &ObservedPanel, design: &DesignMatrix, fit: &FitResult) -> Result<Vec<f64>> {
    check_design(panel, design, &fit.params)?;
    let eta = design.linear_predictor(&fit.params.beta);
    let zeta = design.linear_predictor(&fit.params.gamma);
    Ok(panel
        .missing_cells()
        .into_iter()
        .map(|(i, j)| {
            let pi = fit.kind.presence(zeta[(i, j)]);
            conditional_mean(&fit.params, &fit.varparams, eta[(i, j)], pi, i, j)
        })
        .collect())
}

/// Marginal point predictions π exp(η + σ_jj/2) on the missing cells.
pub fn impute_marginal(panel: &ObservedPanel, design: &DesignMatrix, fit: &FitResult) -> Result<Vec<f64>> {
    check_design(panel, design, &fit.params)?;
    let eta = design.linear_predictor(&fit.params.beta);
    let zeta = design.linear_predictor(&fit.params.gamma);
    let s2 = fit.params.sigma_diag();
    Ok(panel
        .missing_cells()
        .into_iter()
        .map(|(i, j)| fit.kind.presence(zeta[(i, j)]) * (eta[(i, j)] + 0.5 * s2[j]).exp())
        .collect())
}

fn check_design(panel: &ObservedPanel, design: &DesignMatrix, params: &ModelParams) -> Result<()> {
    if design.n() != panel.n() || design.p() != panel.p() || design.d() != params.d() {
        return Err(Error::Dimension {
            block: "design".into(),
            message: "design does not match the panel or the fitted coefficients".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Monte Carlo intervals

/// Per-cell interval record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInterval {
    pub site: usize,
    pub year: usize,
    pub point: f64,
    pub ci: (f64, f64),
    /// Integer-valued bounds stored as reals so extreme tails are kept.
    pub pi: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationResult {
    pub cells: Vec<CellInterval>,
    pub mode: ImputationMode,
    pub particles: usize,
    pub level: f64,
}

/// Sorted particle draws per missing cell, reusable across levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Particles {
    pub cells: Vec<(usize, usize)>,
    pub point: Vec<f64>,
    /// Per cell, sorted draws of the expected count.
    pub expected: Vec<Vec<f64>>,
    /// Per cell, sorted draws of the count; absent when only the expected
    /// count was simulated.
    pub counts: Option<Vec<Vec<f64>>>,
    pub mode: ImputationMode,
    /// Parameter draws rejected for overflow.
    pub rejected: usize,
}

impl Particles {
    pub fn b(&self) -> usize {
        self.expected.first().map_or(0, |v| v.len())
    }

    pub fn intervals(&self, level: f64) -> Result<ImputationResult> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
        }
        let alpha = 1.0 - level;
        let cells = self
            .cells
            .iter()
            .enumerate()
            .map(|(c, &(i, j))| CellInterval {
                site: i,
                year: j,
                point: self.point[c],
                ci: (
                    sorted_quantile(&self.expected[c], alpha / 2.0),
                    sorted_quantile(&self.expected[c], 1.0 - alpha / 2.0),
                ),
                pi: self.counts.as_ref().map(|y| {
                    (sorted_quantile(&y[c], alpha / 2.0), sorted_quantile(&y[c], 1.0 - alpha / 2.0))
                }),
            })
            .collect();
        Ok(ImputationResult { cells, mode: self.mode, particles: self.b(), level })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalConfig {
    pub particles: usize,
    pub seed: u64,
    /// Simulate counts for prediction intervals (otherwise confidence intervals only).
    pub predict: bool,
}

impl IntervalConfig {
    pub fn new(particles: usize, seed: u64) -> Self {
        IntervalConfig { particles, seed, predict: true }
    }
}

/// Draws θ^b = θ̂ + L z with L Lᵀ = Var.
struct ThetaSampler {
    layout: ThetaLayout,
    center: DVector<f64>,
    factor: DMatrix<f64>,
}

impl ThetaSampler {
    fn new(fit: &FitResult, var: &SandwichVariance) -> Result<Self> {
        let layout = var.layout;
        if layout.len() != ThetaLayout::new(fit.params.d(), fit.params.p(), fit.params.q(), fit.kind).len() {
            return Err(Error::Dimension {
                block: "sandwich".into(),
                message: "variance does not match the fitted parameter layout".into(),
            });
        }
        Ok(ThetaSampler { layout, center: layout.flatten(&fit.params), factor: psd_sqrt(&var.var_hat) })
    }

    fn draw<R: Rng>(&self, rng: &mut R, template: &ModelParams) -> ModelParams {
        let z = DVector::from_fn(self.factor.ncols(), |_, _| standard_normal(rng));
        let theta = &self.center + &self.factor * z;
        self.layout.unflatten(&theta, template)
    }
}

fn check_particles(cfg: &IntervalConfig) -> Result<()> {
    if cfg.particles < 100 {
        return Err(Error::Config(format!("at least 100 particles are required, got {}", cfg.particles)));
    }
    Ok(())
}

fn sort_columns(mut rows: Vec<Vec<f64>>, cells: usize) -> Vec<Vec<f64>> {
    let b = rows.len();
    let mut out = vec![Vec::with_capacity(b); cells];
    for row in rows.drain(..) {
        for (c, v) in row.into_iter().enumerate() {
            out[c].push(v);
        }
    }
    for v in &mut out {
        v.sort_by(f64::total_cmp);
    }
    out
}

/// Particle draws for conditional intervals: per particle, θ^b from the
/// Gaussian approximation, a warm-started VE-step on the affected sites,
/// then the conditional mean and a simulated count from the variational
/// posterior of the site factors.
pub fn particles_conditional(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    fit: &FitResult,
    var: &SandwichVariance,
    cfg: &IntervalConfig,
) -> Result<Particles> {
    check_particles(cfg)?;
    check_design(panel, design, &fit.params)?;
    let elbo = Elbo::new(panel, design, fit.kind)?;
    let sampler = ThetaSampler::new(fit, var)?;
    let cells = panel.missing_cells();
    let mut sites: Vec<usize> = cells.iter().map(|c| c.0).collect();
    sites.dedup();
    let point = impute_conditional(panel, design, fit)?;
    let q = fit.params.q();
    let cap = 10 * cfg.particles;

    type Draw = (Vec<f64>, Vec<f64>, usize);
    let draws: Vec<Draw> = (0..cfg.particles)
        .into_par_iter()
        .map(|b| -> Result<Draw> {
            let mut rng = substream(cfg.seed, b as u64);
            let mut rejected = 0;
            loop {
                let theta = sampler.draw(&mut rng, &fit.params);
                let vp = ve_step(&elbo, &theta, &fit.varparams, Some(&sites), PARTICLE_VE_TOL, PARTICLE_VE_SWEEPS)?;
                let eta = design.linear_predictor(&theta.beta);
                let zeta = design.linear_predictor(&theta.gamma);
                let overflow = sites.iter().any(|&i| {
                    (0..panel.p()).any(|j| Elbo::log_a(eta[(i, j)], &theta.loading, &vp, i, j) > EXP_CAP)
                });
                if overflow {
                    rejected += 1;
                    if rejected > cap {
                        return Err(Error::SamplingAborted(format!(
                            "more than {cap} parameter draws overflowed for particle {b}"
                        )));
                    }
                    continue;
                }
                let mut expected = Vec::with_capacity(cells.len());
                let mut counts = Vec::with_capacity(if cfg.predict { cells.len() } else { 0 });
                let mut w_site: Option<(usize, DVector<f64>)> = None;
                for &(i, j) in &cells {
                    let pi = fit.kind.presence(zeta[(i, j)]);
                    expected.push(conditional_mean(&theta, &vp, eta[(i, j)], pi, i, j));
                    if cfg.predict {
                        if w_site.as_ref().map_or(true, |(s, _)| *s != i) {
                            let w = DVector::from_fn(q, |k, _| {
                                vp.means[(i, k)] + vp.vars[(i, k)].sqrt() * standard_normal(&mut rng)
                            });
                            w_site = Some((i, w));
                        }
                        let w = &w_site.as_ref().unwrap().1;
                        let z = (theta.loading.row(j) * w)[0];
                        let present = rng.random::<f64>() < pi;
                        counts.push(if present { poisson_f64(&mut rng, (eta[(i, j)] + z).exp()) } else { 0.0 });
                    }
                }
                return Ok((expected, counts, rejected));
            }
        })
        .collect::<Result<_>>()?;
    assemble(cells, point, draws, cfg.predict, ImputationMode::Conditional)
}

/// Particle draws for marginal intervals: θ^b, the marginal mean, and a
/// count simulated with site factors from their prior.
pub fn particles_marginal(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    fit: &FitResult,
    var: &SandwichVariance,
    cfg: &IntervalConfig,
) -> Result<Particles> {
    check_particles(cfg)?;
    check_design(panel, design, &fit.params)?;
    let sampler = ThetaSampler::new(fit, var)?;
    let cells = panel.missing_cells();
    let point = impute_marginal(panel, design, fit)?;
    let q = fit.params.q();
    let cap = 10 * cfg.particles;

    type Draw = (Vec<f64>, Vec<f64>, usize);
    let draws: Vec<Draw> = (0..cfg.particles)
        .into_par_iter()
        .map(|b| -> Result<Draw> {
            let mut rng = substream(cfg.seed, b as u64);
            let mut rejected = 0;
            loop {
                let theta = sampler.draw(&mut rng, &fit.params);
                let eta = design.linear_predictor(&theta.beta);
                let zeta = design.linear_predictor(&theta.gamma);
                let s2 = theta.sigma_diag();
                if cells.iter().any(|&(i, j)| eta[(i, j)] + 0.5 * s2[j] > EXP_CAP) {
                    rejected += 1;
                    if rejected > cap {
                        return Err(Error::SamplingAborted(format!(
                            "more than {cap} parameter draws overflowed for particle {b}"
                        )));
                    }
                    continue;
                }
                let mut expected = Vec::with_capacity(cells.len());
                let mut counts = Vec::new();
                let mut w_site: Option<(usize, DVector<f64>)> = None;
                for &(i, j) in &cells {
                    let pi = fit.kind.presence(zeta[(i, j)]);
                    expected.push(pi * (eta[(i, j)] + 0.5 * s2[j]).exp());
                    if cfg.predict {
                        if w_site.as_ref().map_or(true, |(s, _)| *s != i) {
                            w_site = Some((i, DVector::from_fn(q, |_, _| standard_normal(&mut rng))));
                        }
                        let w = &w_site.as_ref().unwrap().1;
                        let z = (theta.loading.row(j) * w)[0];
                        let present = rng.random::<f64>() < pi;
                        counts.push(if present { poisson_f64(&mut rng, (eta[(i, j)] + z).exp()) } else { 0.0 });
                    }
                }
                return Ok((expected, counts, rejected));
            }
        })
        .collect::<Result<_>>()?;
    assemble(cells, point, draws, cfg.predict, ImputationMode::Marginal)
}

fn assemble(
    cells: Vec<(usize, usize)>,
    point: Vec<f64>,
    draws: Vec<(Vec<f64>, Vec<f64>, usize)>,
    predict: bool,
    mode: ImputationMode,
) -> Result<Particles> {
    let m = cells.len();
    let rejected = draws.iter().map(|d| d.2).sum();
    let (exp_rows, count_rows): (Vec<Vec<f64>>, Vec<Vec<f64>>) = draws.into_iter().map(|d| (d.0, d.1)).unzip();
    Ok(Particles {
        cells,
        point,
        expected: sort_columns(exp_rows, m),
        counts: predict.then(|| sort_columns(count_rows, m)),
        mode,
        rejected,
    })
}

pub fn intervals_conditional(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    fit: &FitResult,
    var: &SandwichVariance,
    cfg: &IntervalConfig,
    level: f64,
) -> Result<ImputationResult> {
    particles_conditional(panel, design, fit, var, cfg)?.intervals(level)
}

pub fn intervals_marginal(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    fit: &FitResult,
    var: &SandwichVariance,
    cfg: &IntervalConfig,
    level: f64,
) -> Result<ImputationResult> {
    particles_marginal(panel, design, fit, var, cfg)?.intervals(level)
}

//! Variational EM: initialization, block ascent on the ELBO, and selection
//! of the latent dimension.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{restricted_full_rank, DesignMatrix, Standardization};
use crate::elbo::{is_free, Elbo, ModelKind, Predictors, ThetaLayout, VariationalParams, EXP_CAP, XI_MAX, XI_MIN};
use crate::error::{Error, Result};
use crate::linalg::{solve_symmetric, sorted_eigen};
use crate::model::ModelParams;
use crate::numeric::{bernoulli_entropy, logit, sigmoid, softplus};
use crate::panel::ObservedPanel;

/// Latent dimension: fixed, or an inclusive range to select from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSpec {
    Fixed(usize),
    Range(usize, usize),
}

impl QSpec {
    pub fn values(&self) -> Vec<usize> {
        match *self {
            QSpec::Fixed(q) => vec![q],
            QSpec::Range(lo, hi) => (lo..=hi).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Exact or Newton updates per parameter block, each with step halving.
    #[default]
    BlockNewton,
    /// Joint gradient ascent over all parameters with an adaptive step.
    AdaptiveFirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Bic,
    Icl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub q: QSpec,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub step_rule: StepRule,
    pub seed: u64,
    pub criterion: Criterion,
    pub model: ModelKind,
    /// Fit on standardized measured covariates and report original-scale coefficients.
    pub standardize: bool,
    /// Reuse the previous fit when moving through a q range.
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            q: QSpec::Fixed(1),
            max_iters: 2000,
            rel_tol: 1e-6,
            step_rule: StepRule::BlockNewton,
            seed: 0,
            criterion: Criterion::Bic,
            model: ModelKind::ZeroInflated,
            standardize: true,
            warm_start: true,
        }
    }
}

impl FitConfig {
    pub fn with_q(q: usize) -> Self {
        FitConfig { q: QSpec::Fixed(q), ..Default::default() }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        let qs = self.q.values();
        if qs.is_empty() {
            return Err(Error::Config("empty latent dimension range".into()));
        }
        if let Some(&bad) = qs.iter().find(|&&q| q < 1 || q > p) {
            return Err(Error::Config(format!("latent dimension {bad} outside [1, {p}]")));
        }
        Ok(())
    }
}

/// One row of the latent-dimension comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub q: usize,
    pub elbo: Option<f64>,
    pub bic: Option<f64>,
    pub icl: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    pub varparams: VariationalParams,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub q_selected: usize,
    pub criterion_table: Vec<CriterionRow>,
    pub standardization: Standardization,
    pub kind: ModelKind,
    pub config: FitConfig,
}

impl FitResult {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("trace holds at least the initial value")
    }

    pub fn iterations(&self) -> usize {
        self.elbo_trace.len() - 1
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
        };
        serde_json::json!({
            "model": self.kind,
            "q": self.q_selected,
            "converged": self.converged,
            "iterations": self.iterations(),
            "elbo": self.elbo(),
            "params": {
                "beta": self.params.beta.as_slice(),
                "gamma": if self.kind.has_presence() { Some(self.params.gamma.as_slice()) } else { None },
                "loading": mat(&self.params.loading),
            },
            "varparams": {
                "xi": mat(&self.varparams.xi),
                "means": mat(&self.varparams.means),
                "vars": mat(&self.varparams.vars),
            },
            "elbo_trace": self.elbo_trace,
            "criterion_table": self.criterion_table,
            "standardization": self.standardization,
            "config": self.config,
            "seed": self.config.seed,
        })
    }

    /// Rebuilds a fit from [`to_json`](Self::to_json) output.
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let bad = |what: &str| Error::Validation(format!("fit document: missing or malformed {what}"));
        let vec = |x: &serde_json::Value, what: &str| -> Result<Vec<f64>> {
            serde_json::from_value(x.clone()).map_err(|_| bad(what))
        };
        let mat = |x: &serde_json::Value, what: &str| -> Result<DMatrix<f64>> {
            let rows: Vec<Vec<f64>> = serde_json::from_value(x.clone()).map_err(|_| bad(what))?;
            let r = rows.len();
            let c = rows.first().map_or(0, |x| x.len());
            if rows.iter().any(|x| x.len() != c) {
                return Err(bad(what));
            }
            Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
        };
        let kind: ModelKind = serde_json::from_value(v["model"].clone()).map_err(|_| bad("model"))?;
        let beta = DVector::from_vec(vec(&v["params"]["beta"], "beta")?);
        let gamma = if kind.has_presence() {
            DVector::from_vec(vec(&v["params"]["gamma"], "gamma")?)
        } else {
            DVector::zeros(beta.len())
        };
        let loading = mat(&v["params"]["loading"], "loading")?;
        let params = ModelParams::new(beta, gamma, loading)?;
        let varparams = VariationalParams {
            xi: mat(&v["varparams"]["xi"], "xi")?,
            means: mat(&v["varparams"]["means"], "means")?,
            vars: mat(&v["varparams"]["vars"], "vars")?,
        };
        Ok(FitResult {
            q_selected: params.q(),
            params,
            varparams,
            elbo_trace: vec(&v["elbo_trace"], "elbo_trace")?,
            converged: v["converged"].as_bool().ok_or_else(|| bad("converged"))?,
            criterion_table: serde_json::from_value(v["criterion_table"].clone()).map_err(|_| bad("criterion_table"))?,
            standardization: serde_json::from_value(v["standardization"].clone()).map_err(|_| bad("standardization"))?,
            kind,
            config: serde_json::from_value(v["config"].clone()).map_err(|_| bad("config"))?,
        })
    }
}

// ---------------------------------------------------------------------------
// Initialization

/// Logistic IRLS with a small ridge; observation weights `w` in {0, 1}.
fn logistic_irls(design: &DesignMatrix, target: &DMatrix<f64>, w: &DMatrix<f64>, iters: usize) -> DVector<f64> {
    let d = design.d();
    let mut coef = DVector::zeros(d);
    let ridge = 1e-6 * w.sum().max(1.0) / d as f64;
    for _ in 0..iters {
        let eta = design.linear_predictor(&coef);
        let pi = eta.map(sigmoid);
        let resid = (target - &pi).component_mul(w);
        let wt = pi.zip_map(w, |p, o| o * (p * (1.0 - p)).max(1e-6));
        let g = design.tmul(&resid) - &coef * ridge;
        let step = design.solve_weighted_normal(&wt, &g, ridge);
        coef += &step;
        // keep fitted probabilities away from exact separation
        coef.iter_mut().for_each(|c| *c = c.clamp(-30.0, 30.0));
        if step.amax() < 1e-8 {
            break;
        }
    }
    coef
}

/// Starting values for θ and ψ.
pub fn initialize(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    q: usize,
    kind: ModelKind,
) -> Result<(ModelParams, VariationalParams)> {
    let (n, p, d) = (panel.n(), panel.p(), design.d());
    if design.n() != n || design.p() != p {
        return Err(Error::Dimension {
            block: "design".into(),
            message: format!("panel is {n}×{p}, design is {}×{}", design.n(), design.p()),
        });
    }
    if q < 1 || q > p {
        return Err(Error::Config(format!("latent dimension {q} outside [1, {p}]")));
    }
    if !restricted_full_rank(design, panel.mask()) {
        return Err(Error::Initialization(format!(
            "design restricted to observed cells is rank deficient (d = {d}); coefficients are not identifiable"
        )));
    }
    let obs = DMatrix::from_fn(n, p, |i, j| if panel.observed(i, j) { 1.0 } else { 0.0 });
    let y = DMatrix::from_fn(n, p, |i, j| panel.raw_count(i, j) as f64);
    let pos = y.map(|v| if v > 0.0 { 1.0 } else { 0.0 }).component_mul(&obs);

    let gamma = if kind.has_presence() { logistic_irls(design, &pos, &obs, 25) } else { DVector::zeros(d) };
    let beta = if pos.sum() == 0.0 {
        DVector::zeros(d)
    } else {
        let target = y.map(|v| (1.0 + v).ln()).component_mul(&pos);
        let rhs = design.tmul(&target);
        design.solve_weighted_normal(&pos, &rhs, 1e-8 * pos.sum() / d as f64)
    };

    let eta = design.linear_predictor(&beta);
    let zeta = design.linear_predictor(&gamma);
    let resid = DMatrix::from_fn(n, p, |i, j| {
        if !panel.observed(i, j) {
            return 0.0;
        }
        let mu = kind.presence(zeta[(i, j)]) * eta[(i, j)].min(EXP_CAP).exp();
        (y[(i, j)] - mu) / mu.max(1e-8).sqrt()
    });
    let cov = resid.transpose() * &resid / n as f64;
    let (_, vecs) = sorted_eigen(&cov);
    let loading = vecs.columns(0, q).into_owned();

    let params = ModelParams::new(beta, gamma, loading)?;
    let xi = DMatrix::from_fn(n, p, |i, j| {
        if is_free(panel, kind, i, j) {
            (0.5 * (sigmoid(zeta[(i, j)]) + 0.5)).clamp(XI_MIN, XI_MAX)
        } else {
            1.0
        }
    });
    let vp = VariationalParams { xi, means: DMatrix::zeros(n, q), vars: DMatrix::from_element(n, q, 1.0) };
    Ok((params, vp))
}

// ---------------------------------------------------------------------------
// Site-level (ψ) updates

struct SiteView<'e, 'a> {
    elbo: &'e Elbo<'a>,
    pred: &'e Predictors,
    loading: &'e DMatrix<f64>,
    i: usize,
}

impl SiteView<'_, '_> {
    fn value(&self, xi: &[f64], m: &[f64], s: &[f64]) -> f64 {
        let (p, q) = (self.loading.nrows(), m.len());
        let panel = self.elbo.panel;
        let i = self.i;
        let mut total = 0.0;
        for j in 0..p {
            if !panel.observed(i, j) {
                continue;
            }
            let mut lin = self.pred.eta[(i, j)];
            let mut la = lin;
            for k in 0..q {
                let c = self.loading[(j, k)];
                lin += c * m[k];
                la += c * m[k] + 0.5 * c * c * s[k];
            }
            if la > EXP_CAP {
                return f64::NEG_INFINITY;
            }
            let a = la.exp();
            let y = panel.raw_count(i, j) as f64;
            let lf = self.elbo.log_factorial(i, j);
            total += match &self.pred.zeta {
                Some(zeta) => {
                    let z = zeta[(i, j)];
                    xi[j] * (y * lin - a) + xi[j] * z - softplus(z) + bernoulli_entropy(xi[j]) - xi[j] * lf
                }
                None => y * lin - a - lf,
            };
        }
        for k in 0..q {
            total -= 0.5 * (m[k] * m[k] + s[k] - s[k].ln());
        }
        total
    }

    fn a_values(&self, m: &[f64], s: &[f64]) -> Vec<f64> {
        let (p, q) = (self.loading.nrows(), m.len());
        (0..p)
            .map(|j| {
                let mut la = self.pred.eta[(self.i, j)];
                for k in 0..q {
                    let c = self.loading[(j, k)];
                    la += c * m[k] + 0.5 * c * c * s[k];
                }
                la.min(EXP_CAP).exp()
            })
            .collect()
    }

    /// Coordinate ascent on (ξ_i·, m_i, s_i) until J_i stalls.
    fn optimize(&self, xi: &mut [f64], m: &mut [f64], s: &mut [f64], sweeps: usize, tol: f64) {
        let (p, q) = (self.loading.nrows(), m.len());
        let panel = self.elbo.panel;
        let kind = self.elbo.kind;
        let i = self.i;
        let mut current = self.value(xi, m, s);
        for _ in 0..sweeps {
            let before = current;
            // ξ: exact maximizer on free cells
            if let Some(zeta) = &self.pred.zeta {
                let a = self.a_values(m, s);
                for j in 0..p {
                    if is_free(panel, kind, i, j) {
                        xi[j] = sigmoid(zeta[(i, j)] - a[j]).clamp(XI_MIN, XI_MAX);
                    }
                }
                current = self.value(xi, m, s);
            }
            // (m, s): Newton on a concave objective with step halving
            for _ in 0..3 {
                let a = self.a_values(m, s);
                let mut g = DVector::zeros(2 * q);
                let mut h = DMatrix::zeros(2 * q, 2 * q);
                for j in 0..p {
                    if !panel.observed(i, j) {
                        continue;
                    }
                    let y = panel.raw_count(i, j) as f64;
                    let x = xi[j];
                    let xa = x * a[j];
                    for k in 0..q {
                        let ck = self.loading[(j, k)];
                        g[k] += x * (y - a[j]) * ck;
                        g[q + k] -= 0.5 * xa * ck * ck;
                        for l in 0..q {
                            let cl = self.loading[(j, l)];
                            h[(k, l)] += xa * ck * cl;
                            h[(k, q + l)] += 0.5 * xa * ck * cl * cl;
                            h[(q + l, k)] += 0.5 * xa * ck * cl * cl;
                            h[(q + k, q + l)] += 0.25 * xa * ck * ck * cl * cl;
                        }
                    }
                }
                for k in 0..q {
                    g[k] -= m[k];
                    g[q + k] += 0.5 * (1.0 / s[k] - 1.0);
                    h[(k, k)] += 1.0;
                    h[(q + k, q + k)] += 0.5 / (s[k] * s[k]);
                }
                // h holds the negated Hessian
                let rhs = DMatrix::from_column_slice(2 * q, 1, g.as_slice());
                let Some(step) = solve_symmetric(&h, &rhs) else { break };
                let mut t = 1.0;
                let mut accepted = false;
                let (mut m_new, mut s_new) = (m.to_vec(), s.to_vec());
                for _ in 0..40 {
                    for k in 0..q {
                        m_new[k] = m[k] + t * step[k];
                        s_new[k] = s[k] + t * step[q + k];
                    }
                    if s_new.iter().all(|&v| v > 0.0) {
                        let v = self.value(xi, &m_new, &s_new);
                        if v >= current {
                            current = v;
                            accepted = true;
                            break;
                        }
                    }
                    t *= 0.5;
                }
                if !accepted {
                    break;
                }
                m.copy_from_slice(&m_new);
                s.copy_from_slice(&s_new);
                if g.amax() < 1e-10 {
                    break;
                }
            }
            if (current - before).abs() <= tol * current.abs().max(1.0) {
                break;
            }
        }
    }
}

/// Optimizes ψ at fixed θ for the given sites (all sites when `None`),
/// warm-starting from `vp`.
pub fn ve_step(
    elbo: &Elbo,
    params: &ModelParams,
    vp: &VariationalParams,
    sites: Option<&[usize]>,
    tol: f64,
    max_sweeps: usize,
) -> Result<VariationalParams> {
    elbo.check_shapes(params, vp)?;
    let pred = elbo.predictors(params);
    Ok(ve_step_with(elbo, &pred, params, vp, sites, tol, max_sweeps))
}

fn ve_step_with(
    elbo: &Elbo,
    pred: &Predictors,
    params: &ModelParams,
    vp: &VariationalParams,
    sites: Option<&[usize]>,
    tol: f64,
    max_sweeps: usize,
) -> VariationalParams {
    let (n, p, q) = (vp.n(), vp.xi.ncols(), vp.q());
    let all: Vec<usize>;
    let idx = match sites {
        Some(s) => s,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    let updated: Vec<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> = idx
        .par_iter()
        .map(|&i| {
            let view = SiteView { elbo, pred, loading: &params.loading, i };
            let mut xi: Vec<f64> = (0..p).map(|j| vp.xi[(i, j)]).collect();
            let mut m: Vec<f64> = (0..q).map(|k| vp.means[(i, k)]).collect();
            let mut s: Vec<f64> = (0..q).map(|k| vp.vars[(i, k)]).collect();
            view.optimize(&mut xi, &mut m, &mut s, max_sweeps, tol);
            (i, xi, m, s)
        })
        .collect();
    let mut out = vp.clone();
    for (i, xi, m, s) in updated {
        for j in 0..p {
            out.xi[(i, j)] = xi[j];
        }
        for k in 0..q {
            out.means[(i, k)] = m[k];
            out.vars[(i, k)] = s[k];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model-parameter (θ) updates

/// Offsets r_ij = mᵢᵀC_j + ½ Σ_k C_jk² s_ik entering A alongside η.
fn latent_offsets(params: &ModelParams, vp: &VariationalParams) -> DMatrix<f64> {
    let c = &params.loading;
    let csq = c.component_mul(c);
    &vp.means * c.transpose() + (&vp.vars * csq.transpose()) * 0.5
}

/// Σ Ωξ(Yη − e^{η+r}), the β-dependent part of J; −∞ on overflow.
fn beta_objective(elbo: &Elbo, eta: &DMatrix<f64>, r: &DMatrix<f64>, xi: &DMatrix<f64>) -> f64 {
    let panel = elbo.panel;
    let mut total = 0.0;
    for i in 0..panel.n() {
        for j in 0..panel.p() {
            if !panel.observed(i, j) {
                continue;
            }
            let la = eta[(i, j)] + r[(i, j)];
            if la > EXP_CAP {
                return f64::NEG_INFINITY;
            }
            let x = if elbo.kind.has_presence() { xi[(i, j)] } else { 1.0 };
            total += x * (panel.raw_count(i, j) as f64 * eta[(i, j)] - la.exp());
        }
    }
    total
}

fn gamma_objective(elbo: &Elbo, zeta: &DMatrix<f64>, xi: &DMatrix<f64>) -> f64 {
    let panel = elbo.panel;
    let mut total = 0.0;
    for i in 0..panel.n() {
        for j in 0..panel.p() {
            if panel.observed(i, j) {
                let z = zeta[(i, j)];
                total += xi[(i, j)] * z - softplus(z);
            }
        }
    }
    total
}

fn update_beta(elbo: &Elbo, params: &mut ModelParams, vp: &VariationalParams) {
    let panel = elbo.panel;
    let design = elbo.design;
    let (n, p) = (panel.n(), panel.p());
    let r = latent_offsets(params, vp);
    let eta = design.linear_predictor(&params.beta);
    let current = beta_objective(elbo, &eta, &r, &vp.xi);
    let mut resid = DMatrix::zeros(n, p);
    let mut w = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            if panel.observed(i, j) {
                let x = if elbo.kind.has_presence() { vp.xi[(i, j)] } else { 1.0 };
                let a = (eta[(i, j)] + r[(i, j)]).min(EXP_CAP).exp();
                resid[(i, j)] = x * (panel.raw_count(i, j) as f64 - a);
                w[(i, j)] = x * a;
            }
        }
    }
    let g = design.tmul(&resid);
    let step = design.solve_weighted_normal(&w, &g, 1e-10 * w.sum().max(1.0) / design.d() as f64);
    let mut t = 1.0;
    for _ in 0..40 {
        let cand = &params.beta + &step * t;
        let eta_c = design.linear_predictor(&cand);
        if beta_objective(elbo, &eta_c, &r, &vp.xi) >= current {
            params.beta = cand;
            return;
        }
        t *= 0.5;
    }
}

fn update_gamma(elbo: &Elbo, params: &mut ModelParams, vp: &VariationalParams) {
    let panel = elbo.panel;
    let design = elbo.design;
    let (n, p) = (panel.n(), panel.p());
    let zeta = design.linear_predictor(&params.gamma);
    let current = gamma_objective(elbo, &zeta, &vp.xi);
    let mut resid = DMatrix::zeros(n, p);
    let mut w = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            if panel.observed(i, j) {
                let pi = sigmoid(zeta[(i, j)]);
                resid[(i, j)] = vp.xi[(i, j)] - pi;
                w[(i, j)] = (pi * (1.0 - pi)).max(1e-12);
            }
        }
    }
    let g = design.tmul(&resid);
    let step = design.solve_weighted_normal(&w, &g, 1e-10 * w.sum().max(1.0) / design.d() as f64);
    let mut t = 1.0;
    for _ in 0..40 {
        let cand = &params.gamma + &step * t;
        let zeta_c = design.linear_predictor(&cand);
        if gamma_objective(elbo, &zeta_c, &vp.xi) >= current {
            params.gamma = cand;
            return;
        }
        t *= 0.5;
    }
}

/// Newton step with halving on each loading row C_j (years are independent).
fn update_loading(elbo: &Elbo, params: &mut ModelParams, vp: &VariationalParams) {
    let panel = elbo.panel;
    let (n, p, q) = (panel.n(), panel.p(), params.q());
    let eta = elbo.design.linear_predictor(&params.beta);
    let zi = elbo.kind.has_presence();
    let rows: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let cj: Vec<f64> = (0..q).map(|k| params.loading[(j, k)]).collect();
            let objective = |c: &[f64]| -> f64 {
                let mut total = 0.0;
                for i in 0..n {
                    if !panel.observed(i, j) {
                        continue;
                    }
                    let mut lin = 0.0;
                    let mut la = eta[(i, j)];
                    for k in 0..q {
                        lin += vp.means[(i, k)] * c[k];
                        la += vp.means[(i, k)] * c[k] + 0.5 * c[k] * c[k] * vp.vars[(i, k)];
                    }
                    if la > EXP_CAP {
                        return f64::NEG_INFINITY;
                    }
                    let x = if zi { vp.xi[(i, j)] } else { 1.0 };
                    total += x * (panel.raw_count(i, j) as f64 * lin - la.exp());
                }
                total
            };
            let mut g = DVector::zeros(q);
            let mut h = DMatrix::zeros(q, q);
            for i in 0..n {
                if !panel.observed(i, j) {
                    continue;
                }
                let mut la = eta[(i, j)];
                for k in 0..q {
                    la += vp.means[(i, k)] * cj[k] + 0.5 * cj[k] * cj[k] * vp.vars[(i, k)];
                }
                let a = la.min(EXP_CAP).exp();
                let x = if zi { vp.xi[(i, j)] } else { 1.0 };
                let y = panel.raw_count(i, j) as f64;
                for k in 0..q {
                    let uk = vp.means[(i, k)] + cj[k] * vp.vars[(i, k)];
                    g[k] += x * ((y - a) * vp.means[(i, k)] - a * cj[k] * vp.vars[(i, k)]);
                    for l in 0..q {
                        let ul = vp.means[(i, l)] + cj[l] * vp.vars[(i, l)];
                        h[(k, l)] += x * a * uk * ul;
                    }
                    h[(k, k)] += x * a * vp.vars[(i, k)];
                }
            }
            let rhs = DMatrix::from_column_slice(q, 1, g.as_slice());
            let Some(step) = solve_symmetric(&h, &rhs) else { return cj };
            let current = objective(&cj);
            let mut t = 1.0;
            let mut cand = cj.clone();
            for _ in 0..40 {
                for k in 0..q {
                    cand[k] = cj[k] + t * step[k];
                }
                if objective(&cand) >= current {
                    return cand;
                }
                t *= 0.5;
            }
            cj
        })
        .collect();
    for (j, row) in rows.into_iter().enumerate() {
        for k in 0..q {
            params.loading[(j, k)] = row[k];
        }
    }
}

// ---------------------------------------------------------------------------
// Joint first-order ascent

fn first_order_step(
    elbo: &Elbo,
    params: &mut ModelParams,
    vp: &mut VariationalParams,
    lr: &mut f64,
    current: f64,
) -> Result<f64> {
    let g = elbo.grad(params, vp)?;
    let panel = elbo.panel;
    let (n, p) = (panel.n(), panel.p());
    for _ in 0..60 {
        let t = *lr;
        let mut cp = params.clone();
        cp.beta += &g.beta * t;
        if elbo.kind.has_presence() {
            cp.gamma += &g.gamma * t;
        }
        cp.loading += &g.loading * t;
        let mut cv = vp.clone();
        cv.means += &g.means * t;
        // ascent in log s and logit ξ
        cv.vars.zip_apply(&g.vars.component_mul(&vp.vars), |s, gs| *s *= (t * gs).clamp(-20.0, 20.0).exp());
        for i in 0..n {
            for j in 0..p {
                if is_free(panel, elbo.kind, i, j) {
                    let x = vp.xi[(i, j)];
                    let u = logit(x) + t * g.xi[(i, j)] * x * (1.0 - x);
                    cv.xi[(i, j)] = sigmoid(u).clamp(XI_MIN, XI_MAX);
                }
            }
        }
        if let Ok(e) = elbo.elbo(&cp, &cv) {
            if e.total >= current {
                *params = cp;
                *vp = cv;
                *lr *= 1.5;
                return Ok(e.total);
            }
        }
        *lr *= 0.5;
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// Driver

/// One sweep of block updates: ψ per site, then β, γ and the loadings.
fn block_sweep(elbo: &Elbo, params: &mut ModelParams, vp: &mut VariationalParams) -> Result<f64> {
    let pred = elbo.predictors(params);
    *vp = ve_step_with(elbo, &pred, params, vp, None, 1e-10, 5);
    update_beta(elbo, params, vp);
    if elbo.kind.has_presence() {
        update_gamma(elbo, params, vp);
    }
    update_loading(elbo, params, vp);
    Ok(elbo.elbo(params, vp)?.total)
}

/// Unconstrained coordinates used for extrapolation: θ, M, log S and
/// logit ξ on free cells.
struct Packer {
    layout: ThetaLayout,
    free: Vec<(usize, usize)>,
}

impl Packer {
    fn new(elbo: &Elbo, q: usize) -> Self {
        let panel = elbo.panel;
        let free = (0..panel.n())
            .flat_map(|i| (0..panel.p()).map(move |j| (i, j)))
            .filter(|&(i, j)| is_free(panel, elbo.kind, i, j))
            .collect();
        Packer { layout: elbo.layout(q), free }
    }

    fn pack(&self, params: &ModelParams, vp: &VariationalParams) -> DVector<f64> {
        let mut v: Vec<f64> = self.layout.flatten(params).iter().copied().collect();
        v.extend(vp.means.iter());
        v.extend(vp.vars.iter().map(|s| s.ln()));
        v.extend(self.free.iter().map(|&(i, j)| logit(vp.xi[(i, j)])));
        DVector::from_vec(v)
    }

    fn unpack(&self, x: &DVector<f64>, params: &ModelParams, vp: &VariationalParams) -> (ModelParams, VariationalParams) {
        let k = self.layout.len();
        let nm = vp.means.len();
        let p = self.layout.unflatten(&x.rows(0, k).into_owned(), params);
        let mut v = vp.clone();
        v.means.copy_from_slice(x.rows(k, nm).as_slice());
        for (s, u) in v.vars.iter_mut().zip(x.rows(k + nm, nm).iter()) {
            *s = u.clamp(-30.0, 30.0).exp();
        }
        for (&(i, j), u) in self.free.iter().zip(x.rows(k + 2 * nm, self.free.len()).iter()) {
            v.xi[(i, j)] = sigmoid(*u).clamp(XI_MIN, XI_MAX);
        }
        (p, v)
    }
}

/// Block sweeps accelerated by squared extrapolation; an extrapolated point
/// is kept only when a sweep from it beats two plain sweeps.
fn accelerated_step(
    elbo: &Elbo,
    packer: &Packer,
    params: &mut ModelParams,
    vp: &mut VariationalParams,
) -> Result<f64> {
    let x0 = packer.pack(params, vp);
    let (mut p1, mut v1) = (params.clone(), vp.clone());
    block_sweep(elbo, &mut p1, &mut v1)?;
    let x1 = packer.pack(&p1, &v1);
    let (mut p2, mut v2) = (p1, v1);
    let j2 = block_sweep(elbo, &mut p2, &mut v2)?;
    let x2 = packer.pack(&p2, &v2);
    let r = &x1 - &x0;
    let v = &x2 - &x1 - &r;
    let (rn, vn) = (r.norm(), v.norm());
    if vn > 0.0 && rn.is_finite() && vn.is_finite() {
        let alpha = (-rn / vn).min(-1.0);
        if alpha < -1.0 {
            let xe = &x0 - &r * (2.0 * alpha) + &v * (alpha * alpha);
            let (mut pe, mut ve) = packer.unpack(&xe, &p2, &v2);
            if let Ok(je) = block_sweep(elbo, &mut pe, &mut ve) {
                if je.is_finite() && je >= j2 {
                    *params = pe;
                    *vp = ve;
                    return Ok(je);
                }
            }
        }
    }
    *params = p2;
    *vp = v2;
    Ok(j2)
}

/// Runs the ascent from a given starting point at the latent dimension of
/// `params`. Coefficients are on the scale of `design`.
pub fn fit_from(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    config: &FitConfig,
    mut params: ModelParams,
    mut vp: VariationalParams,
) -> Result<(ModelParams, VariationalParams, Vec<f64>, bool)> {
    let elbo = Elbo::new(panel, design, config.model)?;
    elbo.check_shapes(&params, &vp)?;
    let packer = Packer::new(&elbo, params.q());
    let mut current = elbo.elbo(&params, &vp)?.total;
    let mut trace = vec![current];
    let mut converged = false;
    let mut lr = 1e-3;
    for _ in 0..config.max_iters {
        let next = match config.step_rule {
            StepRule::BlockNewton => accelerated_step(&elbo, &packer, &mut params, &mut vp)?,
            StepRule::AdaptiveFirstOrder => first_order_step(&elbo, &mut params, &mut vp, &mut lr, current)?,
        };
        trace.push(next);
        let change = (next - current).abs();
        current = next;
        if change <= config.rel_tol * current.abs() {
            converged = true;
            break;
        }
    }
    Ok((params, vp, trace, converged))
}

/// Pads or truncates the latent dimension of a previous solution.
fn resize_latent(
    params: &ModelParams,
    vp: &VariationalParams,
    q: usize,
    fresh: &ModelParams,
) -> (ModelParams, VariationalParams) {
    let (p, n, q0) = (params.p(), vp.n(), params.q());
    let loading = DMatrix::from_fn(p, q, |j, k| if k < q0 { params.loading[(j, k)] } else { 0.1 * fresh.loading[(j, k)] });
    let means = DMatrix::from_fn(n, q, |i, k| if k < q0 { vp.means[(i, k)] } else { 0.0 });
    let vars = DMatrix::from_fn(n, q, |i, k| if k < q0 { vp.vars[(i, k)] } else { 1.0 });
    (
        ModelParams { beta: params.beta.clone(), gamma: params.gamma.clone(), loading },
        VariationalParams { xi: vp.xi.clone(), means, vars },
    )
}

/// Penalty pq + 2d, or pq + d when the presence layer is absent.
pub fn penalty(d: usize, p: usize, q: usize, kind: ModelKind) -> f64 {
    let dg = if kind.has_presence() { d } else { 0 };
    (p * q + d + dg) as f64
}

/// Σ over free cells of the Bernoulli entropy plus ½ Σ log s + nq/2.
pub fn variational_entropy(panel: &ObservedPanel, vp: &VariationalParams, kind: ModelKind) -> f64 {
    let (n, p, q) = (panel.n(), panel.p(), vp.q());
    let mut h = 0.0;
    for i in 0..n {
        for j in 0..p {
            if is_free(panel, kind, i, j) {
                h += bernoulli_entropy(vp.xi[(i, j)]);
            }
        }
        for k in 0..q {
            h += 0.5 * vp.vars[(i, k)].ln();
        }
    }
    h + 0.5 * (n * q) as f64
}

/// The ELBO with the Gaussian KL constant nq/2 restored. The objective
/// drops it, which is harmless for fitting but would charge every extra
/// latent dimension n/2 when comparing q.
pub fn selection_elbo(elbo: f64, n: usize, q: usize) -> f64 {
    elbo + 0.5 * (n * q) as f64
}

/// (BIC, ICL) from the ELBO value and the variational entropy.
pub fn criteria(elbo: f64, entropy: f64, n: usize, d: usize, p: usize, q: usize, kind: ModelKind) -> (f64, f64) {
    let bic = elbo - 0.5 * penalty(d, p, q, kind) * (n as f64).ln();
    (bic, bic - entropy)
}

/// Fits the model; with a q range, fits every q and keeps the best by the
/// configured criterion.
pub fn fit(panel: &ObservedPanel, design: &DesignMatrix, config: &FitConfig) -> Result<FitResult> {
    config.validate(panel.p())?;
    let (work_design, standardization) = if config.standardize {
        design.standardized()
    } else {
        (design.clone(), Standardization::identity(design.d()))
    };
    let qs = config.q.values();
    let qmax = *qs.iter().max().unwrap();
    let mut table = Vec::with_capacity(qs.len());
    let mut best: Option<(f64, FitResult)> = None;
    let mut previous: Option<(ModelParams, VariationalParams)> = None;
    let mut first_error = None;

    for &q in &qs {
        let outcome = (|| -> Result<FitResult> {
            let (p0, v0) = match (&previous, config.warm_start) {
                (Some((pp, vv)), true) => {
                    let (fresh, _) = initialize(panel, &work_design, qmax.max(q), config.model)?;
                    resize_latent(pp, vv, q, &fresh)
                }
                _ => initialize(panel, &work_design, q, config.model)?,
            };
            let (mut params, vp, trace, converged) = fit_from(panel, &work_design, config, p0, v0)?;
            previous = Some((params.clone(), vp.clone()));
            params.beta = standardization.to_original(&params.beta);
            if config.model.has_presence() {
                params.gamma = standardization.to_original(&params.gamma);
            } else {
                params.gamma = DVector::zeros(design.d());
            }
            Ok(FitResult {
                params,
                varparams: vp,
                elbo_trace: trace,
                converged,
                q_selected: q,
                criterion_table: Vec::new(),
                standardization: standardization.clone(),
                kind: config.model,
                config: config.clone(),
            })
        })();
        match outcome {
            Ok(res) => {
                let h = variational_entropy(panel, &res.varparams, config.model);
                let (bic, icl) = criteria(selection_elbo(res.elbo(), panel.n(), q), h, panel.n(), design.d(), panel.p(), q, config.model);
                table.push(CriterionRow { q, elbo: Some(res.elbo()), bic: Some(bic), icl: Some(icl), error: None });
                let score = match config.criterion {
                    Criterion::Bic => bic,
                    Criterion::Icl => icl,
                };
                // strict improvement beyond the tie tolerance favors smaller q
                let better = best.as_ref().map_or(true, |(b, _)| score > *b + 1e-6 * b.abs().max(1.0));
                if better {
                    best = Some((score, res));
                }
            }
            Err(e) => {
                table.push(CriterionRow { q, elbo: None, bic: None, icl: None, error: Some(e.to_string()) });
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    match best {
        Some((_, mut res)) => {
            res.criterion_table = table;
            Ok(res)
        }
        None => Err(first_error.expect("at least one q was attempted")),
    }
}

/// Latent-dimension selection over the configured range.
pub fn select_q(panel: &ObservedPanel, design: &DesignMatrix, config: &FitConfig) -> Result<FitResult> {
    fit(panel, design, config)
}

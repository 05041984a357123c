//! Evidence lower bound, its gradient and per-site second derivatives.
//!
//! Site i contributes
//!
//! ```text
//! J_i = Σ_{j∈O_i} [ ξ(Y(η + mᵀC_j) − A) + ξζ − log(1+e^ζ) + H(ξ) − ξ log Y! ]
//!       − ½ (‖m‖² + Σ_k s_k − Σ_k log s_k)
//! ```
//!
//! with η = xᵀβ, ζ = xᵀγ and A = exp(η + mᵀC_j + ½ Σ_k C_jk² s_k). The PLN
//! variant drops the presence terms and fixes ξ = 1.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{bernoulli_entropy, sigmoid, softplus};
use crate::panel::ObservedPanel;

/// Cap on the exponent of A before exponentiation.
pub const EXP_CAP: f64 = 700.0;
/// Bounds for free presence probabilities.
pub const XI_MIN: f64 = 1e-8;
pub const XI_MAX: f64 = 1.0 - 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    ZeroInflated,
    Pln,
}

impl ModelKind {
    pub fn has_presence(self) -> bool {
        matches!(self, ModelKind::ZeroInflated)
    }

    /// Presence probability for linear predictor `zeta`.
    pub fn presence(self, zeta: f64) -> f64 {
        match self {
            ModelKind::ZeroInflated => sigmoid(zeta),
            ModelKind::Pln => 1.0,
        }
    }
}

/// ψ = (ξ, M, S).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    /// `n × p`; meaningful on observed cells only.
    pub xi: DMatrix<f64>,
    /// `n × q`, rows m_i.
    pub means: DMatrix<f64>,
    /// `n × q`, rows s_i (diagonal of S_i).
    pub vars: DMatrix<f64>,
}

impl VariationalParams {
    pub fn n(&self) -> usize {
        self.means.nrows()
    }

    pub fn q(&self) -> usize {
        self.means.ncols()
    }
}

/// True when ξ_ij is a free coordinate: observed, zero count, presence model.
#[inline]
pub fn is_free(panel: &ObservedPanel, kind: ModelKind, i: usize, j: usize) -> bool {
    kind.has_presence() && panel.observed(i, j) && panel.raw_count(i, j) == 0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    pub per_site: DVector<f64>,
    /// A_ij for every cell (missing cells included; no overflow check there).
    pub conditional_mean: DMatrix<f64>,
}

/// Gradient of J with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub beta: DVector<f64>,
    /// Empty under the PLN variant.
    pub gamma: DVector<f64>,
    pub loading: DMatrix<f64>,
    pub means: DMatrix<f64>,
    pub vars: DMatrix<f64>,
    /// Zero except on free cells.
    pub xi: DMatrix<f64>,
}

/// Layout of the model parameter vector θ = (β, γ, vec C) with C row-major.
/// γ is absent under the PLN variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub d: usize,
    pub p: usize,
    pub q: usize,
    pub kind: ModelKind,
}

impl ThetaLayout {
    pub fn new(d: usize, p: usize, q: usize, kind: ModelKind) -> Self {
        ThetaLayout { d, p, q, kind }
    }

    pub fn beta(&self, k: usize) -> usize {
        k
    }

    pub fn gamma(&self, k: usize) -> usize {
        debug_assert!(self.kind.has_presence());
        self.d + k
    }

    pub fn loading_offset(&self) -> usize {
        if self.kind.has_presence() {
            2 * self.d
        } else {
            self.d
        }
    }

    pub fn loading(&self, j: usize, k: usize) -> usize {
        self.loading_offset() + j * self.q + k
    }

    pub fn len(&self) -> usize {
        self.loading_offset() + self.p * self.q
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self, params: &ModelParams) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(params.beta.iter());
        if self.kind.has_presence() {
            v.extend(params.gamma.iter());
        }
        for j in 0..self.p {
            v.extend(params.loading.row(j).iter());
        }
        DVector::from_vec(v)
    }

    /// Inverse of [`flatten`](Self::flatten); under PLN, γ is copied from `template`.
    pub fn unflatten(&self, theta: &DVector<f64>, template: &ModelParams) -> ModelParams {
        let beta = theta.rows(0, self.d).into_owned();
        let gamma = if self.kind.has_presence() {
            theta.rows(self.d, self.d).into_owned()
        } else {
            template.gamma.clone()
        };
        let off = self.loading_offset();
        let loading = DMatrix::from_fn(self.p, self.q, |j, k| theta[off + j * self.q + k]);
        ModelParams { beta, gamma, loading }
    }

    pub fn flatten_gradient(&self, g: &Gradient) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(g.beta.iter());
        if self.kind.has_presence() {
            v.extend(g.gamma.iter());
        }
        for j in 0..self.p {
            v.extend(g.loading.row(j).iter());
        }
        DVector::from_vec(v)
    }
}

/// ELBO evaluator bound to one panel and design.
pub struct Elbo<'a> {
    pub panel: &'a ObservedPanel,
    pub design: &'a DesignMatrix,
    pub kind: ModelKind,
    log_fact: Vec<f64>,
}

/// Linear predictors shared by every site.
pub(crate) struct Predictors {
    pub eta: DMatrix<f64>,
    pub zeta: Option<DMatrix<f64>>,
}

impl<'a> Elbo<'a> {
    pub fn new(panel: &'a ObservedPanel, design: &'a DesignMatrix, kind: ModelKind) -> Result<Self> {
        if panel.n() != design.n() || panel.p() != design.p() {
            return Err(Error::Dimension {
                block: "design".into(),
                message: format!(
                    "panel is {}×{}, design is {}×{}",
                    panel.n(),
                    panel.p(),
                    design.n(),
                    design.p()
                ),
            });
        }
        let (n, p) = (panel.n(), panel.p());
        let mut log_fact = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                if panel.observed(i, j) {
                    log_fact[i * p + j] = panel.log_factorial(i, j);
                }
            }
        }
        Ok(Elbo { panel, design, kind, log_fact })
    }

    pub fn layout(&self, q: usize) -> ThetaLayout {
        ThetaLayout::new(self.design.d(), self.panel.p(), q, self.kind)
    }

    #[inline]
    pub(crate) fn log_factorial(&self, i: usize, j: usize) -> f64 {
        self.log_fact[i * self.panel.p() + j]
    }

    pub(crate) fn check_shapes(&self, params: &ModelParams, vp: &VariationalParams) -> Result<()> {
        let (n, p, q) = (self.panel.n(), self.panel.p(), params.q());
        let dim = |block: &str, message: String| Error::Dimension { block: block.into(), message };
        if params.d() != self.design.d() {
            return Err(dim("beta", format!("expected {} coefficients, got {}", self.design.d(), params.d())));
        }
        if params.p() != p {
            return Err(dim("loading", format!("expected {p} rows, got {}", params.p())));
        }
        if vp.xi.shape() != (n, p) {
            return Err(dim("xi", format!("expected {n}×{p}, got {:?}", vp.xi.shape())));
        }
        if vp.means.shape() != (n, q) || vp.vars.shape() != (n, q) {
            return Err(dim("means/vars", format!("expected {n}×{q}")));
        }
        Ok(())
    }

    pub(crate) fn predictors(&self, params: &ModelParams) -> Predictors {
        let eta = self.design.linear_predictor(&params.beta);
        let zeta = self.kind.has_presence().then(|| self.design.linear_predictor(&params.gamma));
        Predictors { eta, zeta }
    }

    /// Log of A_ij: η + mᵀC_j + ½ Σ C_jk² s_k.
    #[inline]
    pub(crate) fn log_a(eta: f64, c: &DMatrix<f64>, vp: &VariationalParams, i: usize, j: usize) -> f64 {
        let mut v = eta;
        for k in 0..c.ncols() {
            let cjk = c[(j, k)];
            v += cjk * vp.means[(i, k)] + 0.5 * cjk * cjk * vp.vars[(i, k)];
        }
        v
    }

    #[inline]
    pub(crate) fn checked_a(log_a: f64, i: usize, j: usize) -> Result<f64> {
        if log_a > EXP_CAP || log_a.is_nan() {
            return Err(Error::NonFiniteElbo {
                site: i,
                year: j,
                message: format!("log conditional mean {log_a} exceeds the cap {EXP_CAP}"),
            });
        }
        Ok(log_a.exp())
    }

    /// J_i and the A_ij row for site i.
    pub(crate) fn site_value(
        &self,
        pred: &Predictors,
        params: &ModelParams,
        vp: &VariationalParams,
        i: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let p = self.panel.p();
        let c = &params.loading;
        let mut a_row = Vec::with_capacity(p);
        let mut total = 0.0;
        for j in 0..p {
            let eta = pred.eta[(i, j)];
            let la = Self::log_a(eta, c, vp, i, j);
            if !self.panel.observed(i, j) {
                a_row.push(la.min(EXP_CAP).exp());
                continue;
            }
            let a = Self::checked_a(la, i, j)?;
            a_row.push(a);
            let y = self.panel.raw_count(i, j) as f64;
            let lin = eta + (c.row(j) * vp.means.row(i).transpose())[0];
            let lf = self.log_factorial(i, j);
            match &pred.zeta {
                Some(zeta) => {
                    let xi = vp.xi[(i, j)];
                    let z = zeta[(i, j)];
                    total += xi * (y * lin - a) + xi * z - softplus(z) + bernoulli_entropy(xi) - xi * lf;
                }
                None => total += y * lin - a - lf,
            }
        }
        let mut kl = 0.0;
        for k in 0..vp.q() {
            let m = vp.means[(i, k)];
            let s = vp.vars[(i, k)];
            kl += m * m + s - s.ln();
        }
        total -= 0.5 * kl;
        if !total.is_finite() {
            return Err(Error::NonFiniteElbo {
                site: i,
                year: 0,
                message: format!("site contribution evaluated to {total}"),
            });
        }
        Ok((total, a_row))
    }

    pub fn elbo(&self, params: &ModelParams, vp: &VariationalParams) -> Result<ElboBreakdown> {
        self.check_shapes(params, vp)?;
        let pred = self.predictors(params);
        self.elbo_with(&pred, params, vp)
    }

    pub(crate) fn elbo_with(
        &self,
        pred: &Predictors,
        params: &ModelParams,
        vp: &VariationalParams,
    ) -> Result<ElboBreakdown> {
        let (n, p) = (self.panel.n(), self.panel.p());
        let sites: Vec<(f64, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| self.site_value(pred, params, vp, i))
            .collect::<Result<_>>()?;
        let mut per_site = DVector::zeros(n);
        let mut cm = DMatrix::zeros(n, p);
        let mut total = 0.0;
        for (i, (v, a)) in sites.into_iter().enumerate() {
            per_site[i] = v;
            total += v;
            for (j, aj) in a.into_iter().enumerate() {
                cm[(i, j)] = aj;
            }
        }
        Ok(ElboBreakdown { total, per_site, conditional_mean: cm })
    }

    pub fn grad(&self, params: &ModelParams, vp: &VariationalParams) -> Result<Gradient> {
        self.check_shapes(params, vp)?;
        let (n, p, q) = (self.panel.n(), self.panel.p(), params.q());
        let pred = self.predictors(params);
        let c = &params.loading;
        let zi = self.kind.has_presence();
        // w_beta = Ωξ(Y − A), w_gamma = Ω(ξ − π), w_a = ΩξA
        let mut w_beta = DMatrix::zeros(n, p);
        let mut w_gamma = DMatrix::zeros(n, p);
        let mut w_a = DMatrix::zeros(n, p);
        let mut g_xi = DMatrix::zeros(n, p);
        for i in 0..n {
            for j in 0..p {
                if !self.panel.observed(i, j) {
                    continue;
                }
                let a = Self::checked_a(Self::log_a(pred.eta[(i, j)], c, vp, i, j), i, j)?;
                let y = self.panel.raw_count(i, j) as f64;
                let xi = if zi { vp.xi[(i, j)] } else { 1.0 };
                w_beta[(i, j)] = xi * (y - a);
                w_a[(i, j)] = xi * a;
                if let Some(zeta) = &pred.zeta {
                    let z = zeta[(i, j)];
                    w_gamma[(i, j)] = xi - sigmoid(z);
                    if is_free(self.panel, self.kind, i, j) {
                        // Y = 0 on free cells
                        g_xi[(i, j)] = -a + z - (xi / (1.0 - xi)).ln();
                    }
                }
            }
        }
        let beta = self.design.tmul(&w_beta);
        let gamma = if zi { self.design.tmul(&w_gamma) } else { DVector::zeros(0) };
        // ∂C = W_βᵀ M − (W_aᵀ S) ⊙ C
        let loading = w_beta.transpose() * &vp.means - (w_a.transpose() * &vp.vars).component_mul(c);
        let means = &w_beta * c - &vp.means;
        let csq = c.component_mul(c);
        let vars = DMatrix::from_fn(n, q, |i, k| 0.5 * (1.0 / vp.vars[(i, k)] - 1.0))
            - (&w_a * &csq) * 0.5;
        Ok(Gradient { beta, gamma, loading, means, vars, xi: g_xi })
    }

    /// Second-derivative blocks of J_i restricted to the coordinates site i
    /// touches.
    pub fn site_hessian(&self, params: &ModelParams, vp: &VariationalParams, i: usize) -> Result<SiteHessian> {
        self.check_shapes(params, vp)?;
        let pred = self.predictors(params);
        self.site_hessian_with(&pred, params, vp, i)
    }

    pub(crate) fn site_hessian_with(
        &self,
        pred: &Predictors,
        params: &ModelParams,
        vp: &VariationalParams,
        i: usize,
    ) -> Result<SiteHessian> {
        let (p, q, d) = (self.panel.p(), params.q(), self.design.d());
        let layout = ThetaLayout::new(d, p, q, self.kind);
        let zi = self.kind.has_presence();
        let c = &params.loading;
        let obs = self.panel.observed_years(i);

        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(obs.len());
        let mut cols: Vec<usize> = Vec::new();
        for &j in &obs {
            let nz = self.design.row_nonzeros(i, j);
            cols.extend(nz.iter().map(|e| e.0));
            rows.push(nz);
        }
        cols.sort_unstable();
        cols.dedup();
        let nb = cols.len();
        // local θ: β over cols, γ over cols, then C rows of observed years
        let c_off = if zi { 2 * nb } else { nb };
        let lt = c_off + obs.len() * q;
        let mut theta_index = Vec::with_capacity(lt);
        theta_index.extend(cols.iter().map(|&k| layout.beta(k)));
        if zi {
            theta_index.extend(cols.iter().map(|&k| layout.gamma(k)));
        }
        for &j in &obs {
            theta_index.extend((0..q).map(|k| layout.loading(j, k)));
        }
        let free_xi: Vec<usize> = obs.iter().copied().filter(|&j| is_free(self.panel, self.kind, i, j)).collect();
        let lp = 2 * q + free_xi.len();

        let mut g_t = DVector::zeros(lt);
        let mut g_p = DVector::zeros(lp);
        let mut h_tt = DMatrix::zeros(lt, lt);
        let mut h_tp = DMatrix::zeros(lt, lp);
        let mut h_pp = DMatrix::zeros(lp, lp);

        let m: Vec<f64> = (0..q).map(|k| vp.means[(i, k)]).collect();
        let s: Vec<f64> = (0..q).map(|k| vp.vars[(i, k)]).collect();
        let (mo, so) = (0, q);

        let mut free_pos = 0;
        for (oi, &j) in obs.iter().enumerate() {
            let a = Self::checked_a(Self::log_a(pred.eta[(i, j)], c, vp, i, j), i, j)?;
            let y = self.panel.raw_count(i, j) as f64;
            let xi = if zi { vp.xi[(i, j)] } else { 1.0 };
            let xa = xi * a;
            let cj: Vec<f64> = (0..q).map(|k| c[(j, k)]).collect();
            let u: Vec<f64> = (0..q).map(|k| m[k] + cj[k] * s[k]).collect();
            let h: Vec<f64> = (0..q).map(|k| 0.5 * cj[k] * cj[k]).collect();
            let loc: Vec<(usize, f64)> =
                rows[oi].iter().map(|&(col, v)| (cols.binary_search(&col).unwrap(), v)).collect();
            let co = c_off + oi * q;
            let free = free_xi.get(free_pos) == Some(&j);
            let xo = 2 * q + free_pos;
            if free {
                free_pos += 1;
            }

            // gradients
            for &(b, v) in &loc {
                g_t[b] += xi * (y - a) * v;
            }
            if let Some(zeta) = &pred.zeta {
                let z = zeta[(i, j)];
                let pi = sigmoid(z);
                let w = pi * (1.0 - pi);
                for &(b, v) in &loc {
                    g_t[nb + b] += (xi - pi) * v;
                    for &(b2, v2) in &loc {
                        h_tt[(nb + b, nb + b2)] -= w * v * v2;
                    }
                }
                if free {
                    g_p[xo] = -a + z - (xi / (1.0 - xi)).ln();
                    h_pp[(xo, xo)] = -1.0 / (xi * (1.0 - xi));
                    for &(b, v) in &loc {
                        h_tp[(b, xo)] += (y - a) * v;
                        h_tp[(nb + b, xo)] += v;
                    }
                    for k in 0..q {
                        h_tp[(co + k, xo)] += y * m[k] - a * u[k];
                        h_pp[(mo + k, xo)] += (y - a) * cj[k];
                        h_pp[(xo, mo + k)] += (y - a) * cj[k];
                        h_pp[(so + k, xo)] -= a * h[k];
                        h_pp[(xo, so + k)] -= a * h[k];
                    }
                }
            }
            for k in 0..q {
                g_t[co + k] += xi * ((y - a) * m[k] - a * cj[k] * s[k]);
                g_p[mo + k] += xi * (y - a) * cj[k];
                g_p[so + k] -= xa * h[k];
            }

            // β blocks
            for &(b, v) in &loc {
                for &(b2, v2) in &loc {
                    h_tt[(b, b2)] -= xa * v * v2;
                }
                for k in 0..q {
                    h_tt[(b, co + k)] -= xa * v * u[k];
                    h_tt[(co + k, b)] -= xa * v * u[k];
                    h_tp[(b, mo + k)] -= xa * v * cj[k];
                    h_tp[(b, so + k)] -= xa * v * h[k];
                }
            }
            // C_j blocks
            for k in 0..q {
                for l in 0..q {
                    h_tt[(co + k, co + l)] -= xa * u[k] * u[l];
                    let id = if k == l { 1.0 } else { 0.0 };
                    h_tp[(co + k, mo + l)] += xi * ((y - a) * id - a * u[k] * cj[l]);
                    h_tp[(co + k, so + l)] -= xa * (u[k] * h[l] + cj[k] * id);
                    h_pp[(mo + k, mo + l)] -= xa * cj[k] * cj[l];
                    h_pp[(mo + k, so + l)] -= xa * cj[k] * h[l];
                    h_pp[(so + l, mo + k)] -= xa * cj[k] * h[l];
                    h_pp[(so + k, so + l)] -= xa * h[k] * h[l];
                }
                h_tt[(co + k, co + k)] -= xa * s[k];
            }
        }
        for k in 0..q {
            g_p[mo + k] -= m[k];
            g_p[so + k] += 0.5 * (1.0 / s[k] - 1.0);
            h_pp[(mo + k, mo + k)] -= 1.0;
            h_pp[(so + k, so + k)] -= 0.5 / (s[k] * s[k]);
        }
        Ok(SiteHessian {
            site: i,
            q,
            theta_index,
            free_xi,
            grad_theta: g_t,
            grad_psi: g_p,
            h_tt,
            h_tp,
            h_pp,
        })
    }
}

/// Derivatives of J_i over the θ-coordinates site i touches and its own
/// variational coordinates ψ_i = (m_i, s_i, free ξ_i·).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteHessian {
    pub site: usize,
    pub q: usize,
    /// Global θ index of each local θ coordinate, in local order.
    pub theta_index: Vec<usize>,
    /// Years whose ξ_ij is free, in ψ order after m_i and s_i.
    pub free_xi: Vec<usize>,
    pub grad_theta: DVector<f64>,
    pub grad_psi: DVector<f64>,
    pub h_tt: DMatrix<f64>,
    pub h_tp: DMatrix<f64>,
    pub h_pp: DMatrix<f64>,
}

impl SiteHessian {
    /// Dense Hessian over (θ, ψ_i) with θ in global layout of length `dim_theta`.
    pub fn assemble(&self, dim_theta: usize) -> DMatrix<f64> {
        let lp = self.h_pp.nrows();
        let mut h = DMatrix::zeros(dim_theta + lp, dim_theta + lp);
        for (a, &ga) in self.theta_index.iter().enumerate() {
            for (b, &gb) in self.theta_index.iter().enumerate() {
                h[(ga, gb)] += self.h_tt[(a, b)];
            }
            for c in 0..lp {
                h[(ga, dim_theta + c)] += self.h_tp[(a, c)];
                h[(dim_theta + c, ga)] += self.h_tp[(a, c)];
            }
        }
        for a in 0..lp {
            for b in 0..lp {
                h[(dim_theta + a, dim_theta + b)] = self.h_pp[(a, b)];
            }
        }
        h
    }

    /// Global θ gradient of J_i scattered into a vector of length `dim_theta`.
    pub fn scatter_grad_theta(&self, dim_theta: usize) -> DVector<f64> {
        let mut g = DVector::zeros(dim_theta);
        for (a, &ga) in self.theta_index.iter().enumerate() {
            g[ga] += self.grad_theta[a];
        }
        g
    }
}

/// Convenience wrapper around [`Elbo::elbo`].
pub fn elbo(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    params: &ModelParams,
    vp: &VariationalParams,
    kind: ModelKind,
) -> Result<ElboBreakdown> {
    Elbo::new(panel, design, kind)?.elbo(params, vp)
}

/// Convenience wrapper around [`Elbo::grad`].
pub fn grad(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    params: &ModelParams,
    vp: &VariationalParams,
    kind: ModelKind,
) -> Result<Gradient> {
    Elbo::new(panel, design, kind)?.grad(params, vp)
}

/// Convenience wrapper around [`Elbo::site_hessian`].
pub fn hess_blocks(
    panel: &ObservedPanel,
    design: &DesignMatrix,
    params: &ModelParams,
    vp: &VariationalParams,
    kind: ModelKind,
    site: usize,
) -> Result<SiteHessian> {
    Elbo::new(panel, design, kind)?.site_hessian(params, vp, site)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::intercept_design;

    fn one_cell(y: u64, xi: f64) -> (ObservedPanel, DesignMatrix, ModelParams, VariationalParams) {
        let panel = ObservedPanel::complete(1, 1, vec![y]).unwrap();
        let design = intercept_design(1, 1);
        let params =
            ModelParams::new(DVector::zeros(1), DVector::zeros(1), DMatrix::zeros(1, 1)).unwrap();
        let vp = VariationalParams {
            xi: DMatrix::from_element(1, 1, xi),
            means: DMatrix::zeros(1, 1),
            vars: DMatrix::from_element(1, 1, 1.0),
        };
        (panel, design, params, vp)
    }

    #[test]
    fn trivial_point_value() {
        let (panel, design, params, vp) = one_cell(0, 0.5);
        let e = elbo(&panel, &design, &params, &vp, ModelKind::ZeroInflated).unwrap();
        assert!((e.total + 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_cell_leaves_prior_term() {
        let panel = ObservedPanel::with_mask(1, 2, vec![0, 0], vec![false, true]).unwrap();
        let design = intercept_design(1, 2);
        let params =
            ModelParams::new(DVector::zeros(1), DVector::zeros(1), DMatrix::zeros(2, 1)).unwrap();
        let vp = VariationalParams {
            xi: DMatrix::from_element(1, 2, 0.5),
            means: DMatrix::zeros(1, 1),
            vars: DMatrix::from_element(1, 1, 1.0),
        };
        let e = elbo(&panel, &design, &params, &vp, ModelKind::ZeroInflated).unwrap();
        // the observed zero cell contributes −0.5, the masked one nothing
        assert!((e.total + 1.0).abs() < 1e-15);
    }

    #[test]
    fn positive_count_includes_log_factorial() {
        let (panel, design, params, vp) = one_cell(3, 1.0);
        let e = elbo(&panel, &design, &params, &vp, ModelKind::ZeroInflated).unwrap();
        // ξ(Y·0 − 1) + 0 − log 2 + 0 − log 3! − 0.5
        let expect = -1.0 - 2f64.ln() - 6f64.ln() - 0.5;
        assert!((e.total - expect).abs() < 1e-12);
    }

    #[test]
    fn overflow_is_reported_with_cell() {
        let (panel, design, mut params, vp) = one_cell(1, 1.0);
        params.beta[0] = 800.0;
        match elbo(&panel, &design, &params, &vp, ModelKind::ZeroInflated) {
            Err(Error::NonFiniteElbo { site: 0, year: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn xi_equal_to_prior_zeroes_gamma_gradient() {
        let panel = ObservedPanel::complete(2, 2, vec![0, 1, 0, 0]).unwrap();
        let design = intercept_design(2, 2);
        let params = ModelParams::new(
            DVector::from_element(1, 0.1),
            DVector::from_element(1, 0.4),
            DMatrix::from_element(2, 1, 0.2),
        )
        .unwrap();
        let vp = VariationalParams {
            xi: DMatrix::from_element(2, 2, sigmoid(0.4)),
            means: DMatrix::zeros(2, 1),
            vars: DMatrix::from_element(2, 1, 1.0),
        };
        // remove the positive cell so every observed ξ equals π
        let panel = panel.restrict(vec![true, false, true, true]).unwrap();
        let g = grad(&panel, &design, &params, &vp, ModelKind::ZeroInflated).unwrap();
        assert!(g.gamma.amax() < 1e-15);
    }

    #[test]
    fn free_xi_curvature_is_negative() {
        let (panel, design, params, vp) = one_cell(0, 0.3);
        let h = hess_blocks(&panel, &design, &params, &vp, ModelKind::ZeroInflated, 0).unwrap();
        assert_eq!(h.free_xi, vec![0]);
        let k = 2;
        assert!((h.h_pp[(k, k)] + 1.0 / (0.3 * 0.7)).abs() < 1e-12);
    }

    #[test]
    fn pln_layout_drops_gamma() {
        let l = ThetaLayout::new(3, 4, 2, ModelKind::Pln);
        assert_eq!(l.len(), 3 + 8);
        let z = ThetaLayout::new(3, 4, 2, ModelKind::ZeroInflated);
        assert_eq!(z.len(), 6 + 8);
    }
}

//! The zero-inflated Poisson log-normal PCA generative model and its
//! closed-form moments.
//!
//! Presence `U_ij ~ Bernoulli(π_ij)` with `logit π_ij = x_ijᵀγ`; site factors
//! `W_i ~ N(0, I_q)` with `Z_i = C W_i`; counts are zero when absent and
//! `Poisson(exp(x_ijᵀβ + Z_ij))` when present.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::numeric::{poisson_u64, sigmoid, standard_normal, substream};

/// θ = (β, γ, C).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    /// `p × q` loadings; row j is C_j.
    pub loading: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(beta: DVector<f64>, gamma: DVector<f64>, loading: DMatrix<f64>) -> Result<Self> {
        if beta.len() != gamma.len() {
            return Err(Error::Dimension {
                block: "params".into(),
                message: format!("beta has {} entries, gamma {}", beta.len(), gamma.len()),
            });
        }
        let (p, q) = loading.shape();
        if q < 1 || q > p {
            return Err(Error::Config(format!("latent dimension q = {q} must lie in [1, {p}]")));
        }
        Ok(ModelParams { beta, gamma, loading })
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    pub fn p(&self) -> usize {
        self.loading.nrows()
    }

    pub fn q(&self) -> usize {
        self.loading.ncols()
    }

    /// Σ = C Cᵀ.
    pub fn sigma(&self) -> DMatrix<f64> {
        &self.loading * self.loading.transpose()
    }

    /// σ_j² = ||C_j||².
    pub fn sigma_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.p(), |j, _| self.loading.row(j).norm_squared())
    }

    fn check_design(&self, design: &DesignMatrix) -> Result<()> {
        if design.d() != self.d() || design.p() != self.p() {
            return Err(Error::Dimension {
                block: "design".into(),
                message: format!(
                    "design has d = {}, p = {}; params have d = {}, p = {}",
                    design.d(),
                    design.p(),
                    self.d(),
                    self.p()
                ),
            });
        }
        Ok(())
    }
}

/// Latent variables drawn alongside counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `n × p` presence indicators.
    pub presence: DMatrix<u8>,
    /// `n × q` standard Gaussian factors W.
    pub factors: DMatrix<f64>,
    /// `n × p` Gaussian layer Z = W Cᵀ.
    pub gaussian: DMatrix<f64>,
}

/// Draws a complete panel from the model. Row i uses substream i of `seed`,
/// so the result does not depend on evaluation order.
pub fn sample(params: &ModelParams, design: &DesignMatrix, seed: u64) -> Result<(Vec<u64>, LatentState)> {
    params.check_design(design)?;
    let (n, p, q) = (design.n(), design.p(), params.q());
    let eta = design.linear_predictor(&params.beta);
    let zeta = design.linear_predictor(&params.gamma);
    let mut counts = vec![0u64; n * p];
    let mut presence = DMatrix::zeros(n, p);
    let mut factors = DMatrix::zeros(n, q);
    let mut gaussian = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut rng = substream(seed, i as u64);
        let w = DVector::from_fn(q, |_, _| standard_normal(&mut rng));
        let z = &params.loading * &w;
        factors.set_row(i, &w.transpose());
        gaussian.set_row(i, &z.transpose());
        for j in 0..p {
            let pi = sigmoid(zeta[(i, j)]);
            let u: f64 = rand::Rng::random(&mut rng);
            if u < pi {
                presence[(i, j)] = 1;
                counts[i * p + j] = poisson_u64(&mut rng, (eta[(i, j)] + z[j]).exp());
            }
        }
    }
    Ok((counts, LatentState { presence, factors, gaussian }))
}

/// Mean, variance and (optionally) covariance with another year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMoments {
    pub mean: f64,
    pub variance: f64,
    pub covariance: Option<f64>,
    /// True when π = 0, so all mass sits at zero.
    pub degenerate: bool,
}

/// Mean and variance of a univariate zero-inflated Poisson log-normal
/// variable with presence `pi`, log-mean `mu` and latent variance `s2`.
pub fn zi_moments(pi: f64, mu: f64, s2: f64) -> (f64, f64, bool) {
    let mean = pi * (mu + s2 / 2.0).exp();
    if pi <= 0.0 {
        return (0.0, 0.0, true);
    }
    let var = mean + mean * mean * (s2.exp() - pi) / pi;
    (mean, var, false)
}

/// First three raw moments `E[Y], E[Y²], E[Y³]` of the univariate model.
pub fn raw_moments(pi: f64, mu: f64, s2: f64) -> [f64; 3] {
    let a = (mu + 0.5 * s2).exp();
    let b = (2.0 * mu + 2.0 * s2).exp();
    let c = (3.0 * mu + 4.5 * s2).exp();
    [pi * a, pi * (a + b), pi * (a + 3.0 * b + c)]
}

/// Moments of Y_ij, and its covariance with Y_ik when `k` is given.
pub fn moments(
    params: &ModelParams,
    design: &DesignMatrix,
    i: usize,
    j: usize,
    k: Option<usize>,
) -> Result<CellMoments> {
    params.check_design(design)?;
    let cell = |jj: usize| {
        let x = design.row(i, jj);
        let pi = sigmoid(x.dot(&params.gamma));
        let mu = x.dot(&params.beta);
        let s2 = params.loading.row(jj).norm_squared();
        (pi, mu, s2)
    };
    let (pi, mu, s2) = cell(j);
    let (mean, variance, degenerate) = zi_moments(pi, mu, s2);
    let covariance = k.filter(|&kk| kk != j).map(|kk| {
        let (pik, muk, s2k) = cell(kk);
        let (mean_k, _, _) = zi_moments(pik, muk, s2k);
        let sjk = params.loading.row(j).dot(&params.loading.row(kk));
        mean * mean_k * (sjk.exp() - 1.0)
    });
    Ok(CellMoments { mean, variance, covariance, degenerate })
}

/// Recovers `(π, μ, σ²)` from the first three raw moments.
pub fn mom_invert(e1: f64, e2: f64, e3: f64) -> Result<(f64, f64, f64)> {
    if !(e1 > 0.0) {
        return Err(Error::InversionInfeasible(format!("first moment {e1} is not positive")));
    }
    let q1 = e2 / e1 - 1.0;
    let q2 = e3 - 3.0 * e2 + 2.0 * e1;
    if !(q1 > 0.0) {
        return Err(Error::InversionInfeasible(format!(
            "E[Y²]/E[Y] - 1 = {q1} is not positive (underdispersed moments)"
        )));
    }
    if !(q2 > 0.0) {
        return Err(Error::InversionInfeasible(format!("E[Y³] - 3E[Y²] + 2E[Y] = {q2} is not positive")));
    }
    let pi = q2 / q1.powi(3);
    let s2 = (q2 / (q1 * q1 * e1)).ln();
    let mu = 4.0 * q1.ln() + 1.5 * (e1 / q2).ln();
    Ok((pi, mu, s2))
}

/// Per-cell flag `Var(Y_ij) > E(Y_ij)`, row-major `n × p`.
pub fn overdispersion_check(params: &ModelParams, design: &DesignMatrix) -> Result<Vec<bool>> {
    params.check_design(design)?;
    let eta = design.linear_predictor(&params.beta);
    let zeta = design.linear_predictor(&params.gamma);
    let s2 = params.sigma_diag();
    let (n, p) = (design.n(), design.p());
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            let pi = sigmoid(zeta[(i, j)]);
            // Var - E = E² (e^{σ²} - π) / π, so the sign is that of e^{σ²} - π
            // whenever E > 0; compare directly to avoid cancellation.
            let (mean, _, degenerate) = zi_moments(pi, eta[(i, j)], s2[j]);
            out.push(!degenerate && mean > 0.0 && s2[j].exp() > pi);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::intercept_design;

    fn scalar_params(beta: f64, gamma: f64, c: &[f64]) -> ModelParams {
        let p = c.len();
        ModelParams::new(
            DVector::from_element(1, beta),
            DVector::from_element(1, gamma),
            DMatrix::from_column_slice(p, 1, c),
        )
        .unwrap()
    }

    #[test]
    fn structural_zeros_when_absent() {
        let design = intercept_design(50, 3);
        let params = scalar_params(2.0, -1e6, &[0.5, 0.1, 0.2]);
        let (counts, state) = sample(&params, &design, 3).unwrap();
        assert!(counts.iter().all(|&c| c == 0));
        assert!(state.presence.iter().all(|&u| u == 0));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let design = intercept_design(20, 4);
        let params = scalar_params(0.5, 0.3, &[0.5, 0.1, -0.2, 0.4]);
        let a = sample(&params, &design, 11).unwrap();
        let b = sample(&params, &design, 11).unwrap();
        assert_eq!(a, b);
        let c = sample(&params, &design, 12).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn gaussian_layer_is_factor_times_loading() {
        let design = intercept_design(10, 3);
        let params = ModelParams::new(
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_row_slice(3, 2, &[0.3, 0.1, -0.2, 0.5, 0.4, 0.0]),
        )
        .unwrap();
        let (_, st) = sample(&params, &design, 5).unwrap();
        let z = &st.factors * params.loading.transpose();
        assert!((z - &st.gaussian).abs().max() < 1e-15);
    }

    #[test]
    fn plain_poisson_moments() {
        let (m, v, _) = zi_moments(1.0, 0.0, 0.0);
        assert_eq!((m, v), (1.0, 1.0));
        let (m, v, _) = zi_moments(0.5, 0.0, 0.0);
        assert!((m - 0.5).abs() < 1e-15 && (v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_presence_is_degenerate() {
        let (m, v, deg) = zi_moments(0.0, 1.0, 0.3);
        assert_eq!((m, v, deg), (0.0, 0.0, true));
    }

    #[test]
    fn zero_covariance_entry_gives_zero_covariance() {
        let design = intercept_design(1, 2);
        let params = ModelParams::new(
            DVector::from_element(1, 0.2),
            DVector::from_element(1, 0.0),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let m = moments(&params, &design, 0, 0, Some(1)).unwrap();
        assert_eq!(m.covariance, Some(0.0));
    }

    #[test]
    fn invert_plain_poisson() {
        let (pi, mu, s2) = mom_invert(1.0, 2.0, 5.0).unwrap();
        assert!((pi - 1.0).abs() < 1e-12 && mu.abs() < 1e-12 && s2.abs() < 1e-12);
    }

    #[test]
    fn invert_round_trip() {
        let [e1, e2, e3] = raw_moments(0.7, 0.3, 0.5);
        let (pi, mu, s2) = mom_invert(e1, e2, e3).unwrap();
        assert!((pi - 0.7).abs() < 1e-10);
        assert!((mu - 0.3).abs() < 1e-10);
        assert!((s2 - 0.5).abs() < 1e-10);
    }

    #[test]
    fn raw_moments_agree_with_mean_and_variance() {
        let (pi, mu, s2) = (0.7, 0.3, 0.5);
        let [e1, e2, _] = raw_moments(pi, mu, s2);
        let (m, v, _) = zi_moments(pi, mu, s2);
        assert!((e1 - m).abs() < 1e-12);
        assert!((e2 - e1 * e1 - v).abs() < 1e-12);
    }

    #[test]
    fn underdispersion_is_infeasible() {
        assert!(matches!(mom_invert(1.0, 0.9, 5.0), Err(Error::InversionInfeasible(_))));
        assert!(matches!(mom_invert(1.0, 2.0, 3.9), Err(Error::InversionInfeasible(_))));
        assert!(mom_invert(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn overdispersion_flags() {
        let design = intercept_design(1, 1);
        let plain = scalar_params(0.0, 1e6, &[0.0]);
        assert_eq!(overdispersion_check(&plain, &design).unwrap(), vec![false]);
        let half = scalar_params(0.0, 0.0, &[0.0]);
        assert_eq!(overdispersion_check(&half, &design).unwrap(), vec![true]);
        let latent = scalar_params(0.0, 1e6, &[0.1f64.sqrt()]);
        assert_eq!(overdispersion_check(&latent, &design).unwrap(), vec![true]);
    }
}

//! Poisson log-normal PCA without zero inflation: every observed cell is
//! treated as present and the presence coefficients leave the parameter
//! vector.

use crate::design::DesignMatrix;
use crate::elbo::ModelKind;
use crate::error::Result;
use crate::optim::{fit, FitConfig, FitResult};
use crate::panel::ObservedPanel;

/// Runs the usual fitting pipeline with the presence layer switched off.
/// The returned γ is a zero vector kept for shape compatibility.
pub fn fit_pln(panel: &ObservedPanel, design: &DesignMatrix, config: &FitConfig) -> Result<FitResult> {
    let config = FitConfig { model: ModelKind::Pln, ..config.clone() };
    fit(panel, design, &config)
}

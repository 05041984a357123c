//! Loading counts, covariates and fit documents.

use std::path::Path;

use nalgebra::DMatrix;

use ziplnpca::design::{assemble_design, intercept_design, DesignMatrix, EffectsDesign};
use ziplnpca::optim::FitResult;
use ziplnpca::panel::{MaskConvention, ObservedPanel};

use crate::args::{DataArgs, DesignKind};
use crate::output::{CliError, CliResult};

pub fn load_panel(args: &DataArgs) -> CliResult<ObservedPanel> {
    if !args.counts.exists() {
        return Err(CliError::usage(format!("counts file '{}' not found", args.counts.display())));
    }
    let convention = match &args.missing_token {
        Some(t) => MaskConvention::Sentinel(t.clone()),
        None => MaskConvention::EmptyCell,
    };
    Ok(ObservedPanel::load(&args.counts, &convention)?)
}

/// Reads an id column plus numeric columns and checks the ids against `expected`.
fn read_covariates(path: &Path, expected: &[String], what: &str) -> CliResult<DMatrix<f64>> {
    let bad = |m: String| CliError::usage(format!("{what} covariates '{}': {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| bad(e.to_string()))?;
    let k = rdr.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(1);
    if k == 0 {
        return Err(bad("expected an id column and at least one covariate".into()));
    }
    let mut values = Vec::new();
    let mut ids = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        ids.push(record[0].to_string());
        for f in record.iter().skip(1) {
            values.push(f.parse::<f64>().map_err(|_| bad(format!("row {}: '{f}' is not a number", r + 2)))?);
        }
    }
    if ids != expected {
        return Err(bad("ids do not match the counts file in order".into()));
    }
    Ok(DMatrix::from_row_slice(ids.len(), k, &values))
}

pub fn load_design(args: &DataArgs, panel: &ObservedPanel) -> CliResult<DesignMatrix> {
    let (n, p) = (panel.n(), panel.p());
    let design = match args.design {
        DesignKind::Effects => assemble_design(None, None, None, EffectsDesign::Full, n, p)?,
        DesignKind::Intercept => intercept_design(n, p),
        DesignKind::Covariates => {
            if args.site_covariates.is_none() && args.year_covariates.is_none() {
                return Err(CliError::usage("--design covariates needs --site-covariates or --year-covariates"));
            }
            let mut site = DMatrix::from_element(n, 1, 1.0);
            if let Some(path) = &args.site_covariates {
                let m = read_covariates(path, panel.site_ids(), "site")?;
                site = DMatrix::from_fn(n, m.ncols() + 1, |i, c| if c == 0 { 1.0 } else { m[(i, c - 1)] });
            }
            let year = match &args.year_covariates {
                Some(path) => Some(read_covariates(path, panel.year_labels(), "year")?),
                None => None,
            };
            assemble_design(Some(site), year, None, EffectsDesign::Genuine, n, p)?
        }
    };
    Ok(design)
}

pub fn load_fit(path: &Path, panel: &ObservedPanel, design: &DesignMatrix) -> CliResult<FitResult> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read fit document '{}': {e}", path.display())))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("fit document is not valid JSON: {e}")))?;
    let fit = FitResult::from_json(&doc)?;
    if fit.params.p() != panel.p() || fit.params.d() != design.d() || fit.varparams.means.nrows() != panel.n() {
        return Err(CliError::usage(format!(
            "fit document (p = {}, d = {}, n = {}) does not match the counts and design (p = {}, d = {}, n = {})",
            fit.params.p(),
            fit.params.d(),
            fit.varparams.means.nrows(),
            panel.p(),
            design.d(),
            panel.n()
        )));
    }
    Ok(fit)
}

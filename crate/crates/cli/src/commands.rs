use std::path::{Path, PathBuf};

use ziplnpca::identifiability::{check_full, check_lowrank, pair_coverage};
use ziplnpca::optim::{fit as fit_model, FitConfig, FitResult};
use ziplnpca::panel::ObservedPanel;
use ziplnpca::trend::{changepoint as fit_changepoint, extract_year_effects, linear_trend, TrendTarget, YearEffects};
use ziplnpca::uncertainty::{
    impute_conditional, impute_marginal, intervals_conditional, intervals_marginal, sandwich, ImputationMode,
    ImputationResult, IntervalConfig,
};

use crate::args::{ChangepointArgs, CheckArgs, DataArgs, FitArgs, ImputeArgs, IntervalsArgs, ModeArg, TargetArg, TrendArgs};
use crate::data::{load_design, load_fit, load_panel};
use crate::output::{num, CliError, CliResult, Run};

fn data_inputs(data: &DataArgs) -> Vec<&Path> {
    let mut v = vec![data.counts.as_path()];
    v.extend(data.site_covariates.as_deref());
    v.extend(data.year_covariates.as_deref());
    v
}

pub fn fit(args: &FitArgs) -> CliResult<PathBuf> {
    let panel = load_panel(&args.data)?;
    let design = load_design(&args.data, &panel)?;
    let mut run = Run::start(&args.out.out, "fit", args, args.seed, &data_inputs(&args.data))?;
    let config = FitConfig {
        q: args.q,
        max_iters: args.max_iters,
        rel_tol: args.rel_tol,
        step_rule: args.step_rule.into(),
        seed: args.seed,
        criterion: args.criterion.into(),
        model: args.model.into(),
        standardize: !args.no_standardize,
        warm_start: !args.no_warm_start,
    };
    let res = fit_model(&panel, &design, &config)?;
    let mut doc = res.to_json();
    doc["site_ids"] = panel.site_ids().into();
    doc["year_labels"] = panel.year_labels().into();
    run.write_json("fit", doc)?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let rows: Vec<Vec<String>> = res
        .criterion_table
        .iter()
        .map(|r| {
            vec![r.q.to_string(), opt(r.elbo), opt(r.bic), opt(r.icl), r.error.clone().unwrap_or_default()]
        })
        .collect();
    run.write_csv("criteria", &["q", "elbo", "bic", "icl", "error"], &rows)?;
    run.finish()
}

/// Loads counts, design and fit for the commands that consume a fit.
fn fitted(data: &DataArgs, fit: &Path) -> CliResult<(ObservedPanel, ziplnpca::design::DesignMatrix, FitResult)> {
    let panel = load_panel(data)?;
    let design = load_design(data, &panel)?;
    let res = load_fit(fit, &panel, &design)?;
    Ok((panel, design, res))
}

fn with_fit<'a>(data: &'a DataArgs, fit: &'a Path) -> Vec<&'a Path> {
    let mut v = data_inputs(data);
    v.push(fit);
    v
}

const INTERVAL_HEADER: [&str; 10] = ["site", "year", "point", "ci_lo", "ci_hi", "pi_lo", "pi_hi", "mode", "B", "level"];

pub fn impute(args: &ImputeArgs) -> CliResult<PathBuf> {
    let (panel, design, res) = fitted(&args.data, &args.fit)?;
    let mut run = Run::start(&args.out.out, "impute", args, res.config.seed, &with_fit(&args.data, &args.fit))?;
    let mode: ImputationMode = args.mode.into();
    let points = match args.mode {
        ModeArg::Conditional => impute_conditional(&panel, &design, &res)?,
        ModeArg::Marginal => impute_marginal(&panel, &design, &res)?,
    };
    let rows: Vec<Vec<String>> = panel
        .missing_cells()
        .into_iter()
        .zip(points)
        .map(|((i, j), v)| {
            let mut r = vec![panel.site_ids()[i].clone(), panel.year_labels()[j].clone(), num(v)];
            r.extend(std::iter::repeat_n(String::new(), 4));
            r.extend([mode.to_string(), "0".into(), String::new()]);
            r
        })
        .collect();
    run.write_csv("impute", &INTERVAL_HEADER, &rows)?;
    run.finish()
}

pub fn interval_rows(panel: &ObservedPanel, imp: &ImputationResult) -> Vec<Vec<String>> {
    imp.cells
        .iter()
        .map(|c| {
            let (pl, ph) = c.pi.map_or((String::new(), String::new()), |(a, b)| (num(a), num(b)));
            vec![
                panel.site_ids()[c.site].clone(),
                panel.year_labels()[c.year].clone(),
                num(c.point),
                num(c.ci.0),
                num(c.ci.1),
                pl,
                ph,
                imp.mode.to_string(),
                imp.particles.to_string(),
                num(imp.level),
            ]
        })
        .collect()
}

pub fn intervals(args: &IntervalsArgs) -> CliResult<PathBuf> {
    let (panel, design, res) = fitted(&args.data, &args.fit)?;
    let mut run = Run::start(&args.out.out, "intervals", args, args.seed, &with_fit(&args.data, &args.fit))?;
    let var = sandwich(&panel, &design, &res)?;
    let cfg = IntervalConfig { particles: args.particles, seed: args.seed, predict: !args.confidence_only };
    let imp = match args.mode {
        ModeArg::Conditional => intervals_conditional(&panel, &design, &res, &var, &cfg, args.level)?,
        ModeArg::Marginal => intervals_marginal(&panel, &design, &res, &var, &cfg, args.level)?,
    };
    run.write_csv("intervals", &INTERVAL_HEADER, &interval_rows(&panel, &imp))?;
    run.finish()
}

fn year_effects(args: &TrendArgs) -> CliResult<(ObservedPanel, YearEffects, u64)> {
    let (panel, design, res) = fitted(&args.data, &args.fit)?;
    let var = sandwich(&panel, &design, &res)?;
    let target = match args.target {
        TargetArg::Abundance => TrendTarget::Abundance,
        TargetArg::Presence => TrendTarget::Presence,
    };
    let fx = extract_year_effects(&res, &design, &var, target)?;
    Ok((panel, fx, res.config.seed))
}

fn effects_json(panel: &ObservedPanel, fx: &YearEffects) -> serde_json::Value {
    let cov: Vec<Vec<f64>> = (0..fx.p()).map(|r| fx.cov.row(r).iter().copied().collect()).collect();
    serde_json::json!({
        "target": fx.target,
        "year_labels": panel.year_labels(),
        "effects": fx.effects.as_slice(),
        "cov": cov,
    })
}

fn effect_rows(panel: &ObservedPanel, fx: &YearEffects, fitted: &[f64]) -> Vec<Vec<String>> {
    (0..fx.p())
        .map(|j| {
            vec![
                (j + 1).to_string(),
                panel.year_labels()[j].clone(),
                num(fx.effects[j]),
                num(fx.cov[(j, j)].max(0.0).sqrt()),
                num(fitted[j]),
            ]
        })
        .collect()
}

pub fn trend(args: &TrendArgs) -> CliResult<PathBuf> {
    let (panel, fx, seed) = year_effects(args)?;
    let mut run = Run::start(&args.out.out, "trend", args, seed, &with_fit(&args.data, &args.fit))?;
    let t = linear_trend(&fx)?;
    let mut doc = effects_json(&panel, &fx);
    doc["trend"] = serde_json::to_value(&t).map_err(|e| CliError::usage(e.to_string()))?;
    run.write_json("trend", doc)?;
    run.write_csv("trend_plot", &["t", "year", "effect", "se", "fitted"], &effect_rows(&panel, &fx, &t.fitted(fx.p())))?;
    run.finish()
}

pub fn changepoint(args: &ChangepointArgs) -> CliResult<PathBuf> {
    let a = &args.trend;
    let (panel, fx, seed) = year_effects(a)?;
    let mut run = Run::start(&a.out.out, "changepoint", args, seed, &with_fit(&a.data, &a.fit))?;
    let cp = fit_changepoint(&fx, args.alpha)?;
    let mut doc = effects_json(&panel, &fx);
    doc["change_year"] = panel.year_labels()[cp.delta_hat - 1].clone().into();
    doc["changepoint"] = serde_json::to_value(&cp).map_err(|e| CliError::usage(e.to_string()))?;
    run.write_json("changepoint", doc)?;
    run.write_csv("changepoint_plot", &["t", "year", "effect", "se", "fitted"], &effect_rows(&panel, &fx, &cp.fitted(fx.p())))?;
    let factor = (fx.p() - 2) as f64;
    let rows: Vec<Vec<String>> = cp
        .candidates
        .iter()
        .map(|c| {
            vec![
                c.t.to_string(),
                panel.year_labels()[c.t - 1].clone(),
                num(c.z),
                num(c.p_value),
                num((factor * c.p_value).min(1.0)),
            ]
        })
        .collect();
    run.write_csv("changepoint_pvalues", &["t", "year", "z", "p_value", "corrected_p"], &rows)?;
    run.finish()
}

pub fn check_identifiability(args: &CheckArgs) -> CliResult<PathBuf> {
    let panel = load_panel(&args.data)?;
    let design = load_design(&args.data, &panel)?;
    let mut inputs = data_inputs(&args.data);
    let res = match &args.fit {
        Some(path) => {
            inputs.push(path);
            Some(load_fit(path, &panel, &design)?)
        }
        None => None,
    };
    let q = args.q.or(res.as_ref().map(|r| r.params.q()));
    let mut run = Run::start(&args.out.out, "check-identifiability", args, 0, &inputs)?;
    let full = check_full(panel.mask(), &design);
    let cov = pair_coverage(panel.mask(), panel.p());
    let low = match q {
        Some(q) => {
            let sigma = res.as_ref().map(|r| r.params.sigma());
            Some(check_lowrank(panel.mask(), panel.p(), q, sigma.as_ref())?)
        }
        None => None,
    };
    let labels = panel.year_labels();
    let name_years = |ys: &[usize]| ys.iter().map(|&j| labels[j].clone()).collect::<Vec<_>>();
    let doc = serde_json::json!({
        "A1": full.a1,
        "A2": full.a2,
        "A3": low.as_ref().map(|l| l.a3),
        "A4": low.as_ref().map(|l| l.a4),
        "q": q,
        "restricted_rank": full.restricted_rank,
        "d": full.d,
        "pair_coverage": cov.cardinality(),
        "pairs_total": panel.p() * panel.p(),
        "unobserved_pairs": full.failing_pairs.iter().map(|&(j, k)| [labels[j].clone(), labels[k].clone()]).collect::<Vec<_>>(),
        "unobserved_years": low.as_ref().map(|l| name_years(&l.unobserved_years)),
        "cover": low.as_ref().and_then(|l| l.cover.as_ref()).map(|c| serde_json::json!({
            "blocks": c.blocks.iter().map(|b| name_years(b)).collect::<Vec<_>>(),
            "overlaps": c.overlaps.iter().map(|b| name_years(b)).collect::<Vec<_>>(),
        })),
        "obstructions": low.as_ref().map(|l| l.obstructions.clone()).unwrap_or_default(),
    });
    run.write_json("identifiability", doc)?;
    run.finish()
}

//! Simulation grid: draw complete panels, degrade them, refit and score.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use ziplnpca::design::{intercept_design, DesignMatrix};
use ziplnpca::elbo::ModelKind;
use ziplnpca::missingness::{compare, degrade, evaluate, EvalReport, Mechanism, MissingScenario};
use ziplnpca::model::{sample, ModelParams};
use ziplnpca::optim::{fit, FitConfig};
use ziplnpca::panel::ObservedPanel;
use ziplnpca::uncertainty::{intervals_conditional, intervals_marginal, sandwich, IntervalConfig};

use crate::args::{ModeArg, SimulateArgs};
use crate::output::{num, CliError, CliResult, Run};

/// Loading column k follows cos(πk(j + ½)/p), scaled by √(σ²/q).
fn truth(args: &SimulateArgs) -> CliResult<ModelParams> {
    let (p, q) = (args.years, args.q);
    let scale = (args.sigma2 / q as f64).sqrt();
    let loading = DMatrix::from_fn(p, q, |j, k| {
        scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / p as f64).cos()
    });
    let logit = (args.presence / (1.0 - args.presence)).ln();
    Ok(ModelParams::new(DVector::from_element(1, args.mu), DVector::from_element(1, logit), loading)?)
}

/// SplitMix64 step, used to give every replicate its own seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Task {
    mech: Mechanism,
    rate: f64,
    rep: usize,
    seed: u64,
}

struct Outcome {
    zi: Result<EvalReport, String>,
    pln: Option<Result<EvalReport, String>>,
    missing: usize,
}

fn score(
    args: &SimulateArgs,
    full: &ObservedPanel,
    panel: &ObservedPanel,
    design: &DesignMatrix,
    kind: ModelKind,
    seed: u64,
) -> ziplnpca::Result<EvalReport> {
    let config = FitConfig { model: kind, seed, ..FitConfig::with_q(args.q) };
    let res = fit(panel, design, &config)?;
    let var = sandwich(panel, design, &res)?;
    let cfg = IntervalConfig::new(args.particles, seed);
    let imp = match args.mode {
        ModeArg::Conditional => intervals_conditional(panel, design, &res, &var, &cfg, args.level)?,
        ModeArg::Marginal => intervals_marginal(panel, design, &res, &var, &cfg, args.level)?,
    };
    evaluate(full, panel, &imp)
}

fn run_task(args: &SimulateArgs, truth: &ModelParams, design: &DesignMatrix, t: &Task) -> ziplnpca::Result<Outcome> {
    let (counts, _) = sample(truth, design, t.seed)?;
    let full = ObservedPanel::complete(args.sites, args.years, counts)?;
    let panel = degrade(&full, &MissingScenario::new(t.mech, t.rate, t.seed))?;
    let missing = panel.missing_cells().len();
    // numerical failures are recorded per replicate; anything else aborts the grid
    let scored = |kind| match score(args, &full, &panel, design, kind, t.seed) {
        Err(e) if e.is_numerical() => Ok(Err(e.to_string())),
        other => other.map(Ok),
    };
    let zi = scored(ModelKind::ZeroInflated)?;
    let pln = if args.compare_pln { Some(scored(ModelKind::Pln)?) } else { None };
    Ok(Outcome { zi, pln, missing })
}

pub fn run(args: &SimulateArgs) -> CliResult<PathBuf> {
    if args.sites < 2 || args.years < 2 || args.q < 1 || args.q > args.years {
        return Err(CliError::usage("need at least 2 sites, 2 years and 1 ≤ q ≤ years"));
    }
    if args.replicates == 0 || !(args.sigma2 >= 0.0) {
        return Err(CliError::usage("need at least one replicate and a non-negative --sigma2"));
    }
    let mut run = Run::start(&args.out.out, "simulate", args, args.seed, &[])?;
    let truth = truth(args)?;
    let design = intercept_design(args.sites, args.years);

    let mut tasks = Vec::new();
    for &mech in &args.mechanisms {
        for &rate in &args.rates {
            for rep in 0..args.replicates {
                let seed = mix(args.seed ^ mix(tasks.len() as u64));
                tasks.push(Task { mech, rate, rep, seed });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::usage(format!("cannot start {} worker threads: {e}", args.jobs)))?;
    let outcomes: Vec<CliResult<Outcome>> =
        pool.install(|| tasks.par_iter().map(|t| run_task(args, &truth, &design, t).map_err(CliError::from)).collect());

    let mut summary = Vec::new();
    let mut aggregate = Vec::new();
    for (cell, chunk) in tasks.chunks(args.replicates).zip(outcomes.chunks(args.replicates)) {
        let (mech, rate) = (cell[0].mech, cell[0].rate);
        let mut cell_rows = Vec::new();
        let (mut in_band, mut scored, mut ratio_medians) = (0, 0, Vec::new());
        for (t, out) in cell.iter().zip(chunk) {
            let out = out.as_ref().map_err(CliError::clone)?;
            let models = [("zi", Some(&out.zi)), ("pln", out.pln.as_ref())];
            for (model, rep) in models.into_iter().filter_map(|(m, r)| r.map(|r| (m, r))) {
                let mut row = vec![mech.name().to_string(), num(rate), t.rep.to_string(), t.seed.to_string(), model.into(), out.missing.to_string()];
                match rep {
                    Ok(r) => {
                        let mut widths = r.interval_widths();
                        widths.sort_by(f64::total_cmp);
                        let median_width = widths.get(widths.len() / 2).copied().unwrap_or(f64::NAN);
                        row.extend([num(r.coverage), num(r.binomial_band.0), num(r.binomial_band.1), r.in_band.to_string(), num(r.mean_abs_error()), num(median_width), String::new()]);
                        if model == "zi" {
                            in_band += usize::from(r.in_band);
                            scored += 1;
                        }
                        for c in &r.cells {
                            cell_rows.push(vec![
                                t.rep.to_string(),
                                model.into(),
                                c.site.to_string(),
                                c.year.to_string(),
                                c.truth.to_string(),
                                num(c.point),
                                num(c.abs_error),
                                num(c.lo),
                                num(c.hi),
                                c.covered.to_string(),
                            ]);
                        }
                    }
                    Err(e) => row.extend([String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), e.clone()]),
                }
                summary.push(row);
            }
            if let (Ok(a), Some(Ok(b))) = (&out.zi, &out.pln) {
                ratio_medians.push(compare(a, b)?.quartiles[2]);
            }
        }
        run.write_csv(
            &format!("eval_{}_{}", mech.name(), num(rate)),
            &["replicate", "model", "site", "year", "truth", "point", "abs_error", "lo", "hi", "covered"],
            &cell_rows,
        )?;
        aggregate.push(serde_json::json!({
            "mechanism": mech.name(),
            "rate": rate,
            "replicates": args.replicates,
            "scored": scored,
            "in_band": in_band,
            "median_error_ratio_zi_over_pln": ratio_medians,
        }));
    }
    run.write_csv(
        "summary",
        &["mechanism", "rate", "replicate", "seed", "model", "missing_cells", "coverage", "band_lo", "band_hi", "in_band", "mae", "median_width", "error"],
        &summary,
    )?;
    run.write_json(
        "aggregate",
        serde_json::json!({
            "level": args.level,
            "particles": args.particles,
            "mode": args.mode,
            "grid": aggregate,
        }),
    )?;
    run.finish()
}

//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{gradient_discrepancy, hessian_discrepancy, random_instance, Coord};
use ziplnpca::design::{assemble_design, DesignMatrix, EffectsDesign};
use ziplnpca::elbo::ModelKind;
use ziplnpca::identifiability::{check_lowrank, complete_sigma, pair_coverage};
use ziplnpca::missingness::{degrade, evaluate, Mechanism, MissingScenario};
use ziplnpca::model::{moments, mom_invert, overdispersion_check, raw_moments, sample, ModelParams};
use ziplnpca::optim::{criteria, fit, FitConfig, QSpec};
use ziplnpca::panel::ObservedPanel;
use ziplnpca::pln::fit_pln;
use ziplnpca::trend::{changepoint, TrendTarget, YearEffects};
use ziplnpca::uncertainty::{impute_conditional, intervals_conditional, sandwich, IntervalConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn within(limit_secs: u64, elapsed: Duration) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Intercept, one standard-normal site covariate and a centred year trend.
fn covariate_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DesignMatrix {
    let site = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { gauss(rng) });
    let year = DMatrix::from_fn(p, 1, |j, _| (j as f64 - (p as f64 - 1.0) / 2.0) / p as f64);
    assemble_design(Some(site), Some(year), None, EffectsDesign::Genuine, n, p).unwrap()
}

fn graded_loading(p: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, q, |j, k| 0.6 + 0.1 * ((j + k) % 3) as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn c1_gradient() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut blocks = 0;
    for seed in 0..20u64 {
        let n = 3 + (seed % 4) as usize;
        let p = 2 + (seed % 4) as usize;
        let q = (1 + (seed % 3) as usize).min(p);
        let inst = random_instance(1000 + seed, n, p, q, ModelKind::ZeroInflated);
        let disc = gradient_discrepancy(&inst, 1e-6);
        blocks = blocks.max(disc.len());
        for (_, rel) in disc {
            worst = worst.max(rel);
        }
    }
    let el = t.elapsed();
    Outcome {
        pass: worst <= 1e-5 && blocks == 6 && within(10, el),
        detail: format!("worst block relative error {worst:.2e} over 20 instances, {blocks} blocks, {el:.1?}"),
    }
}

fn c2_hessian() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    let mut zero_analytic_exact = true;
    for seed in 0..10u64 {
        let n = 3 + (seed % 3) as usize;
        let p = 2 + (seed % 3) as usize;
        let q = (1 + (seed % 2) as usize).min(p);
        let inst = random_instance(2000 + seed, n, p, q, ModelKind::ZeroInflated);
        for ((a, b), err, an, fd) in hessian_discrepancy(&inst, 1e-5) {
            if matches!((a, b), (Coord::Beta, Coord::Gamma) | (Coord::Gamma, Coord::Loading)) {
                zero_analytic_exact &= an == 0.0;
                worst_zero = worst_zero.max(fd);
            } else if an.max(fd) > 0.0 {
                worst = worst.max(err / an.max(fd));
            }
        }
    }
    let el = t.elapsed();
    Outcome {
        pass: worst <= 1e-4 && zero_analytic_exact && worst_zero <= 1e-8 && within(30, el),
        detail: format!(
            "worst block relative error {worst:.2e}; zero blocks analytic exact {zero_analytic_exact}, max |fd| {worst_zero:.1e}; {el:.1?}"
        ),
    }
}

fn c3_moments() -> Outcome {
    let t = Instant::now();
    let draws = 1_000_000;
    let mu = 0.5;
    let mut worst_z: f64 = 0.0;
    let mut overdispersed = true;
    for (a, pi) in [0.3f64, 0.6, 0.9].into_iter().enumerate() {
        for (b, s2) in [0.1f64, 0.4, 0.8].into_iter().enumerate() {
            let c: f64 = s2.sqrt();
            let loading = DMatrix::from_row_slice(2, 1, &[c, 0.5 * c]);
            let params = ModelParams::new(
                DVector::from_element(1, mu),
                DVector::from_element(1, (pi / (1.0 - pi)).ln()),
                loading,
            )
            .unwrap();
            let design = ziplnpca::design::intercept_design(draws, 2);
            let (y, _) = sample(&params, &design, 30 + (3 * a + b) as u64).unwrap();
            let y0: Vec<f64> = y.iter().step_by(2).map(|&v| v as f64).collect();
            let y1: Vec<f64> = y.iter().skip(1).step_by(2).map(|&v| v as f64).collect();
            let m = moments(&params, &design, 0, 0, Some(1)).unwrap();

            let nf = draws as f64;
            let mean0 = y0.iter().sum::<f64>() / nf;
            let mean1 = y1.iter().sum::<f64>() / nf;
            let sq: Vec<f64> = y0.iter().map(|v| (v - mean0).powi(2)).collect();
            let var0 = sq.iter().sum::<f64>() / (nf - 1.0);
            let cross: Vec<f64> = y0.iter().zip(&y1).map(|(u, v)| (u - mean0) * (v - mean1)).collect();
            let cov01 = cross.iter().sum::<f64>() / (nf - 1.0);
            let sd_of = |v: &[f64], m: f64| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
            let z_mean = (mean0 - m.mean) / (var0 / nf).sqrt();
            let z_var = (var0 - m.variance) / (sd_of(&sq, var0) / nf.sqrt());
            let z_cov = (cov01 - m.covariance.unwrap()) / (sd_of(&cross, cov01) / nf.sqrt());
            worst_z = worst_z.max(z_mean.abs()).max(z_var.abs()).max(z_cov.abs());
            overdispersed &= m.variance > m.mean;
            overdispersed &= overdispersion_check(&params, &ziplnpca::design::intercept_design(1, 2)).unwrap().iter().all(|&b| b);
        }
    }
    let el = t.elapsed();
    Outcome {
        pass: worst_z <= 3.0 && overdispersed && within(60, el),
        detail: format!("largest |z| {worst_z:.2} over 9 grid points x (mean, variance, covariance); Var > E everywhere {overdispersed}; {el:.1?}"),
    }
}

fn c4_inversion() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..5 {
        let pi = 0.1 + 0.2 * k as f64;
        for l in 0..5 {
            let mu = -1.0 + 0.5 * l as f64;
            for r in 0..5 {
                let s2 = 0.1 + 0.3 * r as f64;
                let [e1, e2, e3] = raw_moments(pi, mu, s2);
                let (p2, m2, v2) = mom_invert(e1, e2, e3).unwrap();
                worst = worst.max((p2 - pi).abs()).max((m2 - mu).abs()).max((v2 - s2).abs());
            }
        }
    }
    let el = t.elapsed();
    Outcome { pass: worst <= 1e-8 && within(1, el), detail: format!("largest round-trip error {worst:.2e} over 125 points; {el:.1?}") }
}

fn c5_monotone() -> Outcome {
    let t = Instant::now();
    let mut violations = 0;
    let mut steps = 0;
    let mut worst_drop: f64 = 0.0;
    for rep in 0..20u64 {
        let (n, p, q) = (200, 10, 1 + (rep % 2) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
        let design = covariate_design(&mut rng, n, p);
        let truth = ModelParams::new(
            DVector::from_vec(vec![1.0, 0.3, -0.5]),
            DVector::from_vec(vec![0.8, -0.4, 0.5]),
            graded_loading(p, q),
        )
        .unwrap();
        let (counts, _) = sample(&truth, &design, rep).unwrap();
        let full = ObservedPanel::complete(n, p, counts).unwrap();
        let panel = degrade(&full, &MissingScenario::new(Mechanism::Mcar, 0.2, rep)).unwrap();
        let res = fit(&panel, &design, &FitConfig::with_q(q)).unwrap();
        for w in res.elbo_trace.windows(2) {
            steps += 1;
            let drop = (w[0] - w[1]) / w[0].abs();
            worst_drop = worst_drop.max(drop);
            if w[1] < w[0] - 1e-8 * w[0].abs() {
                violations += 1;
            }
        }
    }
    let el = t.elapsed();
    Outcome {
        pass: violations == 0 && within(300, el),
        detail: format!("{violations} violations in {steps} iterations over 20 fits; largest relative decrease {worst_drop:.1e}; {el:.1?}"),
    }
}

/// Site rows with no zero or no positive count push a site effect to the
/// boundary, where no finite estimate exists.
fn has_separated_site(counts: &[u64], p: usize) -> bool {
    counts.chunks_exact(p).any(|r| r.iter().all(|&c| c == 0) || r.iter().all(|&c| c > 0))
}

fn c6_recovery() -> Outcome {
    let t = Instant::now();
    let (n, p, q) = (1000, 15, 2);
    let design = assemble_design(None, None, None, EffectsDesign::Full, n, p).unwrap();
    let d = design.d();
    let (mut inside, mut total) = (0usize, 0usize);
    let (mut shared_inside, mut shared_total) = (0usize, 0usize);
    let mut worst_corr: f64 = 1.0;
    let (mut redraws, mut boundary) = (0, 0);
    for rep in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + rep);
        let mut beta = DVector::zeros(d);
        let mut gamma = DVector::zeros(d);
        beta[0] = 2.5;
        for k in 1..n {
            beta[k] = 0.3 * gauss(&mut rng);
            gamma[k] = 0.3 * gauss(&mut rng);
        }
        for j in 1..p {
            beta[n - 1 + j] = -0.03 * j as f64 + 0.1 * gauss(&mut rng);
            gamma[n - 1 + j] = -0.02 * j as f64 + 0.1 * gauss(&mut rng);
        }
        // loading columns average to zero over years, so the latent factor
        // is not confounded with the site effects
        let loading = DMatrix::from_fn(p, q, |j, k| {
            let u = std::f64::consts::PI * (j as f64 + 0.5) / p as f64;
            0.6 * if k == 0 { u.cos() } else { (2.0 * u).cos() }
        });
        let truth = ModelParams::new(beta, gamma, loading).unwrap();
        // a draw is replaced when some site effect has no finite estimate:
        // a site row without zeros or without positive counts, or a site whose
        // presence effect drifts to the boundary during the fit
        let mut stream = 0;
        let (res, var) = loop {
            let (c, _) = sample(&truth, &design, rep * 1000 + stream).unwrap();
            stream += 1;
            if has_separated_site(&c, p) {
                redraws += 1;
                continue;
            }
            let panel = ObservedPanel::complete(n, p, c).unwrap();
            let res = fit(&panel, &design, &FitConfig::with_q(q)).unwrap();
            match sandwich(&panel, &design, &res) {
                Ok(var) => break (res, var),
                Err(ziplnpca::Error::SingularInformation(_)) => boundary += 1,
                Err(e) => panic!("replicate {rep}: {e}"),
            }
        };
        let (bse, gse) = (var.beta_se_info(), var.gamma_se_info());
        let (bsw, gsw) = (var.beta_se(), var.gamma_se());
        for k in 0..d {
            let zb = (res.params.beta[k] - truth.beta[k]) / bse[k];
            let zg = (res.params.gamma[k] - truth.gamma[k]) / gse[k];
            inside += usize::from(zb.abs() <= 3.0) + usize::from(zg.abs() <= 3.0);
            total += 2;
            // intercept and year effects are shared by all sites
            if k == 0 || k >= n {
                let zb = (res.params.beta[k] - truth.beta[k]) / bsw[k];
                let zg = (res.params.gamma[k] - truth.gamma[k]) / gsw[k];
                shared_inside += usize::from(zb.abs() <= 3.0) + usize::from(zg.abs() <= 3.0);
                shared_total += 2;
            }
        }
        let (s, sh) = (truth.sigma(), res.params.sigma());
        let (a, b): (Vec<f64>, Vec<f64>) =
            (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).map(|(j, k)| (s[(j, k)], sh[(j, k)])).unzip();
        worst_corr = worst_corr.min(pearson(&a, &b));
    }
    let el = t.elapsed();
    let frac = inside as f64 / total as f64;
    Outcome {
        pass: frac >= 0.9 && worst_corr >= 0.8 && within(1800, el),
        detail: format!(
            "{:.1}% of β, γ within 3 information SEs (sandwich SEs on shared coefficients: {:.1}%); smallest Σ correlation {worst_corr:.3}; {redraws} separated and {boundary} boundary draws replaced; {el:.0?}",
            100.0 * frac,
            100.0 * shared_inside as f64 / shared_total as f64
        ),
    }
}

fn c7_coverage() -> Outcome {
    let t = Instant::now();
    let (n, p, q, reps) = (2000, 8, 1, 200);
    let truth_beta = [1.0, 0.3, -0.5];
    let mut hits = [0usize; 3];
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
        let design = covariate_design(&mut rng, n, p);
        let truth = ModelParams::new(
            DVector::from_column_slice(&truth_beta),
            DVector::from_vec(vec![0.8, -0.4, 0.5]),
            graded_loading(p, q),
        )
        .unwrap();
        let (counts, _) = sample(&truth, &design, rep).unwrap();
        let panel = ObservedPanel::complete(n, p, counts).unwrap();
        let res = fit(&panel, &design, &FitConfig::with_q(q)).unwrap();
        let se = sandwich(&panel, &design, &res).unwrap().beta_se();
        for k in 0..3 {
            hits[k] += usize::from((res.params.beta[k] - truth_beta[k]).abs() <= 1.959964 * se[k]);
        }
    }
    let el = t.elapsed();
    let cov: Vec<f64> = hits.iter().map(|&h| h as f64 / reps as f64).collect();
    Outcome {
        pass: cov.iter().all(|&c| (0.90..=0.99).contains(&c)) && within(7200, el),
        detail: format!("β coverage {cov:?} over {reps} replicates; {el:.0?}"),
    }
}

fn c8_prediction_coverage() -> Outcome {
    let t = Instant::now();
    let (n, p, q) = (150, 10, 1);
    let mut lines = Vec::new();
    let mut pass = true;
    for mech in [Mechanism::Mcar, Mechanism::MarYearSite] {
        for rate in [0.3, 0.5, 0.7] {
            let mut in_band = 0;
            for rep in 0..10u64 {
                let seed = 7000 + rep;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let design = covariate_design(&mut rng, n, p);
                let truth = ModelParams::new(
                    DVector::from_vec(vec![5.5, 0.3, -0.5]),
                    DVector::from_vec(vec![4.0, -0.4, 0.5]),
                    graded_loading(p, q),
                )
                .unwrap();
                let (counts, _) = sample(&truth, &design, seed).unwrap();
                let full = ObservedPanel::complete(n, p, counts).unwrap();
                let panel = degrade(&full, &MissingScenario::new(mech, rate, seed)).unwrap();
                let res = fit(&panel, &design, &FitConfig::with_q(q)).unwrap();
                let var = sandwich(&panel, &design, &res).unwrap();
                let imp = intervals_conditional(&panel, &design, &res, &var, &IntervalConfig::new(500, seed), 0.9).unwrap();
                in_band += usize::from(evaluate(&full, &panel, &imp).unwrap().in_band);
            }
            pass &= in_band >= 8;
            lines.push(format!("{}@{rate}: {in_band}/10", mech.name()));
        }
    }
    let el = t.elapsed();
    Outcome { pass: pass && within(7200, el), detail: format!("replicates in band: {}; {el:.0?}", lines.join(", ")) }
}

fn c9_zero_inflation_helps() -> Outcome {
    let t = Instant::now();
    let (n, p, q) = (200, 10, 1);
    let mut wins = 0;
    let mut ratios = Vec::new();
    for rep in 0..10u64 {
        let seed = 9000 + rep;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let site = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { gauss(&mut rng) });
        let design = assemble_design(Some(site), None, None, EffectsDesign::Genuine, n, p).unwrap();
        let truth = ModelParams::new(
            DVector::from_vec(vec![2.0, 0.3]),
            DVector::from_vec(vec![(0.3f64 / 0.7).ln(), 0.0]),
            graded_loading(p, q),
        )
        .unwrap();
        let (counts, _) = sample(&truth, &design, seed).unwrap();
        let full = ObservedPanel::complete(n, p, counts).unwrap();
        let panel = degrade(&full, &MissingScenario::new(Mechanism::Mcar, 0.3, seed)).unwrap();
        let cells = panel.missing_cells();
        let mae = |pts: Vec<f64>| {
            cells.iter().zip(&pts).map(|(&(i, j), v)| (full.raw_count(i, j) as f64 - v).abs()).sum::<f64>() / cells.len() as f64
        };
        let zi = fit(&panel, &design, &FitConfig::with_q(q)).unwrap();
        let pl = fit_pln(&panel, &design, &FitConfig::with_q(q)).unwrap();
        let (a, b) = (mae(impute_conditional(&panel, &design, &zi).unwrap()), mae(impute_conditional(&panel, &design, &pl).unwrap()));
        wins += usize::from(a < b);
        ratios.push((a / b * 1000.0).round() / 1000.0);
    }
    let el = t.elapsed();
    Outcome {
        pass: wins >= 8 && within(3600, el),
        detail: format!("ZI-PLN lower MAE in {wins}/10 replicates (MAE ratios {ratios:?}); {el:.1?}"),
    }
}

fn c10_identifiability() -> Outcome {
    let t = Instant::now();
    let (p, q) = (9, 2);
    let blocks: Vec<Vec<usize>> = (0..p - q).map(|s| (s..=s + q).collect()).collect();
    let mask: Vec<bool> = blocks.iter().flat_map(|b| (0..p).map(move |j| b.contains(&j))).collect();
    let cov = pair_coverage(&mask, p);
    // union of (q+1)² blocks, consecutive ones sharing q² pairs
    let mut union = std::collections::BTreeSet::new();
    for b in &blocks {
        for &j in b {
            for &k in b {
                union.insert((j, k));
            }
        }
    }
    let count_ok = cov.cardinality() == 39 && union.len() == 39;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = DMatrix::from_fn(p, q, |_, _| gauss(&mut rng));
        let sigma = &c * c.transpose();
        let hidden = DMatrix::from_fn(p, p, |j, k| if cov.contains(j, k) { sigma[(j, k)] } else { 0.0 });
        let report = check_lowrank(&mask, p, q, Some(&sigma)).unwrap();
        if let (true, Ok(rebuilt)) = (report.a4, complete_sigma(&hidden, &cov, q)) {
            let err = (&rebuilt - &sigma).abs().max();
            worst = worst.max(err);
            exact += usize::from(err <= 1e-8);
        }
    }

    let disjoint: Vec<bool> = [vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8]]
        .iter()
        .flat_map(|b| (0..p).map(move |j| b.contains(&j)))
        .collect();
    let disjoint_rejected = (1..=2).all(|q| !check_lowrank(&disjoint, p, q, None).unwrap().a4);
    let el = t.elapsed();
    Outcome {
        pass: count_ok && exact == 100 && disjoint_rejected && within(30, el),
        detail: format!(
            "|Q| = {} (enumeration {}); {exact}/100 exact completions, worst error {worst:.1e}; disjoint groups rejected {disjoint_rejected}; {el:.1?}",
            cov.cardinality(),
            union.len()
        ),
    }
}

fn c11_bic() -> Outcome {
    let t = Instant::now();
    let (n, p) = (300, 12);
    let (bic, _) = criteria(-100.0, 0.0, 10, 3, 5, 2, ModelKind::ZeroInflated);
    let hand = -100.0 - 0.5 * (5.0 * 2.0 + 2.0 * 3.0) * 10f64.ln();
    let hand_ok = (bic - hand).abs() <= 1e-4 && (bic + 118.4207).abs() <= 1e-4;
    let mut hits = 0;
    let mut picks = Vec::new();
    for rep in 0..10u64 {
        let seed = 1100 + rep;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let site = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { gauss(&mut rng) });
        let design = assemble_design(Some(site), None, None, EffectsDesign::Genuine, n, p).unwrap();
        let loading = DMatrix::from_fn(p, 2, |j, k| {
            let u = std::f64::consts::PI * (j as f64 + 0.5) / p as f64;
            0.8 * if k == 0 { 1.0 } else { (2.0 * u).cos() }
        });
        let truth = ModelParams::new(DVector::from_vec(vec![2.0, 0.3]), DVector::from_vec(vec![1.0, -0.4]), loading).unwrap();
        let (counts, _) = sample(&truth, &design, seed).unwrap();
        let panel = ObservedPanel::complete(n, p, counts).unwrap();
        let res = fit(&panel, &design, &FitConfig { q: QSpec::Range(1, 5), ..FitConfig::default() }).unwrap();
        hits += usize::from(res.q_selected == 2);
        picks.push(res.q_selected);
    }
    let el = t.elapsed();
    Outcome {
        pass: hits >= 7 && hand_ok && within(1800, el),
        detail: format!("q = 2 selected in {hits}/10 (picks {picks:?}); hand BIC {bic:.4}; {el:.1?}"),
    }
}

fn c12_changepoint() -> Outcome {
    let t = Instant::now();
    let p = 12;
    let kink = 6;
    let planted: Vec<f64> = (1..=p)
        .map(|j| 0.05 * (j as f64 - 1.0) - 0.15 * (j as f64 - kink as f64).max(0.0))
        .collect();
    let planted = YearEffects::new(DVector::from_vec(planted), DMatrix::identity(p, p) * 1e-12, TrendTarget::Abundance).unwrap();
    let found = changepoint(&planted, 0.05).unwrap();
    let recovered = found.delta_hat == kink && found.corrected_p < 1e-6;

    // year effects relative to year 1: correlated noise on years 2..p
    let sd = 0.05;
    let mut cov = DMatrix::zeros(p, p);
    for a in 1..p {
        for b in 1..p {
            cov[(a, b)] = sd * sd * if a == b { 1.0 } else { 0.5 };
        }
    }
    let factor = ziplnpca::linalg::psd_sqrt(&cov);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rejections = 0;
    let reps = 1000;
    for _ in 0..reps {
        let z = DVector::from_fn(p, |_, _| gauss(&mut rng));
        let slope = rng.random_range(-0.1..0.1);
        let mut e = DVector::from_fn(p, |j, _| slope * j as f64) + &factor * z;
        e[0] = 0.0;
        let fx = YearEffects::new(e, cov.clone(), TrendTarget::Abundance).unwrap();
        rejections += usize::from(changepoint(&fx, 0.05).unwrap().significant);
    }
    let fpr = rejections as f64 / reps as f64;
    let el = t.elapsed();
    Outcome {
        pass: recovered && fpr <= 0.07 && within(300, el),
        detail: format!(
            "kink at {} (planted {kink}), corrected p {:.1e}; false-positive rate {fpr:.3} over {reps} linear nulls; {el:.1?}",
            found.delta_hat, found.corrected_p
        ),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", c1_gradient),
        ("Hessian correctness", c2_hessian),
        ("moment oracle", c3_moments),
        ("moment inversion", c4_inversion),
        ("monotone VEM", c5_monotone),
        ("parameter recovery", c6_recovery),
        ("sandwich coverage", c7_coverage),
        ("prediction-interval coverage", c8_prediction_coverage),
        ("ZI-PLN vs PLN imputation", c9_zero_inflation_helps),
        ("identifiability geometry", c10_identifiability),
        ("BIC selection", c11_bic),
        ("change point", c12_changepoint),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let out = run();
        failed += usize::from(!out.pass);
        println!("criterion {id:>2} {}: {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

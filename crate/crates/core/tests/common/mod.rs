//! Shared fixtures for the integration suites: random small instances and
//! finite-difference derivative oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ziplnpca::design::{assemble_design, DesignMatrix, EffectsDesign};
use ziplnpca::elbo::{is_free, Elbo, ModelKind, VariationalParams};
use ziplnpca::model::ModelParams;
use ziplnpca::numeric::{logit, sigmoid};
use ziplnpca::panel::ObservedPanel;

pub struct Instance {
    pub panel: ObservedPanel,
    pub design: DesignMatrix,
    pub params: ModelParams,
    pub vp: VariationalParams,
    pub kind: ModelKind,
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}

/// Random instance with an intercept, one site covariate and one cell
/// covariate; about a fifth of cells masked and about half the counts zero.
pub fn random_instance(seed: u64, n: usize, p: usize, q: usize, kind: ModelKind) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let site = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { gauss(&mut rng, 1.0) });
    let cell = DMatrix::from_fn(n * p, 1, |_, _| gauss(&mut rng, 0.5));
    let design = assemble_design(Some(site), None, Some(cell), EffectsDesign::Genuine, n, p).unwrap();
    let d = design.d();

    let mut mask = vec![true; n * p];
    for i in 0..n {
        for j in 0..p {
            mask[i * p + j] = rng.random::<f64>() > 0.2;
        }
        if !(0..p).any(|j| mask[i * p + j]) {
            mask[i * p + rng.random_range(0..p)] = true;
        }
    }
    let counts: Vec<u64> = (0..n * p)
        .map(|_| if rng.random::<f64>() < 0.5 { 0 } else { rng.random_range(1..6) })
        .collect();
    let panel = ObservedPanel::with_mask(n, p, counts, mask).unwrap();

    let beta = DVector::from_fn(d, |_, _| gauss(&mut rng, 0.3));
    let gamma = DVector::from_fn(d, |_, _| gauss(&mut rng, 0.5));
    let loading = DMatrix::from_fn(p, q, |_, _| gauss(&mut rng, 0.4));
    let params = ModelParams::new(beta, gamma, loading).unwrap();
    let means = DMatrix::from_fn(n, q, |_, _| gauss(&mut rng, 0.4));
    let vars = DMatrix::from_fn(n, q, |_, _| 0.3 + 0.9 * rng.random::<f64>());
    let xi = DMatrix::from_fn(n, p, |i, j| {
        if is_free(&panel, kind, i, j) {
            0.1 + 0.8 * rng.random::<f64>()
        } else {
            1.0
        }
    });
    Instance { panel, design, params, vp: VariationalParams { xi, means, vars }, kind }
}

/// Coordinate kinds of the joint (θ, ψ) vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Coord {
    Beta,
    Gamma,
    Loading,
    Mean,
    Var,
    Xi,
}

/// Flat (θ, ψ) coordinate list: (kind, site for ψ, index).
pub fn coordinates(inst: &Instance) -> Vec<(Coord, usize, usize, usize)> {
    let (n, p, q, d) = (inst.panel.n(), inst.panel.p(), inst.params.q(), inst.design.d());
    let mut out = Vec::new();
    for k in 0..d {
        out.push((Coord::Beta, 0, k, 0));
    }
    if inst.kind.has_presence() {
        for k in 0..d {
            out.push((Coord::Gamma, 0, k, 0));
        }
    }
    for j in 0..p {
        for k in 0..q {
            out.push((Coord::Loading, 0, j, k));
        }
    }
    for i in 0..n {
        for k in 0..q {
            out.push((Coord::Mean, i, k, 0));
        }
        for k in 0..q {
            out.push((Coord::Var, i, k, 0));
        }
        for j in 0..p {
            if is_free(&inst.panel, inst.kind, i, j) {
                out.push((Coord::Xi, i, j, 0));
            }
        }
    }
    out
}

/// Reads a natural-scale coordinate.
pub fn get(inst: &Instance, c: (Coord, usize, usize, usize)) -> f64 {
    match c.0 {
        Coord::Beta => inst.params.beta[c.2],
        Coord::Gamma => inst.params.gamma[c.2],
        Coord::Loading => inst.params.loading[(c.2, c.3)],
        Coord::Mean => inst.vp.means[(c.1, c.2)],
        Coord::Var => inst.vp.vars[(c.1, c.2)],
        Coord::Xi => inst.vp.xi[(c.1, c.2)],
    }
}

pub fn set(inst: &mut Instance, c: (Coord, usize, usize, usize), v: f64) {
    match c.0 {
        Coord::Beta => inst.params.beta[c.2] = v,
        Coord::Gamma => inst.params.gamma[c.2] = v,
        Coord::Loading => inst.params.loading[(c.2, c.3)] = v,
        Coord::Mean => inst.vp.means[(c.1, c.2)] = v,
        Coord::Var => inst.vp.vars[(c.1, c.2)] = v,
        Coord::Xi => inst.vp.xi[(c.1, c.2)] = v,
    }
}

/// Unconstrained value: log for variances, logit for ξ.
fn to_free(kind: Coord, v: f64) -> f64 {
    match kind {
        Coord::Var => v.ln(),
        Coord::Xi => logit(v),
        _ => v,
    }
}

fn from_free(kind: Coord, u: f64) -> f64 {
    match kind {
        Coord::Var => u.exp(),
        Coord::Xi => sigmoid(u),
        _ => u,
    }
}

/// Analytic gradient entry for a coordinate.
pub fn analytic(g: &ziplnpca::elbo::Gradient, c: (Coord, usize, usize, usize)) -> f64 {
    match c.0 {
        Coord::Beta => g.beta[c.2],
        Coord::Gamma => g.gamma[c.2],
        Coord::Loading => g.loading[(c.2, c.3)],
        Coord::Mean => g.means[(c.1, c.2)],
        Coord::Var => g.vars[(c.1, c.2)],
        Coord::Xi => g.xi[(c.1, c.2)],
    }
}

/// Largest relative discrepancy per block between the analytic gradient and
/// central differences of the ELBO in unconstrained coordinates.
pub fn gradient_discrepancy(inst: &Instance, h: f64) -> Vec<(Coord, f64)> {
    let eval = |i: &Instance| {
        Elbo::new(&i.panel, &i.design, i.kind).unwrap().elbo(&i.params, &i.vp).unwrap().total
    };
    let g = Elbo::new(&inst.panel, &inst.design, inst.kind).unwrap().grad(&inst.params, &inst.vp).unwrap();
    let mut work = Instance {
        panel: inst.panel.clone(),
        design: inst.design.clone(),
        params: inst.params.clone(),
        vp: inst.vp.clone(),
        kind: inst.kind,
    };
    let mut per_block: std::collections::BTreeMap<Coord, (f64, f64)> = Default::default();
    for c in coordinates(inst) {
        let v0 = get(inst, c);
        let u0 = to_free(c.0, v0);
        set(&mut work, c, from_free(c.0, u0 + h));
        let fp = eval(&work);
        set(&mut work, c, from_free(c.0, u0 - h));
        let fm = eval(&work);
        set(&mut work, c, v0);
        let fd = (fp - fm) / (2.0 * h);
        let jac = match c.0 {
            Coord::Var => v0,
            Coord::Xi => v0 * (1.0 - v0),
            _ => 1.0,
        };
        let an = analytic(&g, c) * jac;
        let e = per_block.entry(c.0).or_insert((0.0, 0.0));
        e.0 = e.0.max((fd - an).abs());
        e.1 = e.1.max(an.abs());
    }
    per_block.into_iter().map(|(k, (err, scale))| (k, err / scale.max(1e-12))).collect()
}

/// Full analytic Hessian over the joint (θ, ψ) coordinates assembled from
/// the per-site blocks.
pub fn assembled_hessian(inst: &Instance) -> DMatrix<f64> {
    let coords = coordinates(inst);
    let e = Elbo::new(&inst.panel, &inst.design, inst.kind).unwrap();
    let layout = e.layout(inst.params.q());
    let dt = layout.len();
    let mut h = DMatrix::zeros(coords.len(), coords.len());
    let mut offset = dt;
    for i in 0..inst.panel.n() {
        let sh = e.site_hessian(&inst.params, &inst.vp, i).unwrap();
        let local = sh.assemble(dt);
        let lp = sh.h_pp.nrows();
        for a in 0..dt + lp {
            let ga = if a < dt { a } else { offset + a - dt };
            for b in 0..dt + lp {
                let gb = if b < dt { b } else { offset + b - dt };
                h[(ga, gb)] += local[(a, b)];
            }
        }
        offset += lp;
    }
    h
}

/// Central differences of the analytic gradient over natural coordinates.
pub fn fd_hessian(inst: &Instance, h: f64) -> DMatrix<f64> {
    let coords = coordinates(inst);
    let grad_vec = |i: &Instance| {
        let g = Elbo::new(&i.panel, &i.design, i.kind).unwrap().grad(&i.params, &i.vp).unwrap();
        DVector::from_iterator(coords.len(), coords.iter().map(|&c| analytic(&g, c)))
    };
    let mut work = Instance {
        panel: inst.panel.clone(),
        design: inst.design.clone(),
        params: inst.params.clone(),
        vp: inst.vp.clone(),
        kind: inst.kind,
    };
    let mut out = DMatrix::zeros(coords.len(), coords.len());
    for (col, &c) in coords.iter().enumerate() {
        let v0 = get(inst, c);
        set(&mut work, c, v0 + h);
        let gp = grad_vec(&work);
        set(&mut work, c, v0 - h);
        let gm = grad_vec(&work);
        set(&mut work, c, v0);
        out.set_column(col, &((gp - gm) / (2.0 * h)));
    }
    out
}

/// Per block pair: (max |analytic − fd|, max |analytic|, max |fd|).
pub fn hessian_discrepancy(inst: &Instance, h: f64) -> Vec<((Coord, Coord), f64, f64, f64)> {
    let coords = coordinates(inst);
    let an = assembled_hessian(inst);
    let fd = fd_hessian(inst, h);
    let mut blocks: std::collections::BTreeMap<(Coord, Coord), (f64, f64, f64)> = Default::default();
    for (a, ca) in coords.iter().enumerate() {
        for (b, cb) in coords.iter().enumerate() {
            // ψ coordinates of different sites are uncoupled
            let both_local = ca.0 >= Coord::Mean && cb.0 >= Coord::Mean;
            if both_local && ca.1 != cb.1 {
                assert_eq!(an[(a, b)], 0.0);
                continue;
            }
            let key = if ca.0 <= cb.0 { (ca.0, cb.0) } else { (cb.0, ca.0) };
            let e = blocks.entry(key).or_insert((0.0, 0.0, 0.0));
            e.0 = e.0.max((an[(a, b)] - fd[(a, b)]).abs());
            e.1 = e.1.max(an[(a, b)].abs());
            e.2 = e.2.max(fd[(a, b)].abs());
        }
    }
    blocks.into_iter().map(|(k, (e, a, f))| (k, e, a, f)).collect()
}

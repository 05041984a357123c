//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Numerical rank by singular values: values below
/// `max(rows_hint, cols) * eps * sigma_max` count as zero.
pub fn numerical_rank(m: &DMatrix<f64>, rows_hint: usize) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = rows_hint.max(m.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Rank of a symmetric positive semidefinite matrix by diagonally pivoted
/// Cholesky; pivots below `rel_tol * max_diag` terminate the factorization.
pub fn psd_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let n = a.nrows();
    let mut w = a.clone();
    let max_diag = (0..n).map(|i| w[(i, i)]).fold(0.0_f64, f64::max);
    if max_diag <= 0.0 {
        return 0;
    }
    let tol = rel_tol * max_diag;
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (piv, &best) = perm[k..]
            .iter()
            .enumerate()
            .max_by(|a, b| w[(*a.1, *a.1)].total_cmp(&w[(*b.1, *b.1)]))
            .unwrap();
        let pk = best;
        if w[(pk, pk)] <= tol {
            return k;
        }
        perm.swap(k, k + piv);
        let d = w[(pk, pk)].sqrt();
        let rest: Vec<usize> = perm[k + 1..].to_vec();
        let col: Vec<f64> = rest.iter().map(|&r| w[(r, pk)] / d).collect();
        for (a_idx, &ra) in rest.iter().enumerate() {
            for (b_idx, &rb) in rest.iter().enumerate().skip(a_idx) {
                let v = w[(ra, rb)] - col[a_idx] * col[b_idx];
                w[(ra, rb)] = v;
                w[(rb, ra)] = v;
            }
        }
    }
    n
}

/// Solves `a x = b` for symmetric `a`, trying Cholesky on `a` or `-a`
/// before falling back to LU. Returns `None` when singular.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let neg = -a;
    if let Some(ch) = neg.cholesky() {
        return Some(-ch.solve(b));
    }
    let lu = a.clone().lu();
    lu.solve(b)
}

/// Inverse of a symmetric matrix with an explicit singularity check based on
/// the eigenvalue spread. On failure returns the eigenvector of the smallest
/// absolute eigenvalue (the null direction).
pub fn symmetric_inverse(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>, DVector<f64>> {
    let sym = symmetrize(a);
    let n = sym.nrows();
    let eig = sym.symmetric_eigen();
    let amax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let (kmin, vmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(k, v)| (k, v.abs()))
        .unwrap_or((0, 0.0));
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if amax == 0.0 || vmin <= rel_tol * amax {
        return Err(eig.eigenvectors.column(kmin).into_owned());
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok(symmetrize(&inv))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Square root factor `L` with `L Lᵀ = a` for a symmetric PSD matrix;
/// negative eigenvalues from rounding are clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = symmetrize(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vecs = DMatrix::zeros(a.nrows(), order.len());
    for (c, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // deterministic sign: largest-magnitude entry positive
        let (imax, _) = v.iter().enumerate().fold((0, 0.0), |acc, (r, x)| {
            if x.abs() > acc.1 {
                (r, x.abs())
            } else {
                acc
            }
        });
        if v[imax] < 0.0 {
            v = -v;
        }
        vecs.set_column(c, &v);
    }
    (vals, vecs)
}

/// Preconditioned conjugate gradients for a symmetric positive definite
/// operator given as a closure.
pub fn pcg<F>(apply: F, b: &DVector<f64>, diag: &DVector<f64>, rel_tol: f64, max_iter: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let mut x = DVector::zeros(n);
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return x;
    }
    let precond = diag.map(|v| if v > 0.0 { 1.0 / v } else { 1.0 });
    let mut r = b.clone();
    let mut z = r.component_mul(&precond);
    let mut dir = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iter {
        let ad = apply(&dir);
        let denom = dir.dot(&ad);
        if denom <= 0.0 || !denom.is_finite() {
            break;
        }
        let alpha = rz / denom;
        x.axpy(alpha, &dir, 1.0);
        r.axpy(-alpha, &ad, 1.0);
        if r.norm() <= rel_tol * bnorm {
            break;
        }
        z = r.component_mul(&precond);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        dir = &z + beta * &dir;
    }
    x
}

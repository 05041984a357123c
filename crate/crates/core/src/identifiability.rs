//! Checks of the identifiability conditions on an observation mask, and
//! completion of a low-rank Σ from its co-observed entries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{restricted_rank, DesignMatrix};
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, sorted_eigen, symmetrize};

/// The set Q of co-observed year pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCoverage {
    p: usize,
    qset: Vec<bool>,
    pub per_year: Vec<bool>,
}

impl PairCoverage {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn contains(&self, j: usize, k: usize) -> bool {
        self.qset[j * self.p + k]
    }

    /// Number of ordered pairs, diagonal included.
    pub fn cardinality(&self) -> usize {
        self.qset.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.qset.iter().all(|&b| b)
    }

    /// Unordered pairs j < k that are never co-observed.
    pub fn missing_pairs(&self) -> Vec<(usize, usize)> {
        let p = self.p;
        (0..p).flat_map(|j| (j + 1..p).map(move |k| (j, k))).filter(|&(j, k)| !self.contains(j, k)).collect()
    }
}

/// Co-observation pairs of a row-major n×p mask.
pub fn pair_coverage(mask: &[bool], p: usize) -> PairCoverage {
    let mut qset = vec![false; p * p];
    let mut per_year = vec![false; p];
    for row in mask.chunks_exact(p) {
        let obs: Vec<usize> = (0..p).filter(|&j| row[j]).collect();
        for &j in &obs {
            per_year[j] = true;
            for &k in &obs {
                qset[j * p + k] = true;
            }
        }
    }
    PairCoverage { p, qset, per_year }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub a1: bool,
    pub a2: bool,
    pub restricted_rank: usize,
    pub d: usize,
    pub failing_pairs: Vec<(usize, usize)>,
    pub identifiable: bool,
}

/// Full-rank identifiability: every year pair co-observed and a full-rank
/// restricted design.
pub fn check_full(mask: &[bool], design: &DesignMatrix) -> FullReport {
    let cov = pair_coverage(mask, design.p());
    let rank = restricted_rank(design, mask);
    let a1 = cov.is_full();
    let a2 = rank == design.d();
    FullReport {
        a1,
        a2,
        restricted_rank: rank,
        d: design.d(),
        failing_pairs: cov.missing_pairs(),
        identifiable: a1 && a2,
    }
}

/// Ordered blocks J_1..J_r with overlaps ς_ℓ = J_ℓ ∩ (J_1 ∪ … ∪ J_{ℓ−1}).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCover {
    pub blocks: Vec<Vec<usize>>,
    pub overlaps: Vec<Vec<usize>>,
}

impl BlockCover {
    pub fn r(&self) -> usize {
        self.blocks.len()
    }

    pub fn years(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.blocks.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankReport {
    pub a3: bool,
    pub a4: bool,
    pub q: usize,
    pub unobserved_years: Vec<usize>,
    pub cover: Option<BlockCover>,
    pub obstructions: Vec<String>,
}

/// Maximal cliques of the co-observation graph on observed years
/// (Bron–Kerbosch with pivoting).
pub fn maximal_cliques(cov: &PairCoverage) -> Vec<Vec<usize>> {
    fn expand(cov: &PairCoverage, r: &mut Vec<usize>, mut cand: Vec<usize>, mut excl: Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cand.is_empty() && excl.is_empty() {
            let mut c = r.clone();
            c.sort_unstable();
            out.push(c);
            return;
        }
        let pivot = cand
            .iter()
            .chain(excl.iter())
            .copied()
            .max_by_key(|&u| cand.iter().filter(|&&v| v != u && cov.contains(u, v)).count())
            .expect("nonempty");
        let branch: Vec<usize> = cand.iter().copied().filter(|&v| !cov.contains(pivot, v) || v == pivot).collect();
        for v in branch {
            let nb = |w: &usize| *w != v && cov.contains(v, *w);
            r.push(v);
            expand(cov, r, cand.iter().copied().filter(nb).collect(), excl.iter().copied().filter(nb).collect(), out);
            r.pop();
            cand.retain(|&w| w != v);
            excl.push(v);
        }
    }
    let years: Vec<usize> = (0..cov.p).filter(|&j| cov.per_year[j]).collect();
    let mut out = Vec::new();
    expand(cov, &mut Vec::new(), years, Vec::new(), &mut out);
    out.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    out
}

/// Chains maximal cliques from the largest one, each time attaching the
/// clique that adds the most new years among those overlapping the covered
/// set in at least q years.
fn greedy_cover(cov: &PairCoverage, q: usize) -> (BlockCover, Vec<bool>, usize) {
    let cliques = maximal_cliques(cov);
    let mut covered = vec![false; cov.p];
    let mut cover = BlockCover { blocks: Vec::new(), overlaps: Vec::new() };
    let mut used = vec![false; cliques.len()];
    // largest overlap among cliques rejected in the final round
    let mut best_short;
    if let Some(first) = cliques.first() {
        first.iter().for_each(|&j| covered[j] = true);
        cover.blocks.push(first.clone());
        cover.overlaps.push(Vec::new());
        used[0] = true;
    }
    loop {
        best_short = 0;
        let mut pick: Option<(usize, usize, usize)> = None;
        for (c, clique) in cliques.iter().enumerate() {
            if used[c] {
                continue;
            }
            let overlap = clique.iter().filter(|&&j| covered[j]).count();
            let fresh = clique.len() - overlap;
            if fresh == 0 {
                continue;
            }
            if overlap < q {
                best_short = best_short.max(overlap);
                continue;
            }
            let better = match pick {
                None => true,
                Some((_, f, o)) => fresh > f || (fresh == f && overlap > o),
            };
            if better {
                pick = Some((c, fresh, overlap));
            }
        }
        let Some((c, _, _)) = pick else { break };
        used[c] = true;
        let clique = &cliques[c];
        cover.overlaps.push(clique.iter().copied().filter(|&j| covered[j]).collect());
        clique.iter().for_each(|&j| covered[j] = true);
        cover.blocks.push(clique.clone());
    }
    (cover, covered, best_short)
}

/// Low-rank identifiability: every year observed and a chained block cover
/// with overlaps of at least q years. With `sigma`, each overlap block must
/// also have numerical rank at least q.
pub fn check_lowrank(mask: &[bool], p: usize, q: usize, sigma: Option<&DMatrix<f64>>) -> Result<LowRankReport> {
    if q == 0 || q >= p {
        return Err(Error::Config(format!("rank q must satisfy 1 <= q < p = {p}, got {q}")));
    }
    if let Some(s) = sigma {
        if s.shape() != (p, p) {
            return Err(Error::Dimension { block: "sigma".into(), message: format!("expected {p}x{p}, got {:?}", s.shape()) });
        }
    }
    let cov = pair_coverage(mask, p);
    let unobserved: Vec<usize> = (0..p).filter(|&j| !cov.per_year[j]).collect();
    let a3 = unobserved.is_empty();
    let mut obstructions = Vec::new();
    if !a3 {
        obstructions.push(format!("years never observed: {unobserved:?}"));
    }
    let (cover, covered, best_short) = greedy_cover(&cov, q);
    let stranded: Vec<usize> = (0..p).filter(|&j| cov.per_year[j] && !covered[j]).collect();
    let mut a4 = a3 && stranded.is_empty();
    if !stranded.is_empty() {
        obstructions.push(format!(
            "cover not found: years {stranded:?} unreachable; largest overlap available was {best_short} < q = {q}"
        ));
    }
    if let Some(s) = sigma {
        for (l, ov) in cover.overlaps.iter().enumerate().skip(1) {
            let sub = DMatrix::from_fn(ov.len(), ov.len(), |a, b| s[(ov[a], ov[b])]);
            let rank = numerical_rank(&sub, p);
            if rank < q {
                a4 = false;
                obstructions.push(format!("overlap {ov:?} of block {} has rank {rank} < q = {q}", l + 1));
            }
        }
    }
    Ok(LowRankReport { a3, a4, q, unobserved_years: unobserved, cover: Some(cover).filter(|c| c.r() > 0), obstructions })
}

/// Rebuilds a rank-q Σ from its entries on Q, block by block along the
/// greedy cover. Entries of `partial` outside Q are ignored.
pub fn complete_sigma(partial: &DMatrix<f64>, coverage: &PairCoverage, q: usize) -> Result<DMatrix<f64>> {
    let p = coverage.p;
    if partial.shape() != (p, p) {
        return Err(Error::Dimension { block: "sigma".into(), message: format!("expected {p}x{p}, got {:?}", partial.shape()) });
    }
    if coverage.is_full() {
        return Ok(symmetrize(partial));
    }
    if q == 0 || q >= p {
        return Err(Error::Config(format!("rank q must satisfy 1 <= q < p = {p}, got {q}")));
    }
    let (cover, covered, _) = greedy_cover(coverage, q);
    if covered.iter().any(|&c| !c) {
        return Err(Error::ReconstructionAmbiguous("no block cover of all years with overlaps of size q".into()));
    }
    let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| partial[(rows[a], cols[b])]);

    let mut factor = DMatrix::<f64>::zeros(p, q);
    let first = &cover.blocks[0];
    let s11 = sub(first, first);
    let (vals, vecs) = sorted_eigen(&s11);
    if vals.len() < q || numerical_rank(&s11, p) < q {
        return Err(Error::ReconstructionAmbiguous(format!("first block {first:?} has rank below q = {q}")));
    }
    for (a, &j) in first.iter().enumerate() {
        for k in 0..q {
            factor[(j, k)] = vecs[(a, k)] * vals[k].sqrt();
        }
    }
    for (block, ov) in cover.blocks.iter().zip(&cover.overlaps).skip(1) {
        if numerical_rank(&sub(ov, ov), p) < q {
            return Err(Error::ReconstructionAmbiguous(format!("overlap {ov:?} has rank below q = {q}")));
        }
        let f_ov = DMatrix::from_fn(ov.len(), q, |a, k| factor[(ov[a], k)]);
        let gram = f_ov.transpose() * &f_ov;
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| Error::ReconstructionAmbiguous(format!("overlap {ov:?} factors are rank deficient")))?;
        let fresh: Vec<usize> = block.iter().copied().filter(|j| !ov.contains(j)).collect();
        // Σ_{new,ς} = F_new F_ςᵀ
        let f_new = sub(&fresh, ov) * &f_ov * gram_inv;
        for (a, &j) in fresh.iter().enumerate() {
            factor.set_row(j, &f_new.row(a));
        }
    }
    Ok(&factor * factor.transpose())
}

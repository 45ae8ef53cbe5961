//! Comparison estimators (block-budget OMP, evidence-maximizing SBL) and
//! evaluation metrics.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estep::{GroupSystem, LinearSystem, PosteriorState};
use crate::linalg::{chol_l_inverse, inverse_diag, inverse_from_l_inv, CMat, CVec, C64, COND_LIMIT};
use crate::measurement::{Block, Group};
use crate::scene::Point;

/// Atoms OMP may select per block kind: K per target block, L per scatterer
/// block and one per user block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmpBudget {
    pub k: usize,
    pub l: usize,
}

impl OmpBudget {
    pub fn for_block(&self, b: Block) -> usize {
        match b {
            Block::Its | Block::Cts | Block::Itb | Block::Ctb => self.k,
            Block::Bnl | Block::Inl => self.l,
            Block::Bl | Block::Il => 1,
        }
    }
}

/// LS refit on `support`; `None` when the Gram sub-matrix is rank deficient.
fn refit(gs: &GroupSystem, support: &[usize]) -> Option<CVec> {
    let n = support.len();
    let g = CMat::from_fn(n, n, |i, j| gs.gram[(support[i], support[j])]);
    let rhs = CVec::from_fn(n, |i, _| gs.fhy[support[i]]);
    let ch = nalgebra::Cholesky::new(g)?;
    let l = ch.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        lo = lo.min(l[(i, i)].re);
        hi = hi.max(l[(i, i)].re);
    }
    if lo <= 0.0 || (hi / lo).powi(2) > COND_LIMIT {
        return None;
    }
    Some(ch.solve(&rhs))
}

/// Greedy OMP over one group in the Gram domain. `blocks` lists the column
/// range and atom budget of each block. Returns the dense coefficient vector
/// and the selected columns.
pub fn omp_group(gs: &GroupSystem, blocks: &[(Range<usize>, usize)]) -> (CVec, Vec<usize>) {
    let n = gs.fhy.len();
    let mut x = CVec::zeros(n);
    let mut support: Vec<usize> = Vec::new();
    let mut used = vec![0usize; blocks.len()];
    let mut banned = vec![false; n];
    let total: usize = blocks.iter().map(|b| b.1).sum();
    let block_of = |c: usize| blocks.iter().position(|(r, _)| r.contains(&c));
    while support.len() < total {
        // Correlation with the residual: F^H (y − F x) = F^H y − G x.
        let corr = &gs.fhy - &gs.gram * &x;
        let mut best: Option<(usize, f64)> = None;
        for c in 0..n {
            let Some(bi) = block_of(c) else { continue };
            if banned[c] || used[bi] >= blocks[bi].1 || support.contains(&c) {
                continue;
            }
            let norm = gs.gram[(c, c)].re;
            if norm <= 0.0 {
                continue;
            }
            let s = corr[c].norm_sqr() / norm;
            if best.is_none_or(|(_, v)| s > v) {
                best = Some((c, s));
            }
        }
        let Some((c, _)) = best else { break };
        support.push(c);
        match refit(gs, &support) {
            Some(xs) => {
                used[block_of(c).expect("selected column lies in a block")] += 1;
                x.fill(C64::new(0.0, 0.0));
                for (i, &s) in support.iter().enumerate() {
                    x[s] = xs[i];
                }
            }
            None => {
                support.pop();
                banned[c] = true;
            }
        }
    }
    (x, support)
}

/// OMP on an explicit (F, y) pair with one budget per column range.
pub fn omp(f: &CMat, y: &CVec, blocks: &[(Range<usize>, usize)]) -> Result<(CVec, Vec<usize>)> {
    for (r, b) in blocks {
        if *b > r.len() || r.end > f.ncols() {
            return Err(Error::Config(format!("OMP budget {b} exceeds columns {r:?}")));
        }
    }
    Ok(omp_group(&GroupSystem::new(f, y)?, blocks))
}

fn empty_state(q: usize, p: usize) -> PosteriorState {
    PosteriorState {
        mu: Block::ALL.iter().map(|b| CVec::zeros(b.len(q, p))).collect(),
        sigma: Block::ALL.iter().map(|b| CMat::zeros(b.len(q, p), b.len(q, p))).collect(),
        logdet: vec![0.0; 8],
        a_t: Block::ALL.iter().map(|b| vec![1.0; b.len(q, p)]).collect(),
        b_t: Block::ALL.iter().map(|b| vec![1.0; b.len(q, p)]).collect(),
        pi_t: vec![0.0; q],
        pi_nl: vec![0.0; q],
        pi_l: vec![0.0; p],
    }
}

/// OMP estimate packaged as a point-mass posterior. Support indicators are 1
/// on grids where any block of the matching kind selected an atom.
pub fn omp_posterior(sys: &LinearSystem, budget: &OmpBudget) -> Result<PosteriorState> {
    let (q, p) = (sys.q, sys.p);
    let mut st = empty_state(q, p);
    for g in Group::ALL {
        let blocks: Vec<(Range<usize>, usize)> = Block::in_group(g).iter().map(|&b| (b.cols_in_group(q, p), budget.for_block(b))).collect();
        let (x, support) = omp_group(sys.group(g), &blocks);
        for &b in Block::in_group(g) {
            let r = b.cols_in_group(q, p);
            st.mu[b.index()] = x.rows(r.start, r.len()).into_owned();
            for &c in support.iter().filter(|c| r.contains(c)) {
                let i = c - r.start;
                match b.support() {
                    crate::measurement::SupportKind::Target => st.pi_t[i] = 1.0,
                    crate::measurement::SupportKind::Scatterer => st.pi_nl[i] = 1.0,
                    crate::measurement::SupportKind::User => st.pi_l[i] = 1.0,
                }
            }
        }
    }
    Ok(st)
}

pub const SBL_PRUNE: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct SblResult {
    pub mu: CVec,
    pub sigma: CMat,
    pub alpha: Vec<f64>,
    pub log_evidence: Vec<f64>,
}

/// Tipping-style EM SBL with known noise. Each column is rescaled to unit
/// data precision (F^H F / σ² has a unit diagonal), so the prune threshold
/// [`SBL_PRUNE`] is relative to what the data alone resolves.
/// `init` holds physical-unit precisions to start from (e.g. the previous EM
/// iteration's).
pub fn sbl_group(gs: &GroupSystem, sigma2: f64, max_iter: usize, tol: f64, init: Option<&[f64]>) -> Result<SblResult> {
    let n = gs.fhy.len();
    let dscale: Vec<f64> = (0..n)
        .map(|i| {
            let d = gs.gram[(i, i)].re / sigma2;
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let g = CMat::from_fn(n, n, |i, j| gs.gram[(i, j)] * (dscale[i] * dscale[j] / sigma2));
    let fhy = CVec::from_fn(n, |i, _| gs.fhy[i] * (dscale[i] / sigma2));
    let yy = gs.yy / sigma2;
    let mut alpha: Vec<f64> = (0..n)
        .map(|i| {
            if let Some(a0) = init {
                return (a0[i] * dscale[i] * dscale[i]).clamp(1e-8, SBL_PRUNE * 2.0);
            }
            let d = g[(i, i)].re;
            let c2 = fhy[i].norm_sqr();
            if c2 == 0.0 {
                SBL_PRUNE * 2.0
            } else {
                (d * d / c2).clamp(1e-8, SBL_PRUNE * 2.0)
            }
        })
        .collect();
    let mut trace = Vec::new();
    let mut mu = CVec::zeros(n);
    let mut prev_mu = CVec::zeros(n);
    let mut diag = vec![0.0; n];
    // Full covariance is only formed once, from the last iteration's factor.
    let mut last: Option<(Vec<usize>, CMat)> = None;
    for _ in 0..max_iter {
        let active: Vec<usize> = (0..n).filter(|&i| alpha[i] <= SBL_PRUNE).collect();
        mu.fill(C64::new(0.0, 0.0));
        diag.fill(0.0);
        let k = active.len();
        let mut ev = -(gs.rows as f64) * std::f64::consts::PI.ln() - yy;
        if k > 0 {
            let mut a = CMat::from_fn(k, k, |i, j| g[(active[i], active[j])]);
            for i in 0..k {
                a[(i, i)] += C64::new(alpha[active[i]], 0.0);
            }
            let ch = nalgebra::Cholesky::new(a).ok_or_else(|| Error::Numerical("SBL system not positive definite".into()))?;
            let rhs = CVec::from_fn(k, |i, _| fhy[active[i]]);
            let m = ch.solve(&rhs);
            let l = ch.l_dirty();
            let logdet_a: f64 = (0..k).map(|i| 2.0 * l[(i, i)].re.ln()).sum();
            let logdet_prior: f64 = active.iter().map(|&i| alpha[i].ln()).sum();
            ev += -(logdet_a - logdet_prior) + rhs.dotc(&m).re;
            let l_inv = chol_l_inverse(&ch);
            for (i, d) in inverse_diag(&l_inv).into_iter().enumerate() {
                mu[active[i]] = m[i];
                diag[active[i]] = d;
            }
            last = Some((active.clone(), l_inv));
        } else {
            last = None;
        }
        trace.push(ev);
        for &i in &active {
            alpha[i] = 1.0 / (mu[i].norm_sqr() + diag[i]);
        }
        // Precisions of pruned-bound atoms keep growing; the mean settles first.
        let change = (&mu - &prev_mu).norm() / mu.norm().max(f64::MIN_POSITIVE);
        if change < tol {
            break;
        }
        prev_mu.copy_from(&mu);
    }
    let mut sigma = CMat::zeros(n, n);
    if let Some((active, l_inv)) = last {
        let s = inverse_from_l_inv(&l_inv);
        for (i, &ai) in active.iter().enumerate() {
            for (j, &aj) in active.iter().enumerate() {
                sigma[(ai, aj)] = s[(i, j)];
            }
        }
    }
    for i in 0..n {
        mu[i] *= dscale[i];
        alpha[i] /= dscale[i] * dscale[i];
        for j in 0..n {
            sigma[(i, j)] *= dscale[i] * dscale[j];
        }
    }
    Ok(SblResult { mu, sigma, alpha, log_evidence: trace })
}

pub fn sbl(f: &CMat, y: &CVec, sigma2: f64, max_iter: usize) -> Result<SblResult> {
    sbl_group(&GroupSystem::new(f, y)?, sigma2, max_iter, 1e-6, None)
}

/// SBL posterior per group with block-diagonal covariance extraction, plus the
/// log-evidence traces. Precisions land in `a_t` (with `b_t` = 1) so a later
/// call can warm-start from the returned state.
pub fn sbl_posterior(sys: &LinearSystem, max_iter: usize, warm: Option<&PosteriorState>) -> Result<(PosteriorState, Vec<Vec<f64>>)> {
    let (q, p) = (sys.q, sys.p);
    let mut st = empty_state(q, p);
    let mut traces = Vec::new();
    for g in Group::ALL {
        let init: Option<Vec<f64>> = warm.map(|w| Block::in_group(g).iter().flat_map(|&b| w.precision_mean(b)).collect());
        let r = sbl_group(sys.group(g), sys.sigma2, max_iter, 1e-6, init.as_deref())?;
        for &b in Block::in_group(g) {
            let c = b.cols_in_group(q, p);
            st.mu[b.index()] = r.mu.rows(c.start, c.len()).into_owned();
            st.sigma[b.index()] = r.sigma.view((c.start, c.start), (c.len(), c.len())).into_owned();
            st.a_t[b.index()] = r.alpha[c.start..c.end].to_vec();
        }
        traces.push(r.log_evidence);
    }
    Ok((st, traces))
}

/// ‖x̂ − x‖² / ‖x‖².
pub fn nmse(est: &CVec, truth: &CVec) -> Result<f64> {
    let den = truth.norm_squared();
    if den == 0.0 {
        return Err(Error::Undefined("NMSE of an all-zero reference".into()));
    }
    Ok((est - truth).norm_squared() / den)
}

/// Minimum-cost assignment of rows to columns for a square cost matrix
/// (Hungarian method, O(n³)). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials as in the classic shortest-augmenting-path form.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Squared position errors after optimal one-to-one matching. Each truth
/// costs min(d², penalty²); unmatched truths cost penalty²; surplus
/// detections are free. Returns (Σ cost, number of truths).
pub fn matched_sq_error(detected: &[Point], truth: &[Point], penalty: f64) -> (f64, usize) {
    let (nd, nt) = (detected.len(), truth.len());
    if nt == 0 {
        return (0.0, 0);
    }
    let n = nd.max(nt);
    let pen2 = penalty * penalty;
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (i < nd, j < nt) {
                    (true, true) => detected[i].dist(truth[j]).powi(2).min(pen2),
                    (false, true) => pen2,
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    let assign = hungarian(&cost);
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (total, nt)
}

/// RMSE over several object classes pooled together.
pub fn rmse(classes: &[(&[Point], &[Point])], penalty: f64) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (d, t) in classes {
        let (a, b) = matched_sq_error(d, t, penalty);
        s += a;
        n += b;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub nmse_blocks: Vec<f64>,
    pub nmse: f64,
    pub rmse: f64,
    pub detected_targets: Vec<Point>,
    pub detected_scatterers: Vec<Point>,
    pub detected_user: Vec<Point>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_cn;
    use crate::linalg::c;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(r: usize, cl: usize, seed: u64) -> CMat {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        CMat::from_fn(r, cl, |_, _| draw_cn(&mut rng))
    }

    #[test]
    fn omp_exact_on_orthogonal_columns() {
        let f = CMat::identity(6, 6);
        let mut x = CVec::zeros(6);
        x[1] = c(1.0, 2.0);
        x[4] = c(-0.5, 0.0);
        let y = &f * &x;
        let (xh, s) = omp(&f, &y, &[(0..3, 1), (3..6, 1)]).unwrap();
        assert!((xh - x).norm() < 1e-14);
        assert_eq!(s.len(), 2);
        let (x0, s0) = omp(&f, &y, &[(0..6, 0)]).unwrap();
        assert!(x0.norm() == 0.0 && s0.is_empty());
    }

    #[test]
    fn omp_matches_dense_ls_on_true_support() {
        let f = rand_mat(30, 12, 1);
        let mut x = CVec::zeros(12);
        x[2] = c(1.0, 0.5);
        x[9] = c(-0.7, 0.3);
        let y = &f * &x;
        let (xh, _) = omp(&f, &y, &[(0..6, 1), (6..12, 1)]).unwrap();
        let sub = CMat::from_columns(&[f.column(2), f.column(9)]);
        let ls = (sub.adjoint() * &sub).lu().solve(&(sub.adjoint() * &y)).unwrap();
        let mut dense = CVec::zeros(12);
        dense[2] = ls[0];
        dense[9] = ls[1];
        let a = nmse(&xh, &x).unwrap();
        let b = nmse(&dense, &x).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn omp_drops_rank_deficient_atom() {
        let mut f = rand_mat(8, 4, 2);
        let col = f.column(0).into_owned();
        f.set_column(1, &col);
        let y = f.column(0) * c(1.0, 0.0);
        let (_, s) = omp(&f, &y, &[(0..4, 2)]).unwrap();
        assert!(!(s.contains(&0) && s.contains(&1)));
    }

    #[test]
    fn sbl_single_atom_and_zero_data() {
        let f = rand_mat(10, 1, 3);
        let x0 = c(0.8, -0.4);
        let y = f.column(0) * x0;
        let r = sbl(&f, &y, 1e-20, 200).unwrap();
        assert!((r.mu[0] - x0).norm() < 1e-6);
        let z = sbl(&f, &CVec::zeros(10), 1.0, 50).unwrap();
        assert!(z.mu.norm() == 0.0 && z.alpha[0] > SBL_PRUNE);
    }

    #[test]
    fn sbl_evidence_monotone() {
        for seed in 0..5 {
            let f = rand_mat(20, 30, 10 + seed);
            let mut x = CVec::zeros(30);
            x[3] = c(2.0, 0.0);
            x[17] = c(0.0, -1.5);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let y = &f * &x + CVec::from_fn(20, |_, _| draw_cn(&mut rng) * 0.3);
            let r = sbl(&f, &y, 0.09, 300).unwrap();
            for w in r.log_evidence.windows(2) {
                assert!(w[1] >= w[0] - 1e-7 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn nmse_examples() {
        let x = CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 2.0)]);
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        assert_eq!(nmse(&CVec::zeros(2), &x).unwrap(), 1.0);
        assert!(nmse(&x, &CVec::zeros(2)).is_err());
    }

    #[test]
    fn hungarian_against_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        use rand::Rng;
        for n in 1..=6 {
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let a = hungarian(&cost);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| best = best.min(p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()));
            assert!((got - best).abs() < 1e-12);
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn rmse_is_permutation_invariant_and_penalizes_misses() {
        let t = [Point::new(0.0, 0.0), Point::new(5.0, 5.0)];
        let d = [Point::new(5.0, 6.0), Point::new(1.0, 0.0)];
        let r = rmse(&[(&d, &t)], 10.0);
        assert!((r - 1.0).abs() < 1e-12);
        let d2 = [Point::new(1.0, 0.0), Point::new(5.0, 6.0)];
        assert_eq!(r, rmse(&[(&d2, &t)], 10.0));
        let miss = rmse(&[(&d[..1], &t)], 10.0);
        assert!((miss - ((1.0 + 100.0) / 2.0f64).sqrt()).abs() < 1e-12);
    }
}

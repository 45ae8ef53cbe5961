//! EM M-step: surrogate objective over grid offsets, its analytic gradient
//! split into IRS-side and BS-side parts, the double-direction sign rule and
//! the outer estimation loop.

use serde::{Deserialize, Serialize};

use crate::baselines::{omp_posterior, sbl_posterior, OmpBudget};
use crate::channel::{steering, steering_deriv, Arrays};
use crate::error::Result;
use crate::estep::{run_estep, EstepConfig, LinearSystem, PosteriorState, Priors, TurboMessages};
use crate::linalg::{CMat, CVec, C64};
use crate::measurement::{assemble_f, build_dictionaries, Block, Group, MeasurementModel, Observation, ReflectionSchedule, SparseDictionaries};
use crate::scene::{GridSpec, OffsetState, Point, SceneConfig};

/// Everything needed to rebuild the measurement model at new offsets.
#[derive(Clone, Debug)]
pub struct ModelContext {
    pub scene: SceneConfig,
    pub arrays: Arrays,
    pub grids: GridSpec,
    pub schedule: ReflectionSchedule,
    pub h_ci: CVec,
    pub h_ib: CMat,
}

impl ModelContext {
    pub fn dictionaries(&self, off: &OffsetState) -> Result<SparseDictionaries> {
        build_dictionaries(&self.scene, &self.arrays, &self.grids, off)
    }

    pub fn model(&self, off: &OffsetState) -> Result<MeasurementModel> {
        assemble_f(&self.dictionaries(off)?, &self.schedule, &self.h_ci, &self.h_ib)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateGradients {
    pub g_bs_r: Vec<[f64; 2]>,
    pub g_irs_r: Vec<[f64; 2]>,
    pub g_bs_z: Vec<[f64; 2]>,
    pub g_irs_z: Vec<[f64; 2]>,
}

impl SurrogateGradients {
    pub fn total_r(&self, q: usize) -> [f64; 2] {
        [self.g_bs_r[q][0] + self.g_irs_r[q][0], self.g_bs_r[q][1] + self.g_irs_r[q][1]]
    }
    pub fn total_z(&self, p: usize) -> [f64; 2] {
        [self.g_bs_z[p][0] + self.g_irs_z[p][0], self.g_bs_z[p][1] + self.g_irs_z[p][1]]
    }
}

/// Residual energy E = Σ_g ‖y_g − F_g μ_g‖² + Σ_j tr(F_j Σ_j F_j^H), in the Gram domain.
pub fn residual_energy(sys: &LinearSystem, st: &PosteriorState) -> f64 {
    let (q, p) = (sys.q, sys.p);
    let mut total = 0.0;
    for g in Group::ALL {
        let gs = sys.group(g);
        let n: usize = Block::in_group(g).iter().map(|b| b.len(q, p)).sum();
        let mut mu = CVec::zeros(n);
        let mut tr = 0.0;
        for &b in Block::in_group(g) {
            let r = b.cols_in_group(q, p);
            mu.rows_mut(r.start, r.len()).copy_from(&st.mu[b.index()]);
            tr += (gs.gram.view((r.start, r.start), (r.len(), r.len())) * &st.sigma[b.index()]).trace().re;
        }
        total += gs.yy - 2.0 * mu.dotc(&gs.fhy).re + mu.dotc(&(&gs.gram * &mu)).re + tr;
    }
    total
}

/// Q(Δr, Δz) = −E/σ² with F rebuilt at `off` (constants dropped).
pub fn surrogate_q(ctx: &ModelContext, off: &OffsetState, st: &PosteriorState, y: &Observation, sigma2: f64) -> Result<f64> {
    let model = ctx.model(off)?;
    let sys = LinearSystem::new(&model, y, sigma2)?;
    Ok(-residual_energy(&sys, st) / sigma2)
}

/// ∂F columns with respect to the IRS-side and BS-side angles of one grid.
struct ColumnDerivs {
    d_irs: CVec,
    d_bs: CVec,
}

struct DerivCache {
    /// Φ̃_r = diag(h_CI) Φ_r.
    phi_t: CMat,
    /// R(t) = H_IB diag(φ_c(t)).
    r_t: Vec<CMat>,
}

impl DerivCache {
    fn new(ctx: &ModelContext) -> Self {
        let s = &ctx.schedule;
        let n_p = ctx.arrays.n_p;
        let phi_t = CMat::from_fn(n_p, s.t_s(), |n, t| ctx.h_ci[n] * s.phi_r[(n, t)]);
        let m = ctx.h_ib.nrows();
        let r_t = (0..s.t_c()).map(|t| CMat::from_fn(m, n_p, |i, n| ctx.h_ib[(i, n)] * s.phi_c[(n, t)])).collect();
        DerivCache { phi_t, r_t }
    }
}

fn kr_col(w: &CVec, a: &CVec) -> CVec {
    let rb = a.len();
    CVec::from_fn(w.len() * rb, |i, _| w[i / rb] * a[i % rb])
}

fn repeat_col(a: &CVec, t: usize) -> CVec {
    let n = a.len();
    CVec::from_fn(n * t, |i, _| a[i % n])
}

/// Derivatives of block `b`'s column at grid `i` of its lattice.
fn column_derivs(ctx: &ModelContext, d: &SparseDictionaries, cache: &DerivCache, b: Block, i: usize) -> ColumnDerivs {
    let a = &ctx.arrays;
    let (t_s, t_c) = (ctx.schedule.t_s(), ctx.schedule.t_c());
    let (m, n_s, n_p) = (a.m, a.n_s, a.n_p);
    let on_z = matches!(b, Block::Bl | Block::Il);
    let (th_i, th_b) = if on_z { (d.th_i_z[i], d.th_b_z[i]) } else { (d.th_i_r[i], d.th_b_r[i]) };
    let col = |mat: &CMat| mat.column(i).into_owned();
    let (a_s, a_i, a_b) = if on_z { (col(&d.a_s_z), col(&d.a_i_z), col(&d.a_b_z)) } else { (col(&d.a_s_r), col(&d.a_i_r), col(&d.a_b_r)) };
    let (da_s, da_i, da_b) = (steering_deriv(n_s, th_i), steering_deriv(n_p, th_i), steering_deriv(m, th_b));
    let w = cache.phi_t.transpose() * a_i.map(|z| z.conj());
    let dw = cache.phi_t.transpose() * da_i.map(|z| z.conj());
    let comm_rows = (n_s + m) * t_c;
    match b {
        Block::Its => ColumnDerivs { d_irs: kr_col(&dw, &a_s) + kr_col(&w, &da_s), d_bs: CVec::zeros(n_s * t_s) },
        Block::Cts => ColumnDerivs { d_irs: repeat_col(&da_s, t_s), d_bs: CVec::zeros(n_s * t_s) },
        Block::Itb => ColumnDerivs { d_irs: kr_col(&dw, &a_b), d_bs: kr_col(&w, &da_b) },
        Block::Ctb => ColumnDerivs { d_irs: CVec::zeros(m * t_s), d_bs: repeat_col(&da_b, t_s) },
        Block::Bnl | Block::Bl => {
            let mut d_bs = CVec::zeros(comm_rows);
            d_bs.rows_mut(n_s * t_c, m * t_c).copy_from(&repeat_col(&da_b, t_c));
            ColumnDerivs { d_irs: CVec::zeros(comm_rows), d_bs }
        }
        Block::Inl | Block::Il => {
            let mut d_irs = CVec::zeros(comm_rows);
            d_irs.rows_mut(0, n_s * t_c).copy_from(&repeat_col(&da_s, t_c));
            for (t, r) in cache.r_t.iter().enumerate() {
                d_irs.rows_mut(n_s * t_c + t * m, m).copy_from(&(r * &da_i));
            }
            ColumnDerivs { d_irs, d_bs: CVec::zeros(comm_rows) }
        }
    }
}

/// Analytic gradient of Q at `off`; rows outside `candidates` (and every z grid
/// when `with_z` is false) are left at zero.
pub fn gradients(
    ctx: &ModelContext,
    off: &OffsetState,
    st: &PosteriorState,
    y: &Observation,
    sigma2: f64,
    candidates: &[usize],
    with_z: bool,
) -> Result<SurrogateGradients> {
    let (q, p) = (ctx.grids.q(), ctx.grids.p());
    let dicts = ctx.dictionaries(off)?;
    let model = assemble_f(&dicts, &ctx.schedule, &ctx.h_ci, &ctx.h_ib)?;
    let cache = DerivCache::new(ctx);
    // Per group: residual r = Fμ − y and F_j Σ_j for each block.
    let mut res = Vec::new();
    let mut fsig: Vec<CMat> = vec![CMat::zeros(0, 0); 8];
    for g in Group::ALL {
        let f = model.group(g);
        let mut fmu = CVec::zeros(f.nrows());
        for &b in Block::in_group(g) {
            let r = b.cols_in_group(q, p);
            let fj = f.columns(r.start, r.len());
            fmu += &fj * &st.mu[b.index()];
            fsig[b.index()] = fj * &st.sigma[b.index()];
        }
        res.push(fmu - y.group(g));
    }
    let group_res = |b: Block| match b.group() {
        Group::SensorSensing => &res[0],
        Group::BsSensing => &res[1],
        Group::Comm => &res[2],
    };
    // dE/dθ for one column: 2 Re[dcol^H (r μ_i^* + (FΣ)_{:,i})].
    let de = |b: Block, i: usize, dcol: &CVec| -> f64 {
        let v = group_res(b) * st.mu[b.index()][i].conj() + fsig[b.index()].column(i);
        2.0 * dcol.dotc(&v).re
    };
    let mut out = SurrogateGradients { g_bs_r: vec![[0.0; 2]; q], g_irs_r: vec![[0.0; 2]; q], g_bs_z: vec![[0.0; 2]; p], g_irs_z: vec![[0.0; 2]; p] };
    let scale = -1.0 / sigma2;
    let r_blocks = [Block::Its, Block::Cts, Block::Itb, Block::Ctb, Block::Bnl, Block::Inl];
    for &i in candidates {
        let (mut e_i, mut e_b) = (0.0, 0.0);
        for &b in &r_blocks {
            let cd = column_derivs(ctx, &dicts, &cache, b, i);
            e_i += de(b, i, &cd.d_irs);
            e_b += de(b, i, &cd.d_bs);
        }
        let pos = off.r_pos(&ctx.grids, i);
        let (cix, ciy) = ctx.scene.dtheta_irs(pos);
        let (cbx, cby) = ctx.scene.dtheta_bs(pos);
        out.g_irs_r[i] = [scale * e_i * cix, scale * e_i * ciy];
        out.g_bs_r[i] = [scale * e_b * cbx, scale * e_b * cby];
    }
    if with_z {
        for i in 0..p {
            let (mut e_i, mut e_b) = (0.0, 0.0);
            for b in [Block::Bl, Block::Il] {
                let cd = column_derivs(ctx, &dicts, &cache, b, i);
                e_i += de(b, i, &cd.d_irs);
                e_b += de(b, i, &cd.d_bs);
            }
            let pos = off.z_pos(&ctx.grids, i);
            let (cix, ciy) = ctx.scene.dtheta_irs(pos);
            let (cbx, cby) = ctx.scene.dtheta_bs(pos);
            out.g_irs_z[i] = [scale * e_i * cix, scale * e_i * ciy];
            out.g_bs_z[i] = [scale * e_b * cbx, scale * e_b * cby];
        }
    }
    Ok(out)
}

/// Columns of every block at one grid, at position `pos`.
fn grid_columns(ctx: &ModelContext, cache: &DerivCache, on_z: bool, pos: Point) -> Result<Vec<(Block, CVec)>> {
    let a = &ctx.arrays;
    let (t_s, t_c) = (ctx.schedule.t_s(), ctx.schedule.t_c());
    let (th_i, th_b) = (ctx.scene.theta_irs(pos)?, ctx.scene.theta_bs(pos)?);
    let (a_s, a_i, a_b) = (steering(a.n_s, th_i), steering(a.n_p, th_i), steering(a.m, th_b));
    let comm_rows = (a.n_s + a.m) * t_c;
    let mut bs_side = CVec::zeros(comm_rows);
    bs_side.rows_mut(a.n_s * t_c, a.m * t_c).copy_from(&repeat_col(&a_b, t_c));
    let mut irs_side = CVec::zeros(comm_rows);
    irs_side.rows_mut(0, a.n_s * t_c).copy_from(&repeat_col(&a_s, t_c));
    for (t, r) in cache.r_t.iter().enumerate() {
        irs_side.rows_mut(a.n_s * t_c + t * a.m, a.m).copy_from(&(r * &a_i));
    }
    if on_z {
        return Ok(vec![(Block::Bl, bs_side), (Block::Il, irs_side)]);
    }
    let w = cache.phi_t.transpose() * a_i.map(|z| z.conj());
    Ok(vec![
        (Block::Its, kr_col(&w, &a_s)),
        (Block::Cts, repeat_col(&a_s, t_s)),
        (Block::Itb, kr_col(&w, &a_b)),
        (Block::Ctb, repeat_col(&a_b, t_s)),
        (Block::Bnl, bs_side),
        (Block::Inl, irs_side),
    ])
}

/// Residual energy under single-grid moves with the posterior held fixed.
/// Keeps F, the group residuals y − Fμ and F_jΣ_j so that moving one grid
/// costs a rank-one update instead of a model rebuild.
struct LocalSurrogate<'a> {
    ctx: &'a ModelContext,
    st: &'a PosteriorState,
    cache: DerivCache,
    f: [CMat; 3],
    res: [CVec; 3],
    fsig: Vec<CMat>,
    energy: f64,
}

fn group_slot(g: Group) -> usize {
    match g {
        Group::SensorSensing => 0,
        Group::BsSensing => 1,
        Group::Comm => 2,
    }
}

impl<'a> LocalSurrogate<'a> {
    fn new(ctx: &'a ModelContext, off: &OffsetState, st: &'a PosteriorState, y: &Observation) -> Result<Self> {
        let (q, p) = (ctx.grids.q(), ctx.grids.p());
        let model = ctx.model(off)?;
        let mut fsig = vec![CMat::zeros(0, 0); 8];
        let mut res: [CVec; 3] = std::array::from_fn(|_| CVec::zeros(0));
        let mut energy = 0.0;
        for g in Group::ALL {
            let f = model.group(g);
            let mut r = y.group(g);
            for &b in Block::in_group(g) {
                let c = b.cols_in_group(q, p);
                let fj = f.columns(c.start, c.len());
                r -= &fj * &st.mu[b.index()];
                let fs = fj * &st.sigma[b.index()];
                energy += fj.iter().zip(fs.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
                fsig[b.index()] = fs;
            }
            energy += r.norm_squared();
            res[group_slot(g)] = r;
        }
        let f = [model.f_sr, model.f_br, model.f_c];
        Ok(LocalSurrogate { ctx, st, cache: DerivCache::new(ctx), f, res, fsig, energy })
    }

    /// Column changes and the resulting energy when grid `i` sits at `pos`.
    fn trial(&self, on_z: bool, i: usize, pos: Point) -> Result<(f64, Vec<(Block, CVec)>)> {
        let (q, p) = (self.ctx.grids.q(), self.ctx.grids.p());
        let mut deltas = Vec::new();
        let mut moved: [Option<CVec>; 3] = [None, None, None];
        let mut energy = self.energy;
        for (b, col) in grid_columns(self.ctx, &self.cache, on_z, pos)? {
            let slot = group_slot(b.group());
            let c = b.cols_in_group(q, p).start + i;
            let d = col - self.f[slot].column(c);
            let (j, mu) = (b.index(), self.st.mu[b.index()][i]);
            // tr((F+δe_i^T)Σ(F+δe_i^T)^H) − tr(FΣF^H) = 2Re δ^H(FΣ)_{:,i} + Σ_ii‖δ‖².
            energy += 2.0 * d.dotc(&self.fsig[j].column(i)).re + self.st.sigma[j][(i, i)].re * d.norm_squared();
            let r = moved[slot].get_or_insert_with(|| self.res[slot].clone());
            r.axpy(-mu, &d, C64::new(1.0, 0.0));
            deltas.push((b, d));
        }
        for (slot, r) in moved.iter().enumerate() {
            if let Some(r) = r {
                energy += r.norm_squared() - self.res[slot].norm_squared();
            }
        }
        Ok((energy, deltas))
    }

    fn accept(&mut self, i: usize, energy: f64, deltas: &[(Block, CVec)]) {
        let (q, p) = (self.ctx.grids.q(), self.ctx.grids.p());
        for (b, d) in deltas {
            let slot = group_slot(b.group());
            let c = b.cols_in_group(q, p).start + i;
            let mut col = self.f[slot].column_mut(c);
            col += d;
            let j = b.index();
            self.res[slot].axpy(-self.st.mu[j][i], d, C64::new(1.0, 0.0));
            // F_jΣ_j gains δ Σ_j[i, :].
            let row = self.st.sigma[j].row(i).into_owned();
            self.fsig[j] += d * row;
        }
        self.energy = energy;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub step_r: f64,
    pub step_z: f64,
    pub shrink: f64,
    pub floor_r: f64,
    pub floor_z: f64,
}

impl StepSchedule {
    pub fn for_grids(grids: &GridSpec) -> Self {
        StepSchedule {
            step_r: grids.r.spacing / 8.0,
            step_z: grids.z.spacing / 8.0,
            shrink: 0.5,
            floor_r: grids.r.spacing / 256.0,
            floor_z: grids.z.spacing / 256.0,
        }
    }

    pub fn shrink_steps(&mut self) {
        self.step_r = (self.step_r * self.shrink).max(self.floor_r);
        self.step_z = (self.step_z * self.shrink).max(self.floor_z);
    }

    pub fn at_floor(&self) -> bool {
        self.step_r <= self.floor_r && self.step_z <= self.floor_z
    }
}

/// Double-direction rule for one axis: move only when both gradient sources
/// agree, in the direction of the BS-side component.
pub fn ddg_direction(g_bs: f64, g_irs: f64) -> f64 {
    if g_bs * g_irs <= 0.0 {
        0.0
    } else {
        g_bs.signum()
    }
}

pub fn ddg_update(off: &OffsetState, g: &SurrogateGradients, sched: &StepSchedule, candidates: &[usize], with_z: bool, grids: &GridSpec) -> OffsetState {
    let mut out = off.clone();
    for &q in candidates {
        out.dr[q].x += sched.step_r * ddg_direction(g.g_bs_r[q][0], g.g_irs_r[q][0]);
        out.dr[q].y += sched.step_r * ddg_direction(g.g_bs_r[q][1], g.g_irs_r[q][1]);
    }
    if with_z {
        for p in 0..out.dz.len() {
            out.dz[p].x += sched.step_z * ddg_direction(g.g_bs_z[p][0], g.g_irs_z[p][0]);
            out.dz[p].y += sched.step_z * ddg_direction(g.g_bs_z[p][1], g.g_irs_z[p][1]);
        }
    }
    out.clamp(grids);
    out
}

/// Plain gradient ascent with the total gradient normalized per grid.
pub fn gradient_ascent_update(off: &OffsetState, g: &SurrogateGradients, sched: &StepSchedule, candidates: &[usize], with_z: bool, grids: &GridSpec) -> OffsetState {
    let unit = |v: [f64; 2]| {
        let n = v[0].hypot(v[1]);
        if n == 0.0 {
            Point::new(0.0, 0.0)
        } else {
            Point::new(v[0] / n, v[1] / n)
        }
    };
    let mut out = off.clone();
    for &q in candidates {
        out.dr[q] = out.dr[q] + unit(g.total_r(q)) * sched.step_r;
    }
    if with_z {
        for p in 0..out.dz.len() {
            out.dz[p] = out.dz[p] + unit(g.total_z(p)) * sched.step_z;
        }
    }
    out.clamp(grids);
    out
}

/// Grids whose support posterior exceeds `threshold`, plus the `top` grids by
/// (normalized) energy. Ties in energy go to the lower index.
pub fn select_candidates(st: &PosteriorState, energy_scale: &[f64], top: usize, threshold: f64) -> Vec<usize> {
    let q = st.pi_t.len();
    if threshold <= 0.0 {
        return (0..q).collect();
    }
    let energy = grid_energy(st, energy_scale);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
    let mut keep = vec![false; q];
    for &i in order.iter().take(top) {
        keep[i] = true;
    }
    for i in 0..q {
        if st.pi_t[i].max(st.pi_nl[i]) > threshold {
            keep[i] = true;
        }
    }
    (0..q).filter(|&i| keep[i]).collect()
}

/// Σ_j |μ_j,q|² / scale_j,q over the r-grid blocks. `scale` holds one entry per
/// r-block grid in block order (6Q values) or is empty for unit scaling.
pub fn grid_energy(st: &PosteriorState, scale: &[f64]) -> Vec<f64> {
    let q = st.pi_t.len();
    (0..q)
        .map(|i| {
            (0..6)
                .map(|j| {
                    let s = if scale.is_empty() { 1.0 } else { scale[j * q + i] };
                    st.mu[j][i].norm_sqr() / s
                })
                .sum()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MstepRule {
    Ddg,
    GradientAscent,
}

/// E-step used inside the EM loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    Tvbi,
    Omp(OmpBudget),
    Sbl { max_iter: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsTvbiConfig {
    pub estep: EstepConfig,
    pub n_out: usize,
    pub eps_out: f64,
    pub rule: MstepRule,
    /// Offset moves attempted per M-step.
    pub moves_per_mstep: usize,
    pub candidate_threshold: f64,
    /// Number of objects (K+L) kept by the energy fallback.
    pub top: usize,
}

impl Default for AsTvbiConfig {
    fn default() -> Self {
        AsTvbiConfig { estep: EstepConfig::default(), n_out: 50, eps_out: 1e-3, rule: MstepRule::Ddg, moves_per_mstep: 3, candidate_threshold: 0.5, top: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterTrace {
    pub n: usize,
    pub q_value: f64,
    pub dmu: f64,
    pub step_r: f64,
    pub step_z: f64,
}

#[derive(Clone, Debug)]
pub struct AsTvbiResult {
    pub state: PosteriorState,
    pub msgs: Option<TurboMessages>,
    pub offsets: OffsetState,
    pub iterations: usize,
    pub converged: bool,
    pub final_q: f64,
    pub trace: Vec<OuterTrace>,
}

fn run_estimator(
    est: &Estimator,
    sys: &LinearSystem,
    priors: &Priors,
    warm: Option<(PosteriorState, TurboMessages)>,
    prev: Option<&PosteriorState>,
    cfg: &EstepConfig,
) -> Result<(PosteriorState, Option<TurboMessages>)> {
    match est {
        Estimator::Tvbi => {
            let r = run_estep(sys, priors, warm, cfg)?;
            Ok((r.state, Some(r.msgs)))
        }
        Estimator::Omp(b) => Ok((omp_posterior(sys, b)?, None)),
        Estimator::Sbl { max_iter } => Ok((sbl_posterior(sys, *max_iter, prev)?.0, None)),
    }
}

/// Alternating E-step and offset refinement until the block means settle.
#[allow(clippy::too_many_arguments)]
pub fn run_as_tvbi(
    ctx: &ModelContext,
    y: &Observation,
    sigma2: f64,
    priors: &Priors,
    est: &Estimator,
    cfg: &AsTvbiConfig,
    energy_scale: &[f64],
    init: Option<OffsetState>,
) -> Result<AsTvbiResult> {
    let grids = &ctx.grids;
    let mut off = init.unwrap_or_else(|| OffsetState::zeros(grids.q(), grids.p()));
    let mut sched = StepSchedule::for_grids(grids);
    let mut warm: Option<(PosteriorState, TurboMessages)> = None;
    let mut prev_mu: Option<Vec<CVec>> = None;
    let mut trace = Vec::new();
    let mut last: Option<(PosteriorState, Option<TurboMessages>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut final_q = f64::NEG_INFINITY;
    for n in 1..=cfg.n_out {
        iterations = n;
        let model = ctx.model(&off)?;
        let sys = LinearSystem::new(&model, y, sigma2)?;
        let (st, msgs) = run_estimator(est, &sys, priors, warm.take(), last.as_ref().map(|(s, _)| s), &cfg.estep)?;
        let dmu = match &prev_mu {
            Some(pm) => {
                let num: f64 = pm.iter().zip(&st.mu).map(|(a, b)| (a - b).norm()).sum();
                let den: f64 = st.mu.iter().map(|b| b.norm()).sum();
                num / den.max(f64::MIN_POSITIVE)
            }
            None => f64::INFINITY,
        };
        let mut q_cur = -residual_energy(&sys, &st) / sigma2;
        if dmu < cfg.eps_out {
            converged = true;
            final_q = q_cur;
            trace.push(OuterTrace { n, q_value: q_cur, dmu, step_r: sched.step_r, step_z: sched.step_z });
            last = Some((st, msgs));
            break;
        }
        let cands = select_candidates(&st, energy_scale, cfg.top, cfg.candidate_threshold);
        let mut local = LocalSurrogate::new(ctx, &off, &st, y)?;
        for _ in 0..cfg.moves_per_mstep {
            let g = gradients(ctx, &off, &st, y, sigma2, &cands, true)?;
            let full = match cfg.rule {
                MstepRule::Ddg => ddg_update(&off, &g, &sched, &cands, true, grids),
                MstepRule::GradientAscent => gradient_ascent_update(&off, &g, &sched, &cands, true, grids),
            };
            // One grid at a time, so a poor axis elsewhere cannot veto a good move.
            let mut moved = false;
            let trials = cands.iter().map(|&i| (false, i)).chain((0..grids.p()).map(|i| (true, i)));
            for (on_z, i) in trials {
                let (new, cur) = if on_z { (full.dz[i], off.dz[i]) } else { (full.dr[i], off.dr[i]) };
                if new == cur {
                    continue;
                }
                let pos = if on_z { grids.z.points[i] + new } else { grids.r.points[i] + new };
                let (energy, deltas) = local.trial(on_z, i, pos)?;
                if energy < local.energy {
                    local.accept(i, energy, &deltas);
                    if on_z {
                        off.dz[i] = new;
                    } else {
                        off.dr[i] = new;
                    }
                    moved = true;
                }
            }
            q_cur = -local.energy / sigma2;
            if !moved {
                if sched.at_floor() {
                    break;
                }
                sched.shrink_steps();
            }
        }
        final_q = q_cur;
        trace.push(OuterTrace { n, q_value: q_cur, dmu, step_r: sched.step_r, step_z: sched.step_z });
        prev_mu = Some(st.mu.clone());
        warm = msgs.clone().map(|m| (st.clone(), m));
        last = Some((st, msgs));
    }
    let (state, msgs) = last.expect("at least one outer iteration");
    Ok(AsTvbiResult { state, msgs, offsets: off, iterations, converged, final_q, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ddg_sign_cases() {
        assert_eq!(ddg_direction(1.2, -0.3), 0.0);
        assert_eq!(ddg_direction(1.2, 0.3), 1.0);
        assert_eq!(ddg_direction(0.0, 0.0), 0.0);
        assert_eq!(ddg_direction(-0.4, -2.0), -1.0);
    }

    #[test]
    fn step_schedule_floor() {
        let grids = crate::scene::build_grids(&SceneConfig::default().soi_r, &SceneConfig::default().soi_ru, 36, 9).unwrap();
        let mut s = StepSchedule::for_grids(&grids);
        for _ in 0..20 {
            s.shrink_steps();
        }
        assert!(s.at_floor());
        assert!((s.step_r - grids.r.spacing / 256.0).abs() < 1e-15);
    }

    #[test]
    fn local_surrogate_matches_rebuild() {
        use crate::harness::{ExperimentConfig, Scenario};
        use crate::measurement::synthesize_observation;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha20Rng;

        let cfg = ExperimentConfig::desk();
        let sc = Scenario::generate(&cfg, &cfg.points()[0], 4).unwrap();
        let sched = sc.schedule(2, 2, cfg.coverage).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let sigma2 = cfg.scene.noise_power;
        let y = synthesize_observation(&sc.channels, &sched, sc.amplitude, sigma2, &mut rng);
        let ctx = sc.context(sched);
        let off = sc.true_offsets.clone();
        let sys = LinearSystem::new(&ctx.model(&off).unwrap(), &y, sigma2).unwrap();
        let est = EstepConfig { turbo_max: 2, inner_max: 3, ..EstepConfig::default() };
        let st = run_estep(&sys, &sc.priors(&cfg).unwrap(), None, &est).unwrap().state;

        let mut local = LocalSurrogate::new(&ctx, &off, &st, &y).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(rel(-local.energy / sigma2, surrogate_q(&ctx, &off, &st, &y, sigma2).unwrap()) < 1e-10);

        let mut cur = off.clone();
        let h = sc.grids.r.spacing / 4.0;
        for k in 0..12 {
            let on_z = k % 3 == 2;
            let i = if on_z { rng.random_range(0..sc.grids.p()) } else { rng.random_range(0..sc.grids.q()) };
            let d = Point::new(rng.random_range(-h..h), rng.random_range(-h..h));
            let mut next = cur.clone();
            let pos = if on_z {
                next.dz[i] = d;
                next.z_pos(&sc.grids, i)
            } else {
                next.dr[i] = d;
                next.r_pos(&sc.grids, i)
            };
            // New columns equal the rebuilt model's.
            let model = ctx.model(&next).unwrap();
            for (b, col) in grid_columns(&ctx, &local.cache, on_z, pos).unwrap() {
                let c = b.cols_in_group(sc.grids.q(), sc.grids.p()).start + i;
                assert!((col - model.group(b.group()).column(c)).norm() < 1e-12);
            }
            let (e, deltas) = local.trial(on_z, i, pos).unwrap();
            assert!(rel(-e / sigma2, surrogate_q(&ctx, &next, &st, &y, sigma2).unwrap()) < 1e-9);
            if k % 2 == 0 {
                local.accept(i, e, &deltas);
                cur = next;
            }
        }
        assert!(rel(-local.energy / sigma2, surrogate_q(&ctx, &cur, &st, &y, sigma2).unwrap()) < 1e-9);
    }
}

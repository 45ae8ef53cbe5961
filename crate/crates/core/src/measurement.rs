//! Grid dictionaries, IRS reflection schedules, the block measurement matrix
//! and observation synthesis.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_cn, steering, Arrays, ChannelSet};
use crate::error::{Error, Result};
use crate::linalg::{khatri_rao, repeat_rows, vcat, vstack, CMat, CVec, C64};
use crate::scene::{GridSpec, IndexMap, OffsetState, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    Stacked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionSchedule {
    /// N_p × T_s sensing-pilot reflection vectors.
    pub phi_r: CMat,
    /// N_p × T_c channel-estimation reflection vectors.
    pub phi_c: CMat,
    pub phase: Phase,
}

impl ReflectionSchedule {
    pub fn t_s(&self) -> usize {
        self.phi_r.ncols()
    }
    pub fn t_c(&self) -> usize {
        self.phi_c.ncols()
    }
    pub fn n_p(&self) -> usize {
        self.phi_r.nrows().max(self.phi_c.nrows())
    }

    pub fn is_unit_modulus(&self, tol: f64) -> bool {
        self.phi_r.iter().chain(self.phi_c.iter()).all(|z| (z.norm() - 1.0).abs() <= tol)
    }

    /// Phase-I columns followed by phase-II columns.
    pub fn concat(&self, other: &ReflectionSchedule) -> ReflectionSchedule {
        let cat = |a: &CMat, b: &CMat| {
            let n = a.nrows().max(b.nrows());
            let mut out = CMat::zeros(n, a.ncols() + b.ncols());
            if a.ncols() > 0 {
                out.columns_mut(0, a.ncols()).copy_from(a);
            }
            if b.ncols() > 0 {
                out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
            }
            out
        };
        ReflectionSchedule { phi_r: cat(&self.phi_r, &other.phi_r), phi_c: cat(&self.phi_c, &other.phi_c), phase: Phase::Stacked }
    }

    /// φ = [vec(Φ_r); vec(Φ_c)] (column-major, i.e. pilot-major).
    pub fn vectorize(&self) -> CVec {
        vcat(&[&CVec::from_column_slice(self.phi_r.as_slice()), &CVec::from_column_slice(self.phi_c.as_slice())])
    }

    pub fn from_vector(phi: &CVec, n_p: usize, t_s: usize, t_c: usize, phase: Phase) -> ReflectionSchedule {
        let r = CMat::from_column_slice(n_p, t_s, &phi.as_slice()[..n_p * t_s]);
        let cc = CMat::from_column_slice(n_p, t_c, &phi.as_slice()[n_p * t_s..n_p * (t_s + t_c)]);
        ReflectionSchedule { phi_r: r, phi_c: cc, phase }
    }
}

/// Angular interval `[start, start + width]` in the IRS angle convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub start: f64,
    pub width: f64,
}

impl Default for Coverage {
    fn default() -> Self {
        Coverage { start: -PI / 2.0, width: PI / 2.0 }
    }
}

/// |a^H(θ) w|² for an N-element beam `w`.
pub fn beam_gain(w: &[C64], theta: f64) -> f64 {
    let u = theta.cos();
    w.iter()
        .enumerate()
        .map(|(i, &wi)| C64::from_polar(1.0, PI * i as f64 * u) * wi)
        .sum::<C64>()
        .norm_sqr()
}

/// Phase-only sector beams: beam t covers the t-th of T equal angular slices
/// of `coverage`. Each beam starts from a linear-frequency chirp across the
/// aperture and is refined by alternating projections onto the flat sector
/// pattern and the unit-modulus set.
pub fn scanning_codebook(n_p: usize, t: usize, coverage: Coverage) -> Result<CMat> {
    if t == 0 || !t.is_power_of_two() {
        return Err(Error::Config(format!("scanning codebook size {t} is not a power of two")));
    }
    let mut out = CMat::zeros(n_p, t);
    let g = 16 * n_p.max(4);
    let grid: Vec<f64> = (0..g).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / g as f64).collect();
    // e^{jπ i u} for every grid direction, row per direction.
    let phasor: Vec<Vec<C64>> = grid.iter().map(|&u| (0..n_p).map(|i| C64::from_polar(1.0, PI * i as f64 * u)).collect()).collect();
    for k in 0..t {
        let th0 = coverage.start + coverage.width * k as f64 / t as f64;
        let th1 = coverage.start + coverage.width * (k + 1) as f64 / t as f64;
        // Half-beamwidth guard so the main lobe does not roll off inside the sector.
        let guard = 1.0 / n_p as f64;
        let (u0, u1) = {
            let (a, b) = (th0.cos(), th1.cos());
            (a.min(b) - guard, a.max(b) + guard)
        };
        let span = (n_p as f64 - 1.0).max(1.0);
        let mut w: Vec<C64> = (0..n_p)
            .map(|n| {
                let nf = n as f64;
                let psi = u0 * nf + (u1 - u0) * nf * nf / (2.0 * span);
                C64::from_polar(1.0, -PI * psi)
            })
            .collect();
        for _ in 0..60 {
            let mut acc = vec![C64::new(0.0, 0.0); n_p];
            for (&u, e) in grid.iter().zip(&phasor) {
                if u < u0 || u > u1 {
                    continue;
                }
                let s: C64 = w.iter().zip(e).map(|(&wi, &ei)| ei * wi).sum();
                if s.norm() == 0.0 {
                    continue;
                }
                let target = s / s.norm();
                for (a, &ei) in acc.iter_mut().zip(e) {
                    *a += ei.conj() * target;
                }
            }
            for (wi, a) in w.iter_mut().zip(acc.iter()) {
                if a.norm() > 0.0 {
                    *wi = a / a.norm();
                }
            }
        }
        for n in 0..n_p {
            out[(n, k)] = w[n];
        }
    }
    Ok(out)
}

/// Phase-I schedule from the scanning codebook. Sensing beams pre-compensate
/// the controller-to-element phases; channel-estimation beams are referenced
/// to the IRS-to-BS direction.
pub fn scanning_schedule(
    scene: &SceneConfig,
    arrays: &Arrays,
    h_ci: &CVec,
    t_s: usize,
    t_c: usize,
    coverage: Coverage,
) -> Result<ReflectionSchedule> {
    let n = arrays.n_p;
    let phi_r = if t_s > 0 {
        let w = scanning_codebook(n, t_s, coverage)?;
        CMat::from_fn(n, t_s, |i, k| C64::from_polar(1.0, -h_ci[i].arg()) * w[(i, k)])
    } else {
        CMat::zeros(n, 0)
    };
    let phi_c = if t_c > 0 {
        let w = scanning_codebook(n, t_c, coverage)?;
        let a_ib = steering(n, scene.theta_irs(scene.p_b)?);
        CMat::from_fn(n, t_c, |i, k| a_ib[i] * w[(i, k)].conj())
    } else {
        CMat::zeros(n, 0)
    };
    Ok(ReflectionSchedule { phi_r, phi_c, phase: Phase::I })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDictionaries {
    pub a_s_r: CMat,
    pub a_i_r: CMat,
    pub a_b_r: CMat,
    pub a_s_z: CMat,
    pub a_i_z: CMat,
    pub a_b_z: CMat,
    pub th_i_r: Vec<f64>,
    pub th_b_r: Vec<f64>,
    pub th_i_z: Vec<f64>,
    pub th_b_z: Vec<f64>,
}

pub fn build_dictionaries(scene: &SceneConfig, arrays: &Arrays, grids: &GridSpec, off: &OffsetState) -> Result<SparseDictionaries> {
    let mut th_i_r = Vec::with_capacity(grids.q());
    let mut th_b_r = Vec::with_capacity(grids.q());
    for q in 0..grids.q() {
        let p = off.r_pos(grids, q);
        th_i_r.push(scene.theta_irs(p)?);
        th_b_r.push(scene.theta_bs(p)?);
    }
    let mut th_i_z = Vec::with_capacity(grids.p());
    let mut th_b_z = Vec::with_capacity(grids.p());
    for p in 0..grids.p() {
        let pos = off.z_pos(grids, p);
        th_i_z.push(scene.theta_irs(pos)?);
        th_b_z.push(scene.theta_bs(pos)?);
    }
    let dict = |n: usize, th: &[f64]| CMat::from_columns(&th.iter().map(|&t| steering(n, t)).collect::<Vec<_>>());
    Ok(SparseDictionaries {
        a_s_r: dict(arrays.n_s, &th_i_r),
        a_i_r: dict(arrays.n_p, &th_i_r),
        a_b_r: dict(arrays.m, &th_b_r),
        a_s_z: dict(arrays.n_s, &th_i_z),
        a_i_z: dict(arrays.n_p, &th_i_z),
        a_b_z: dict(arrays.m, &th_b_z),
        th_i_r,
        th_b_r,
        th_i_z,
        th_b_z,
    })
}

/// The eight sparse channel blocks, in stacking order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    Its,
    Cts,
    Itb,
    Ctb,
    Bnl,
    Inl,
    Bl,
    Il,
}

/// Which observation a block is measured through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    SensorSensing,
    BsSensing,
    Comm,
}

/// Which support vector a block is tied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupportKind {
    Target,
    Scatterer,
    User,
}

impl Block {
    pub const ALL: [Block; 8] = [Block::Its, Block::Cts, Block::Itb, Block::Ctb, Block::Bnl, Block::Inl, Block::Bl, Block::Il];

    pub fn index(self) -> usize {
        self as usize
    }
    pub fn name(self) -> &'static str {
        match self {
            Block::Its => "ITS",
            Block::Cts => "CTS",
            Block::Itb => "ITB",
            Block::Ctb => "CTB",
            Block::Bnl => "BNL",
            Block::Inl => "INL",
            Block::Bl => "BL",
            Block::Il => "IL",
        }
    }
    pub fn len(self, q: usize, p: usize) -> usize {
        match self {
            Block::Bl | Block::Il => p,
            _ => q,
        }
    }
    pub fn group(self) -> Group {
        match self {
            Block::Its | Block::Cts => Group::SensorSensing,
            Block::Itb | Block::Ctb => Group::BsSensing,
            _ => Group::Comm,
        }
    }
    pub fn support(self) -> SupportKind {
        match self {
            Block::Its | Block::Cts | Block::Itb | Block::Ctb => SupportKind::Target,
            Block::Bnl | Block::Inl => SupportKind::Scatterer,
            Block::Bl | Block::Il => SupportKind::User,
        }
    }
    /// Columns of the block within its group's matrix.
    pub fn cols_in_group(self, q: usize, p: usize) -> Range<usize> {
        match self {
            Block::Its | Block::Itb | Block::Bnl => 0..q,
            Block::Cts | Block::Ctb | Block::Inl => q..2 * q,
            Block::Bl => 2 * q..2 * q + p,
            Block::Il => 2 * q + p..2 * q + 2 * p,
        }
    }
    /// Entries of the block within the full sparse vector x.
    pub fn range(self, q: usize, p: usize) -> Range<usize> {
        let start = match self {
            Block::Bl => 6 * q,
            Block::Il => 6 * q + p,
            b => b.index() * q,
        };
        start..start + self.len(q, p)
    }
    pub fn in_group(g: Group) -> &'static [Block] {
        match g {
            Group::SensorSensing => &[Block::Its, Block::Cts],
            Group::BsSensing => &[Block::Itb, Block::Ctb],
            Group::Comm => &[Block::Bnl, Block::Inl, Block::Bl, Block::Il],
        }
    }
}

impl Group {
    pub const ALL: [Group; 3] = [Group::SensorSensing, Group::BsSensing, Group::Comm];
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementModel {
    pub f_sr: CMat,
    pub f_br: CMat,
    /// [F_sc; F_Bc].
    pub f_c: CMat,
    pub q: usize,
    pub p: usize,
    pub t_s: usize,
    pub t_c: usize,
    pub n_s: usize,
    pub m: usize,
}

impl MeasurementModel {
    pub fn group(&self, g: Group) -> &CMat {
        match g {
            Group::SensorSensing => &self.f_sr,
            Group::BsSensing => &self.f_br,
            Group::Comm => &self.f_c,
        }
    }

    pub fn x_len(&self) -> usize {
        6 * self.q + 2 * self.p
    }

    /// F = blkdiag(F_sr, F_Br, F_c).
    pub fn full(&self) -> CMat {
        crate::linalg::block_diag(&[&self.f_sr, &self.f_br, &self.f_c])
    }

    /// Columns of `g`'s matrix that belong to `b`.
    pub fn block_cols(&self, b: Block) -> CMat {
        let r = b.cols_in_group(self.q, self.p);
        self.group(b.group()).columns(r.start, r.len()).into_owned()
    }

    /// The three group slices of x.
    pub fn split_x(&self, x: &CVec) -> [CVec; 3] {
        let (q, p) = (self.q, self.p);
        [x.rows(0, 2 * q).into_owned(), x.rows(2 * q, 2 * q).into_owned(), x.rows(4 * q, 2 * q + 2 * p).into_owned()]
    }

    pub fn apply(&self, x: &CVec) -> Observation {
        let [xs, xb, xc] = self.split_x(x);
        let yc = &self.f_c * xc;
        let ns = self.n_s * self.t_c;
        Observation {
            y_sr: &self.f_sr * xs,
            y_br: &self.f_br * xb,
            y_sc: yc.rows(0, ns).into_owned(),
            y_bc: yc.rows(ns, yc.len() - ns).into_owned(),
            phase: Phase::Stacked,
        }
    }
}

pub fn assemble_f(dicts: &SparseDictionaries, schedule: &ReflectionSchedule, h_ci: &CVec, h_ib: &CMat) -> Result<MeasurementModel> {
    let n_p = dicts.a_i_r.nrows();
    if schedule.t_s() > 0 && schedule.phi_r.nrows() != n_p || schedule.t_c() > 0 && schedule.phi_c.nrows() != n_p {
        return Err(Error::Assembly("schedule rows differ from IRS element count".into()));
    }
    if h_ci.len() != n_p || h_ib.ncols() != n_p {
        return Err(Error::Assembly("controller/BS link sizes differ from IRS element count".into()));
    }
    let (q, p) = (dicts.a_s_r.ncols(), dicts.a_s_z.ncols());
    let (n_s, m) = (dicts.a_s_r.nrows(), dicts.a_b_r.nrows());
    let (t_s, t_c) = (schedule.t_s(), schedule.t_c());

    // Φ̃_r^T A_I^*: T_s × Q reflected-path weights.
    let phi_t = CMat::from_fn(n_p, t_s, |n, t| h_ci[n] * schedule.phi_r[(n, t)]);
    let w_r = phi_t.transpose() * dicts.a_i_r.map(|z| z.conj());
    let hstack = |a: CMat, b: CMat| {
        let mut out = CMat::zeros(a.nrows(), a.ncols() + b.ncols());
        out.columns_mut(0, a.ncols()).copy_from(&a);
        out.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
        out
    };
    let f_sr = hstack(khatri_rao(&w_r, &dicts.a_s_r)?, repeat_rows(&dicts.a_s_r, t_s));
    let f_br = hstack(khatri_rao(&w_r, &dicts.a_b_r)?, repeat_rows(&dicts.a_b_r, t_s));

    let cols = 2 * q + 2 * p;
    let mut f_sc = CMat::zeros(n_s * t_c, cols);
    let mut f_bc = CMat::zeros(m * t_c, cols);
    let rs = repeat_rows(&dicts.a_s_r, t_c);
    let zs = repeat_rows(&dicts.a_s_z, t_c);
    f_sc.columns_mut(q, q).copy_from(&rs);
    f_sc.columns_mut(2 * q + p, p).copy_from(&zs);
    f_bc.columns_mut(0, q).copy_from(&repeat_rows(&dicts.a_b_r, t_c));
    f_bc.columns_mut(2 * q, p).copy_from(&repeat_rows(&dicts.a_b_z, t_c));
    for t in 0..t_c {
        // R(t) = H_IB diag(φ_c(t)).
        let r_t = CMat::from_fn(m, n_p, |i, n| h_ib[(i, n)] * schedule.phi_c[(n, t)]);
        f_bc.view_mut((t * m, q), (m, q)).copy_from(&(&r_t * &dicts.a_i_r));
        f_bc.view_mut((t * m, 2 * q + p), (m, p)).copy_from(&(&r_t * &dicts.a_i_z));
    }
    let f_c = vstack(&[&f_sc, &f_bc]);
    Ok(MeasurementModel { f_sr, f_br, f_c, q, p, t_s, t_c, n_s, m })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub y_sr: CVec,
    pub y_br: CVec,
    pub y_sc: CVec,
    pub y_bc: CVec,
    pub phase: Phase,
}

impl Observation {
    /// y_c = [y_sc; y_Bc].
    pub fn y_c(&self) -> CVec {
        vcat(&[&self.y_sc, &self.y_bc])
    }

    pub fn group(&self, g: Group) -> CVec {
        match g {
            Group::SensorSensing => self.y_sr.clone(),
            Group::BsSensing => self.y_br.clone(),
            Group::Comm => self.y_c(),
        }
    }

    /// Stack with a later phase so that rows line up with a model built on
    /// the concatenated schedule.
    pub fn stack(&self, later: &Observation) -> Observation {
        Observation {
            y_sr: vcat(&[&self.y_sr, &later.y_sr]),
            y_br: vcat(&[&self.y_br, &later.y_br]),
            y_sc: vcat(&[&self.y_sc, &later.y_sc]),
            y_bc: vcat(&[&self.y_bc, &later.y_bc]),
            phase: Phase::Stacked,
        }
    }

    pub fn len(&self) -> usize {
        self.y_sr.len() + self.y_br.len() + self.y_sc.len() + self.y_bc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stacked(&self) -> CVec {
        vcat(&[&self.y_sr, &self.y_br, &self.y_sc, &self.y_bc])
    }
}

/// Symbol-by-symbol received signals with unit pilots scaled by `amplitude`
/// (√P_T). The BS removes the known controller interference before stacking.
pub fn noiseless_observation(ch: &ChannelSet, schedule: &ReflectionSchedule, amplitude: f64) -> Observation {
    let n_s = ch.h_su.len();
    let m = ch.h_bu.len();
    let (t_s, t_c) = (schedule.t_s(), schedule.t_c());
    let a = C64::new(amplitude, 0.0);
    let mut y_sr = CVec::zeros(n_s * t_s);
    let mut y_br = CVec::zeros(m * t_s);
    for t in 0..t_s {
        let g = ch.h_ci.component_mul(&schedule.phi_r.column(t));
        let mut ys = CVec::zeros(n_s);
        let mut yb = CVec::zeros(m);
        for tg in &ch.targets {
            ys += &tg.h_its * &g + &tg.h_cts;
            yb += &tg.h_itb * &g + &tg.h_ctb;
        }
        // The controller-to-BS interference H_IB g + h_CB is known and cancelled.
        y_sr.rows_mut(t * n_s, n_s).copy_from(&(ys * a));
        y_br.rows_mut(t * m, m).copy_from(&(yb * a));
    }
    let mut y_sc = CVec::zeros(n_s * t_c);
    let mut y_bc = CVec::zeros(m * t_c);
    for t in 0..t_c {
        let g = ch.h_iu.component_mul(&schedule.phi_c.column(t));
        y_sc.rows_mut(t * n_s, n_s).copy_from(&(&ch.h_su * a));
        y_bc.rows_mut(t * m, m).copy_from(&((&ch.h_bu + &ch.h_ib * g) * a));
    }
    Observation { y_sr, y_br, y_sc, y_bc, phase: schedule.phase }
}

pub fn synthesize_observation<R: Rng + ?Sized>(
    ch: &ChannelSet,
    schedule: &ReflectionSchedule,
    amplitude: f64,
    noise_power: f64,
    rng: &mut R,
) -> Observation {
    let mut y = noiseless_observation(ch, schedule, amplitude);
    let s = noise_power.sqrt();
    for v in [&mut y.y_sr, &mut y.y_br, &mut y.y_sc, &mut y.y_bc] {
        for z in v.iter_mut() {
            *z += draw_cn(rng) * s;
        }
    }
    y
}

/// Places the (power-scaled) path gains at their grid indices.
pub fn sparse_ground_truth(ch: &ChannelSet, map: &IndexMap, q: usize, p: usize, amplitude: f64) -> CVec {
    let mut x = CVec::zeros(6 * q + 2 * p);
    for (k, tg) in ch.targets.iter().enumerate() {
        let g = map.targets[k];
        for (b, v) in [(Block::Its, tg.alpha_its), (Block::Cts, tg.alpha_cts), (Block::Itb, tg.alpha_itb), (Block::Ctb, tg.alpha_ctb)] {
            x[b.range(q, p).start + g] += v * amplitude;
        }
    }
    let w = ch.sv_weight() * amplitude;
    for (l, path) in ch.paths.iter().enumerate().skip(1) {
        let g = map.scatterers[l - 1];
        x[Block::Bnl.range(q, p).start + g] += path.alpha_bu * w;
        x[Block::Inl.range(q, p).start + g] += path.alpha_iu * w;
    }
    let los = ch.paths[0];
    x[Block::Bl.range(q, p).start + map.user] += los.alpha_bu * w;
    x[Block::Il.range(q, p).start + map.user] += los.alpha_iu * w;
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_channels, CommLoss};
    use crate::linalg::c;
    use crate::scene::{assign_offsets, build_grids, generate_truth, SceneContent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn codebook_sizes_and_modulus() {
        assert!(scanning_codebook(16, 3, Coverage::default()).is_err());
        let w = scanning_codebook(16, 1, Coverage::default()).unwrap();
        assert_eq!(w.ncols(), 1);
        let w4 = scanning_codebook(32, 4, Coverage::default()).unwrap();
        assert!(w4.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_beams_cover_the_interval() {
        let n = 48;
        let cov = Coverage::default();
        let w = scanning_codebook(n, 2, cov).unwrap();
        let cols: Vec<Vec<C64>> = (0..2).map(|k| w.column(k).iter().copied().collect()).collect();
        let mut worst = f64::INFINITY;
        for i in 0..512 {
            let th = cov.start + cov.width * (i as f64 + 0.5) / 512.0;
            let g = cols.iter().map(|w| beam_gain(w, th)).fold(0.0, f64::max) / n as f64;
            worst = worst.min(g);
        }
        // Each beam keeps at least a single-element-equivalent gain on its sector.
        assert!(worst > 1.0, "worst normalized gain {worst}");
    }

    #[test]
    fn first_column_collapses_with_unit_controller_link() {
        let scene = SceneConfig::default();
        let arrays = Arrays { m: 4, n_p: 5, n_s: 3 };
        let grids = build_grids(&scene.soi_r, &scene.soi_ru, 36, 9).unwrap();
        let d = build_dictionaries(&scene, &arrays, &grids, &OffsetState::zeros(36, 9)).unwrap();
        let mut h = CVec::zeros(5);
        h[0] = c(1.0, 0.0);
        let sched = ReflectionSchedule { phi_r: CMat::from_element(5, 1, c(1.0, 0.0)), phi_c: CMat::zeros(5, 0), phase: Phase::I };
        let f = assemble_f(&d, &sched, &h, &CMat::zeros(4, 5)).unwrap();
        for qq in 0..36 {
            for n in 0..3 {
                assert!((f.f_sr[(n, qq)] - d.a_s_r[(n, qq)]).norm() < 1e-15);
            }
        }
        let empty = ReflectionSchedule { phi_r: CMat::zeros(5, 0), phi_c: CMat::zeros(5, 0), phase: Phase::I };
        let f0 = assemble_f(&d, &empty, &h, &CMat::zeros(4, 5)).unwrap();
        assert_eq!(f0.f_sr.nrows(), 0);
    }

    #[test]
    fn dictionary_columns_move_independently() {
        let scene = SceneConfig::default();
        let arrays = Arrays::default();
        let grids = build_grids(&scene.soi_r, &scene.soi_ru, 36, 9).unwrap();
        let mut off = OffsetState::zeros(36, 9);
        let d0 = build_dictionaries(&scene, &arrays, &grids, &off).unwrap();
        off.dr[7] = crate::scene::Point::new(0.8, -1.1);
        let d1 = build_dictionaries(&scene, &arrays, &grids, &off).unwrap();
        for qq in 0..36 {
            let same = (d0.a_b_r.column(qq) - d1.a_b_r.column(qq)).norm() == 0.0;
            assert_eq!(same, qq != 7);
            assert!((d1.a_i_r.column(qq).norm() - (arrays.n_p as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_observation_equals_f_times_x() {
        let scene = SceneConfig::default();
        let arrays = Arrays { m: 8, n_p: 10, n_s: 6 };
        let grids = build_grids(&scene.soi_r, &scene.soi_ru, 36, 9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let truth = generate_truth(&grids, &SceneContent::default(), &mut rng).unwrap();
        let (off, map) = assign_offsets(&truth, &grids).unwrap();
        let ch = generate_channels(&scene, &arrays, &truth, &CommLoss::default(), &mut rng).unwrap();
        let sched = scanning_schedule(&scene, &arrays, &ch.h_ci, 2, 2, Coverage::default()).unwrap();
        let d = build_dictionaries(&scene, &arrays, &grids, &off).unwrap();
        let f = assemble_f(&d, &sched, &ch.h_ci, &ch.h_ib).unwrap();
        let x = sparse_ground_truth(&ch, &map, 36, 9, 0.1);
        assert_eq!(x.iter().filter(|z| z.norm() > 0.0).count(), 4 * truth.k() + 2 * truth.l() + 2);
        let y = noiseless_observation(&ch, &sched, 0.1);
        let fx = f.apply(&x);
        let scale = y.stacked().camax();
        assert!((y.stacked() - fx.stacked()).camax() < 1e-10 * scale.max(1e-300));
        let full = f.full() * &x;
        assert!((full - y.stacked()).camax() < 1e-10 * scale);
    }

    #[test]
    fn noise_only_variance() {
        let scene = SceneConfig::default();
        let arrays = Arrays { m: 50, n_p: 4, n_s: 50 };
        let truth = crate::scene::GroundTruth {
            targets: vec![],
            scatterers: vec![],
            user: crate::scene::Point::new(0.0, 8.0),
            overlap: vec![],
            rcs: vec![],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ch = crate::channel::generate_channels_with(&scene, &arrays, &truth, &CommLoss::default(), || c(0.0, 0.0)).unwrap();
        let sched = ReflectionSchedule { phi_r: CMat::from_element(4, 50, c(1.0, 0.0)), phi_c: CMat::from_element(4, 50, c(1.0, 0.0)), phase: Phase::I };
        let y = synthesize_observation(&ch, &sched, 1.0, 2.0, &mut rng);
        let v = y.stacked();
        let var = v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64;
        assert!(v.len() >= 10_000);
        assert!((var / 2.0 - 1.0).abs() < 0.05);
    }
}

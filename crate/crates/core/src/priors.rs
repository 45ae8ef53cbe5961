//! Hierarchical sparsity prior: Gaussian-gamma channel prior, coupled
//! target/scatterer supports and the Ising union-support prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{path_loss, CommLoss, SensingLink};
use crate::error::{Error, Result};
use crate::measurement::Block;
use crate::scene::{GridSpec, SceneConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportState {
    pub s_t: Vec<i8>,
    pub s_nl: Vec<i8>,
    pub s_l: Vec<i8>,
    pub s_u: Vec<i8>,
}

impl SupportState {
    pub fn union_consistent(&self) -> bool {
        (0..self.s_u.len()).all(|q| (self.s_u[q] == 1) == (self.s_t[q] == 1 || self.s_nl[q] == 1))
    }
}

/// 4-connected Ising lattice in the column-major grid layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrfParams {
    pub alpha: f64,
    pub beta: f64,
    /// Rows per column (the index stride between horizontal neighbours).
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dir {
    Left,
    Right,
    Top,
    Bottom,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::Left, Dir::Right, Dir::Top, Dir::Bottom];
    pub fn opposite(self) -> Dir {
        match self {
            Dir::Left => Dir::Right,
            Dir::Right => Dir::Left,
            Dir::Top => Dir::Bottom,
            Dir::Bottom => Dir::Top,
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
}

impl MrfParams {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn for_grids(alpha: f64, beta: f64, grids: &GridSpec) -> Self {
        MrfParams { alpha, beta, rows: grids.r.rows, cols: grids.r.cols }
    }

    /// Neighbour of `q` in direction `d`; no wraparound.
    pub fn neighbor(&self, q: usize, d: Dir) -> Option<usize> {
        let (c, r) = (q / self.rows, q % self.rows);
        match d {
            Dir::Left => (c > 0).then(|| q - self.rows),
            Dir::Right => (c + 1 < self.cols).then(|| q + self.rows),
            Dir::Top => (r > 0).then(|| q - 1),
            Dir::Bottom => (r + 1 < self.rows).then(|| q + 1),
        }
    }

    pub fn neighbors(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        Dir::ALL.into_iter().filter_map(move |d| self.neighbor(q, d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportProbs {
    pub p_t: f64,
    pub p_nl: f64,
    pub p_l: f64,
}

impl SupportProbs {
    pub fn from_counts(k: usize, l: usize, o: usize, p: usize) -> Result<Self> {
        if o > k.min(l) || k + l == o || p == 0 {
            return Err(Error::Config(format!("invalid object counts K={k} L={l} O={o} P={p}")));
        }
        let n = (k + l - o) as f64;
        Ok(SupportProbs { p_t: k as f64 / n, p_nl: l as f64 / n, p_l: 1.0 / p as f64 })
    }
}

pub fn ising_unnorm_logprob(s_u: &[i8], mrf: &MrfParams) -> f64 {
    let mut s = 0.0;
    for q in 0..s_u.len() {
        let sq = s_u[q] as f64;
        let pair: f64 = mrf.neighbors(q).map(|n| s_u[n] as f64).sum();
        s += -mrf.alpha * sq + 0.5 * mrf.beta * sq * pair;
    }
    s
}

fn bern(s: i8, p: f64) -> f64 {
    if s == 1 {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// Log prior of a full support configuration up to the Ising constant.
pub fn coupled_support_logprior(st: &SupportState, probs: &SupportProbs, mrf: &MrfParams) -> f64 {
    let mut lp = ising_unnorm_logprob(&st.s_u, mrf);
    for q in 0..st.s_u.len() {
        if st.s_u[q] == -1 {
            if st.s_t[q] == 1 || st.s_nl[q] == 1 {
                return f64::NEG_INFINITY;
            }
        } else {
            lp += bern(st.s_t[q], probs.p_t) + bern(st.s_nl[q], probs.p_nl);
        }
    }
    lp + st.s_l.iter().map(|&s| bern(s, probs.p_l)).sum::<f64>()
}

/// Gamma shape/rate pairs for one block, per grid index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockHyper {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl BlockHyper {
    pub fn len(&self) -> usize {
        self.a.len()
    }
    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Indexed by [`Block::index`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaHyper {
    pub blocks: Vec<BlockHyper>,
}

impl GammaHyper {
    pub fn block(&self, b: Block) -> &BlockHyper {
        &self.blocks[b.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Active gamma shape.
    pub a: f64,
    /// Active gamma rate; derived from nominal gains when absent.
    pub b: Option<f64>,
    pub a_bar: f64,
    pub b_bar: Option<f64>,
    /// Inactive over active precision mean, used when `b_bar` is absent.
    pub inactive_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "p_T")]
    pub p_t: Option<f64>,
    #[serde(rename = "p_NL")]
    pub p_nl: Option<f64>,
    #[serde(rename = "p_L")]
    pub p_l: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { a: 1.0, b: None, a_bar: 1.0, b_bar: None, inactive_ratio: 1e4, alpha: 0.3, beta: 0.5, p_t: None, p_nl: None, p_l: None }
    }
}

impl PriorConfig {
    pub fn probs(&self, k: usize, l: usize, o: usize, p: usize) -> Result<SupportProbs> {
        let d = SupportProbs::from_counts(k, l, o, p)?;
        Ok(SupportProbs { p_t: self.p_t.unwrap_or(d.p_t), p_nl: self.p_nl.unwrap_or(d.p_nl), p_l: self.p_l.unwrap_or(d.p_l) })
    }
}

/// Truth-free per-grid gain magnitudes implied by the path-loss models
/// (unit RCS, user at the center of its region), scaled by the pilot amplitude.
pub fn nominal_gains(scene: &SceneConfig, grids: &GridSpec, comm: &CommLoss, l_count: usize, amplitude: f64) -> Result<Vec<Vec<f64>>> {
    let w = amplitude / ((l_count + 1) as f64).sqrt();
    let pu = scene.soi_ru.center;
    let mut out = vec![Vec::new(); 8];
    for &r in &grids.r.points {
        out[Block::Its.index()].push(amplitude * path_loss(SensingLink::IrsTargetSensor, scene, r, 1.0)?);
        out[Block::Cts.index()].push(amplitude * path_loss(SensingLink::CtrlTargetSensor, scene, r, 1.0)?);
        out[Block::Itb.index()].push(amplitude * path_loss(SensingLink::IrsTargetBs, scene, r, 1.0)?);
        out[Block::Ctb.index()].push(amplitude * path_loss(SensingLink::CtrlTargetBs, scene, r, 1.0)?);
        let d0 = pu.dist(r);
        out[Block::Bnl.index()].push(w * comm.amplitude(d0 + r.dist(scene.p_b), false));
        out[Block::Inl.index()].push(w * comm.amplitude(d0 + r.dist(scene.p_i), false));
    }
    for &z in &grids.z.points {
        out[Block::Bl.index()].push(w * comm.amplitude(z.dist(scene.p_b), true));
        out[Block::Il.index()].push(w * comm.amplitude(z.dist(scene.p_i), true));
    }
    Ok(out)
}

/// Active precision mean a/b = 1/G²; inactive mean `inactive_ratio`/G².
pub fn hyperparams_from_gains(gains: &[Vec<f64>], cfg: &PriorConfig) -> GammaHyper {
    let blocks = gains
        .iter()
        .map(|g| {
            let n = g.len();
            let b: Vec<f64> = g.iter().map(|&gq| cfg.b.unwrap_or(cfg.a * gq * gq)).collect();
            let b_bar: Vec<f64> = g.iter().map(|&gq| cfg.b_bar.unwrap_or(cfg.a_bar * gq * gq / cfg.inactive_ratio)).collect();
            BlockHyper { a: vec![cfg.a; n], b, a_bar: vec![cfg.a_bar; n], b_bar }
        })
        .collect();
    GammaHyper { blocks }
}

pub fn hyperparams_from_scene(
    scene: &SceneConfig,
    grids: &GridSpec,
    comm: &CommLoss,
    l_count: usize,
    amplitude: f64,
    cfg: &PriorConfig,
) -> Result<GammaHyper> {
    Ok(hyperparams_from_gains(&nominal_gains(scene, grids, comm, l_count, amplitude)?, cfg))
}

/// Gibbs sampling of the Ising field followed by the conditional supports.
///
/// Given s_U = 1 the pair (s_T, s_NL) is drawn from the categorical
/// {both, target only, scatterer only} whose marginals are p_T and p_NL, so
/// every draw is union consistent.
pub fn sample_support<R: Rng + ?Sized>(probs: &SupportProbs, mrf: &MrfParams, p: usize, sweeps: usize, rng: &mut R) -> SupportState {
    let q = mrf.len();
    let mut s_u: Vec<i8> = (0..q).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    for _ in 0..sweeps {
        for i in 0..q {
            let field: f64 = mrf.neighbors(i).map(|n| s_u[n] as f64).sum();
            // log P(+1)/P(−1) = 2(−α + β Σ s).
            let lo = 2.0 * (-mrf.alpha + mrf.beta * field);
            let pp = 1.0 / (1.0 + (-lo).exp());
            s_u[i] = if rng.random::<f64>() < pp { 1 } else { -1 };
        }
    }
    let both = (probs.p_t + probs.p_nl - 1.0).max(0.0);
    let t_only = probs.p_t - both;
    let mut s_t = vec![-1i8; q];
    let mut s_nl = vec![-1i8; q];
    for i in 0..q {
        if s_u[i] != 1 {
            continue;
        }
        let u: f64 = rng.random::<f64>() * (probs.p_t + probs.p_nl - both);
        if u < both {
            s_t[i] = 1;
            s_nl[i] = 1;
        } else if u < both + t_only {
            s_t[i] = 1;
        } else {
            s_nl[i] = 1;
        }
    }
    let s_l = (0..p).map(|_| if rng.random::<f64>() < probs.p_l { 1 } else { -1 }).collect();
    SupportState { s_t, s_nl, s_l, s_u }
}

//! Experiment configuration, the two-phase trial protocol, Monte-Carlo sweeps
//! and result persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{nmse, rmse, OmpBudget};
use crate::channel::{generate_channels, Arrays, ChannelSet, CommLoss};
use crate::crb::{approx_fim_coeffs, CrbContext, Object};
use crate::error::{Error, Result};
use crate::estep::{PosteriorState, Priors};
use crate::linalg::CVec;
use crate::measurement::{scanning_schedule, sparse_ground_truth, synthesize_observation, Block, Coverage, Observation, Phase, ReflectionSchedule};
use crate::mstep::{run_as_tvbi, AsTvbiConfig, AsTvbiResult, Estimator, ModelContext, OuterTrace};
use crate::priors::{nominal_gains, hyperparams_from_gains, MrfParams, PriorConfig};
use crate::rcg::{optimize, RcgConfig, RcgTrace};
use crate::scene::{assign_offsets, build_grids, dbm_to_watts, generate_truth, GridSpec, GroundTruth, IndexMap, OffsetState, Point, SceneConfig, SceneContent};

pub const SCHEMA_VERSION: u32 = 1;

/// RNG stream ids per trial seed.
pub const STREAM_SCENE: u64 = 1;
pub const STREAM_GAINS: u64 = 2;
pub const STREAM_NOISE_I: u64 = 3;
pub const STREAM_NOISE_II: u64 = 4;

pub fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    AsTvbi,
    TpOmp,
    TpSbl,
    SpTvbi,
    Genie,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::AsTvbi, Scheme::TpOmp, Scheme::TpSbl, Scheme::SpTvbi, Scheme::Genie];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::AsTvbi => "as-tvbi",
            Scheme::TpOmp => "tp-omp",
            Scheme::TpSbl => "tp-sbl",
            Scheme::SpTvbi => "sp-tvbi",
            Scheme::Genie => "genie",
        }
    }

    pub fn two_phase(self) -> bool {
        self != Scheme::SpTvbi
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pilots {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    pub t4: usize,
}

impl Default for Pilots {
    fn default() -> Self {
        Pilots { t1: 2, t2: 2, t3: 2, t4: 2 }
    }
}

impl Pilots {
    /// Single-phase allocation with the same total budget.
    pub fn single_phase(&self) -> Pilots {
        Pilots { t1: self.t1 + self.t3, t2: self.t2 + self.t4, t3: 0, t4: 0 }
    }

    pub fn total(&self) -> usize {
        self.t1 + self.t2 + self.t3 + self.t4
    }
}

/// Half-open seed range `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) as usize
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FromStr for SeedRange {
    type Err = Error;
    /// `a..b` (half open) or a single seed.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad seed range {s:?}"));
        if let Some((a, b)) = s.split_once("..") {
            let start = a.trim().parse().map_err(|_| bad())?;
            let end = b.trim().parse().map_err(|_| bad())?;
            if end < start {
                return Err(bad());
            }
            Ok(SeedRange { start, end })
        } else {
            let v: u64 = s.trim().parse().map_err(|_| bad())?;
            Ok(SeedRange { start: v, end: v + 1 })
        }
    }
}

/// Optional sweep axes; an empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub gamma_o: Vec<f64>,
    pub n_p: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub scene: SceneConfig,
    pub arrays: Arrays,
    pub q: usize,
    pub p: usize,
    pub content: SceneContent,
    pub pilots: Pilots,
    pub power_dbm: Vec<f64>,
    pub seeds: SeedRange,
    pub schemes: Vec<Scheme>,
    pub prior: PriorConfig,
    pub comm: CommLoss,
    pub estimator: AsTvbiConfig,
    pub rcg: RcgConfig,
    pub sbl_max_iter: usize,
    pub coverage: Coverage,
    pub sweep: SweepAxes,
    /// Support probability above which a grid counts as a detection.
    pub detect_threshold: f64,
    /// Keep per-iteration traces of the first seed at every sweep point.
    pub keep_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            scene: SceneConfig::default(),
            arrays: Arrays::default(),
            q: 36,
            p: 9,
            content: SceneContent::default(),
            pilots: Pilots::default(),
            power_dbm: vec![0.0, 5.0, 10.0],
            seeds: SeedRange { start: 0, end: 100 },
            schemes: Scheme::ALL.to_vec(),
            prior: PriorConfig::default(),
            comm: CommLoss::default(),
            estimator: AsTvbiConfig::default(),
            rcg: RcgConfig::default(),
            sbl_max_iter: 200,
            coverage: Coverage::default(),
            sweep: SweepAxes::default(),
            detect_threshold: 0.5,
            keep_traces: true,
        }
    }

    /// Full-size arrays and scene content; expect long runtimes.
    pub fn paper() -> Self {
        let mut c = ExperimentConfig::desk();
        c.profile = Profile::Paper;
        c.arrays = Arrays { m: 160, n_p: 192, n_s: 160 };
        c.q = 64;
        c.p = 9;
        c.content = SceneContent { k_blocks: 3, l_blocks: 4, overlap: 4, ..SceneContent::default() };
        c.seeds = SeedRange { start: 0, end: 50 };
        c.estimator.top = 14;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Paper => ExperimentConfig::paper(),
        }
    }

    /// Parses TOML on top of the profile named in the file (desk if absent).
    pub fn from_toml(s: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(s)?;
        let profile = match raw.get("profile").and_then(|v| v.as_str()) {
            Some(p) => p.parse()?,
            None => Profile::Desk,
        };
        let mut base = toml::Value::try_from(ExperimentConfig::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, raw);
        let cfg: ExperimentConfig = base.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.power_dbm.is_empty() {
            return Err(Error::Config("power_dbm is empty".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("no schemes selected".into()));
        }
        if self.arrays.m == 0 || self.arrays.n_p == 0 || self.arrays.n_s == 0 {
            return Err(Error::Config("array sizes must be positive".into()));
        }
        Ok(())
    }

    /// Stable digest of the configuration (FNV-1a over its JSON form).
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in s.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// One point of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p_t_dbm: f64,
    pub n_p: usize,
    pub overlap: usize,
    pub gamma_o: f64,
}

impl ExperimentConfig {
    pub fn points(&self) -> Vec<SweepPoint> {
        let nps = if self.sweep.n_p.is_empty() { vec![self.arrays.n_p] } else { self.sweep.n_p.clone() };
        let (k, l) = (self.content.k(), self.content.l());
        let overlaps: Vec<usize> = if self.sweep.gamma_o.is_empty() {
            vec![self.content.overlap]
        } else {
            self.sweep.gamma_o.iter().map(|&g| SceneContent::overlap_for_ratio(k, l, g)).collect()
        };
        let mut out = Vec::new();
        for &n_p in &nps {
            for &o in &overlaps {
                for &pt in &self.power_dbm {
                    let gamma_o = o as f64 / (k + l - o) as f64;
                    out.push(SweepPoint { p_t_dbm: pt, n_p, overlap: o, gamma_o });
                }
            }
        }
        out
    }
}

/// A drawn scene with its channels and the phase-I reflection schedule.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub scene: SceneConfig,
    pub arrays: Arrays,
    pub grids: GridSpec,
    pub content: SceneContent,
    pub truth: GroundTruth,
    pub channels: ChannelSet,
    pub map: IndexMap,
    pub true_offsets: OffsetState,
    pub amplitude: f64,
    pub x_true: CVec,
}

impl Scenario {
    pub fn generate(cfg: &ExperimentConfig, point: &SweepPoint, seed: u64) -> Result<Scenario> {
        let arrays = Arrays { n_p: point.n_p, ..cfg.arrays };
        let content = SceneContent { overlap: point.overlap, ..cfg.content.clone() };
        let grids = build_grids(&cfg.scene.soi_r, &cfg.scene.soi_ru, cfg.q, cfg.p)?;
        let truth = generate_truth(&grids, &content, &mut stream(seed, STREAM_SCENE))?;
        let channels = generate_channels(&cfg.scene, &arrays, &truth, &cfg.comm, &mut stream(seed, STREAM_GAINS))?;
        let (true_offsets, map) = assign_offsets(&truth, &grids)?;
        let amplitude = dbm_to_watts(point.p_t_dbm).sqrt();
        let x_true = sparse_ground_truth(&channels, &map, grids.q(), grids.p(), amplitude);
        Ok(Scenario { scene: cfg.scene.clone(), arrays, grids, content, truth, channels, map, true_offsets, amplitude, x_true })
    }

    pub fn schedule(&self, t_s: usize, t_c: usize, coverage: Coverage) -> Result<ReflectionSchedule> {
        scanning_schedule(&self.scene, &self.arrays, &self.channels.h_ci, t_s, t_c, coverage)
    }

    pub fn context(&self, schedule: ReflectionSchedule) -> ModelContext {
        ModelContext {
            scene: self.scene.clone(),
            arrays: self.arrays,
            grids: self.grids.clone(),
            schedule,
            h_ci: self.channels.h_ci.clone(),
            h_ib: self.channels.h_ib.clone(),
        }
    }

    pub fn crb_context(&self) -> CrbContext {
        CrbContext {
            scene: self.scene.clone(),
            arrays: self.arrays,
            h_ci: self.channels.h_ci.clone(),
            h_ib: self.channels.h_ib.clone(),
            sigma2: self.scene.noise_power,
        }
    }

    /// Squared nominal gains per block (the energy normalization).
    pub fn gain_scale(&self, comm: &CommLoss) -> Result<Vec<Vec<f64>>> {
        let g = nominal_gains(&self.scene, &self.grids, comm, self.content.l(), self.amplitude)?;
        Ok(g.into_iter().map(|b| b.into_iter().map(|v| v * v).collect()).collect())
    }

    pub fn priors(&self, cfg: &ExperimentConfig) -> Result<Priors> {
        let gains = nominal_gains(&self.scene, &self.grids, &cfg.comm, self.content.l(), self.amplitude)?;
        Ok(Priors {
            hyper: hyperparams_from_gains(&gains, &cfg.prior),
            probs: cfg.prior.probs(self.content.k(), self.content.l(), self.content.overlap, self.grids.p())?,
            mrf: MrfParams::for_grids(cfg.prior.alpha, cfg.prior.beta, &self.grids),
        })
    }

    /// Ground-truth objects with the pilot-scaled gains.
    pub fn true_objects(&self) -> Vec<Object> {
        let ch = &self.channels;
        let a = self.amplitude;
        let w = ch.sv_weight() * a;
        let mut objs = Vec::new();
        for (k, t) in ch.targets.iter().enumerate() {
            let sensing = Some([t.alpha_its * a, t.alpha_cts * a, t.alpha_itb * a, t.alpha_ctb * a]);
            let comm = self.truth.is_overlap_target(k).map(|l| {
                let p = ch.paths[l + 1];
                [p.alpha_bu * w, p.alpha_iu * w]
            });
            objs.push(Object::new(self.truth.targets[k], sensing, comm, false));
        }
        for (l, &pos) in self.truth.scatterers.iter().enumerate() {
            if self.truth.is_overlap_scatterer(l).is_some() {
                continue;
            }
            let p = ch.paths[l + 1];
            objs.push(Object::new(pos, None, Some([p.alpha_bu * w, p.alpha_iu * w]), false));
        }
        let los = ch.paths[0];
        objs.push(Object::new(self.truth.user, None, Some([los.alpha_bu * w, los.alpha_iu * w]), true));
        crate::crb::order_objects(objs)
    }
}

/// Grids declared as targets, scatterers and the user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub targets: Vec<usize>,
    pub scatterers: Vec<usize>,
    pub user: usize,
}

/// Top-`k` target and top-`l` scatterer grids by normalized energy; when
/// `threshold` is given only grids whose support posterior exceeds it qualify.
/// The user is the z grid of largest normalized energy.
pub fn detect(st: &PosteriorState, scale: &[Vec<f64>], k: usize, l: usize, threshold: Option<f64>) -> Detections {
    let q = st.pi_t.len();
    let energy = |blocks: &[Block], i: usize| -> f64 { blocks.iter().map(|b| st.mu[b.index()][i].norm_sqr() / scale[b.index()][i]).sum() };
    let pick = |blocks: &[Block], pi: &[f64], n: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..q).filter(|&i| threshold.is_none_or(|t| pi[i] > t)).collect();
        idx.sort_by(|&a, &b| energy(blocks, b).total_cmp(&energy(blocks, a)).then(a.cmp(&b)));
        idx.truncate(n);
        idx.sort_unstable();
        idx
    };
    let targets = pick(&[Block::Its, Block::Cts, Block::Itb, Block::Ctb], &st.pi_t, k);
    let scatterers = pick(&[Block::Bnl, Block::Inl], &st.pi_nl, l);
    let p = st.pi_l.len();
    let user = (0..p).max_by(|&a, &b| energy(&[Block::Bl, Block::Il], a).total_cmp(&energy(&[Block::Bl, Block::Il], b)).then(b.cmp(&a))).unwrap_or(0);
    Detections { targets, scatterers, user }
}

/// CRB objects at the detected grids, with the estimated gains.
pub fn objects_from_estimate(st: &PosteriorState, off: &OffsetState, grids: &GridSpec, det: &Detections) -> Vec<Object> {
    let mu = |b: Block, i: usize| st.mu[b.index()][i];
    let mut objs = Vec::new();
    for &q in &det.targets {
        let sensing = Some([mu(Block::Its, q), mu(Block::Cts, q), mu(Block::Itb, q), mu(Block::Ctb, q)]);
        let comm = det.scatterers.contains(&q).then(|| [mu(Block::Bnl, q), mu(Block::Inl, q)]);
        objs.push(Object::new(off.r_pos(grids, q), sensing, comm, false));
    }
    for &q in &det.scatterers {
        if det.targets.contains(&q) {
            continue;
        }
        objs.push(Object::new(off.r_pos(grids, q), None, Some([mu(Block::Bnl, q), mu(Block::Inl, q)]), false));
    }
    let u = det.user;
    objs.push(Object::new(off.z_pos(grids, u), None, Some([mu(Block::Bl, u), mu(Block::Il, u)]), true));
    crate::crb::order_objects(objs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub scheme: Scheme,
    pub p_t_dbm: f64,
    pub n_p: usize,
    pub overlap: usize,
    pub gamma_o: f64,
    pub failed: bool,
    pub error: String,
    pub nmse: f64,
    pub nmse_blocks: [f64; 8],
    pub rmse: f64,
    pub rmse_targets: f64,
    pub rmse_scatterers: f64,
    pub rmse_user: f64,
    pub iterations_phase1: usize,
    pub iterations_phase2: usize,
    pub rcg_iterations: usize,
    pub crb_objective: f64,
}

/// Traces kept for the convergence figures.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialTraces {
    pub outer_phase1: Vec<OuterTrace>,
    pub outer_phase2: Vec<OuterTrace>,
    pub rcg: Vec<RcgTrace>,
}

#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub result: TrialResult,
    pub traces: TrialTraces,
    pub wall_seconds: f64,
}

fn estimator_for(cfg: &ExperimentConfig, scheme: Scheme, sc: &Scenario) -> Estimator {
    match scheme {
        Scheme::TpOmp => Estimator::Omp(OmpBudget { k: sc.content.k(), l: sc.content.l() }),
        Scheme::TpSbl => Estimator::Sbl { max_iter: cfg.sbl_max_iter },
        _ => Estimator::Tvbi,
    }
}

fn flat_r_scale(scale: &[Vec<f64>]) -> Vec<f64> {
    scale[..6].iter().flatten().copied().collect()
}

fn metrics(sc: &Scenario, res: &AsTvbiResult, scale: &[Vec<f64>], gate: Option<f64>) -> Result<([f64; 8], f64, [f64; 4])> {
    let (q, p) = (sc.grids.q(), sc.grids.p());
    let mu = res.state.mu_full();
    let mut nb = [0.0; 8];
    for b in Block::ALL {
        let r = b.range(q, p);
        nb[b.index()] = nmse(&mu.rows(r.start, r.len()).into_owned(), &sc.x_true.rows(r.start, r.len()).into_owned())?;
    }
    let mean = nb.iter().sum::<f64>() / 8.0;
    let det = detect(&res.state, scale, sc.content.k(), sc.content.l(), gate);
    let tp: Vec<Point> = det.targets.iter().map(|&i| res.offsets.r_pos(&sc.grids, i)).collect();
    let sp: Vec<Point> = det.scatterers.iter().map(|&i| res.offsets.r_pos(&sc.grids, i)).collect();
    let up = [res.offsets.z_pos(&sc.grids, det.user)];
    let pen = sc.grids.r.diagonal();
    let rt = rmse(&[(&tp, &sc.truth.targets)], pen);
    let rs = rmse(&[(&sp, &sc.truth.scatterers)], pen);
    let ru = rmse(&[(&up, &[sc.truth.user])], pen);
    let all = rmse(&[(&tp, &sc.truth.targets), (&sp, &sc.truth.scatterers), (&up, &[sc.truth.user])], pen);
    Ok((nb, mean, [all, rt, rs, ru]))
}

fn check_finite(y: &Observation) -> Result<()> {
    if y.stacked().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("non-finite observation".into()));
    }
    Ok(())
}

/// Designs the phase-II schedule for `objs` starting from scanning beams.
pub fn design_phase_two(cfg: &ExperimentConfig, sc: &Scenario, objs: &[Object], phase1: &ReflectionSchedule) -> Result<(ReflectionSchedule, usize, f64, Vec<RcgTrace>)> {
    let (t3, t4) = (cfg.pilots.t3, cfg.pilots.t4);
    let mut phi0 = sc.schedule(t3, t4, cfg.coverage)?;
    phi0.phase = Phase::II;
    let co = approx_fim_coeffs(&sc.crb_context(), objs, phase1, t3, t4)?;
    match optimize(&co, &phi0.vectorize(), &cfg.rcg) {
        Ok(r) => Ok((ReflectionSchedule::from_vector(&r.phi, sc.arrays.n_p, t3, t4, Phase::II), r.iterations, r.objective, r.trace)),
        Err(Error::Infeasible(_)) => Ok((phi0, 0, f64::INFINITY, Vec::new())),
        Err(e) => Err(e),
    }
}

/// Phase I, reflection design, phase II and the final estimate for one seed.
pub fn run_two_phase(cfg: &ExperimentConfig, scheme: Scheme, point: &SweepPoint, seed: u64) -> Result<(TrialResult, TrialTraces)> {
    let sc = Scenario::generate(cfg, point, seed)?;
    let pilots = if scheme.two_phase() { cfg.pilots } else { cfg.pilots.single_phase() };
    let sigma2 = cfg.scene.noise_power;
    let priors = sc.priors(cfg)?;
    let scale = sc.gain_scale(&cfg.comm)?;
    let r_scale = flat_r_scale(&scale);
    let est = estimator_for(cfg, scheme, &sc);
    let gate = matches!(est, Estimator::Tvbi).then_some(cfg.detect_threshold);
    let mut est_cfg = cfg.estimator.clone();
    est_cfg.top = sc.content.k() + sc.content.l();

    let sched1 = sc.schedule(pilots.t1, pilots.t2, cfg.coverage)?;
    let y1 = synthesize_observation(&sc.channels, &sched1, sc.amplitude, sigma2, &mut stream(seed, STREAM_NOISE_I));
    check_finite(&y1)?;
    let mut traces = TrialTraces::default();

    let phase1 = if scheme == Scheme::Genie {
        None
    } else {
        let r = run_as_tvbi(&sc.context(sched1.clone()), &y1, sigma2, &priors, &est, &est_cfg, &r_scale, None)?;
        traces.outer_phase1 = r.trace.clone();
        Some(r)
    };

    let (final_res, it2, rcg_it, crb_obj) = if !scheme.two_phase() {
        (phase1.clone().expect("single phase runs phase I"), 0, 0, f64::NAN)
    } else {
        let objs = match &phase1 {
            Some(r) => {
                let det = detect(&r.state, &scale, sc.content.k(), sc.content.l(), gate);
                objects_from_estimate(&r.state, &r.offsets, &sc.grids, &det)
            }
            None => sc.true_objects(),
        };
        let (sched2, rcg_it, obj, rtrace) = design_phase_two(cfg, &sc, &objs, &sched1)?;
        traces.rcg = rtrace;
        let y2 = synthesize_observation(&sc.channels, &sched2, sc.amplitude, sigma2, &mut stream(seed, STREAM_NOISE_II));
        check_finite(&y2)?;
        let y = y1.stack(&y2);
        let ctx = sc.context(sched1.concat(&sched2));
        let init = phase1.as_ref().map(|r| r.offsets.clone());
        let r = run_as_tvbi(&ctx, &y, sigma2, &priors, &est, &est_cfg, &r_scale, init)?;
        traces.outer_phase2 = r.trace.clone();
        let it = r.iterations;
        (r, it, rcg_it, obj)
    };
    let (nb, mean, rm) = metrics(&sc, &final_res, &scale, gate)?;
    let it1 = phase1.as_ref().map_or(0, |r| r.iterations);
    let result = TrialResult {
        seed,
        scheme,
        p_t_dbm: point.p_t_dbm,
        n_p: point.n_p,
        overlap: point.overlap,
        gamma_o: point.gamma_o,
        failed: false,
        error: String::new(),
        nmse: mean,
        nmse_blocks: nb,
        rmse: rm[0],
        rmse_targets: rm[1],
        rmse_scatterers: rm[2],
        rmse_user: rm[3],
        iterations_phase1: it1,
        iterations_phase2: it2,
        rcg_iterations: rcg_it,
        crb_objective: crb_obj,
    };
    Ok((result, traces))
}

pub fn run_trial(cfg: &ExperimentConfig, scheme: Scheme, point: &SweepPoint, seed: u64) -> TrialOutput {
    let t0 = std::time::Instant::now();
    let (result, traces) = match run_two_phase(cfg, scheme, point, seed) {
        Ok(v) => v,
        Err(e) => (
            TrialResult {
                seed,
                scheme,
                p_t_dbm: point.p_t_dbm,
                n_p: point.n_p,
                overlap: point.overlap,
                gamma_o: point.gamma_o,
                failed: true,
                error: e.to_string(),
                nmse: f64::NAN,
                nmse_blocks: [f64::NAN; 8],
                rmse: f64::NAN,
                rmse_targets: f64::NAN,
                rmse_scatterers: f64::NAN,
                rmse_user: f64::NAN,
                iterations_phase1: 0,
                iterations_phase2: 0,
                rcg_iterations: 0,
                crb_objective: f64::NAN,
            },
            TrialTraces::default(),
        ),
    };
    TrialOutput { result, traces, wall_seconds: t0.elapsed().as_secs_f64() }
}

/// Aggregate over the successful trials of one (point, scheme).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub scheme: Scheme,
    pub point: SweepPoint,
    pub trials: usize,
    pub failures: usize,
    pub mean_nmse: f64,
    pub mean_nmse_blocks: [f64; 8],
    pub mean_rmse: f64,
    pub mean_rmse_targets: f64,
    pub mean_rmse_scatterers: f64,
    pub mean_rmse_user: f64,
    pub mean_iterations: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub trials: Vec<TrialOutput>,
    pub summary: Vec<PointSummary>,
}

impl SweepResult {
    pub fn find(&self, scheme: Scheme, pred: impl Fn(&SweepPoint) -> bool) -> Option<&PointSummary> {
        self.summary.iter().find(|s| s.scheme == scheme && pred(&s.point))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn summarize(trials: &[TrialOutput], points: &[SweepPoint], schemes: &[Scheme]) -> Vec<PointSummary> {
    let mut out = Vec::new();
    for pt in points {
        for &s in schemes {
            let rows: Vec<&TrialResult> = trials.iter().map(|t| &t.result).filter(|r| r.scheme == s && r.p_t_dbm == pt.p_t_dbm && r.n_p == pt.n_p && r.overlap == pt.overlap).collect();
            let ok: Vec<&&TrialResult> = rows.iter().filter(|r| !r.failed).collect();
            let mut nb = [0.0; 8];
            for (b, v) in nb.iter_mut().enumerate() {
                *v = mean(ok.iter().map(|r| r.nmse_blocks[b]));
            }
            out.push(PointSummary {
                scheme: s,
                point: *pt,
                trials: ok.len(),
                failures: rows.len() - ok.len(),
                mean_nmse: mean(ok.iter().map(|r| r.nmse)),
                mean_nmse_blocks: nb,
                mean_rmse: mean(ok.iter().map(|r| r.rmse)),
                mean_rmse_targets: mean(ok.iter().map(|r| r.rmse_targets)),
                mean_rmse_scatterers: mean(ok.iter().map(|r| r.rmse_scatterers)),
                mean_rmse_user: mean(ok.iter().map(|r| r.rmse_user)),
                mean_iterations: mean(ok.iter().map(|r| (r.iterations_phase1 + r.iterations_phase2) as f64)),
            });
        }
    }
    out
}

/// Every (point, seed, scheme) trial, in a fixed order independent of scheduling.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let points = cfg.points();
    let mut jobs = Vec::new();
    for pt in &points {
        for seed in cfg.seeds.start..cfg.seeds.end {
            for &s in &cfg.schemes {
                jobs.push((*pt, seed, s));
            }
        }
    }
    let first = cfg.seeds.start;
    let trials: Vec<TrialOutput> = jobs
        .par_iter()
        .map(|(pt, seed, s)| {
            let mut t = run_trial(cfg, *s, pt, *seed);
            if !(cfg.keep_traces && *seed == first) {
                t.traces = TrialTraces::default();
            }
            t
        })
        .collect();
    let summary = summarize(&trials, &points, &cfg.schemes);
    Ok(SweepResult { trials, summary })
}

/// CSV row; wall time is kept out so repeated runs are byte identical.
#[derive(Serialize)]
struct CsvRow<'a> {
    seed: u64,
    scheme: &'a str,
    p_t_dbm: f64,
    n_p: usize,
    overlap: usize,
    gamma_o: f64,
    failed: bool,
    nmse: f64,
    nmse_its: f64,
    nmse_cts: f64,
    nmse_itb: f64,
    nmse_ctb: f64,
    nmse_bnl: f64,
    nmse_inl: f64,
    nmse_bl: f64,
    nmse_il: f64,
    rmse: f64,
    rmse_targets: f64,
    rmse_scatterers: f64,
    rmse_user: f64,
    iterations_phase1: usize,
    iterations_phase2: usize,
    rcg_iterations: usize,
    crb_objective: f64,
    error: &'a str,
}

pub fn write_csv<W: Write>(w: W, trials: &[TrialOutput]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for t in trials {
        let r = &t.result;
        let b = r.nmse_blocks;
        wr.serialize(CsvRow {
            seed: r.seed,
            scheme: r.scheme.name(),
            p_t_dbm: r.p_t_dbm,
            n_p: r.n_p,
            overlap: r.overlap,
            gamma_o: r.gamma_o,
            failed: r.failed,
            nmse: r.nmse,
            nmse_its: b[0],
            nmse_cts: b[1],
            nmse_itb: b[2],
            nmse_ctb: b[3],
            nmse_bnl: b[4],
            nmse_inl: b[5],
            nmse_bl: b[6],
            nmse_il: b[7],
            rmse: r.rmse,
            rmse_targets: r.rmse_targets,
            rmse_scatterers: r.rmse_scatterers,
            rmse_user: r.rmse_user,
            iterations_phase1: r.iterations_phase1,
            iterations_phase2: r.iterations_phase2,
            rcg_iterations: r.rcg_iterations,
            crb_objective: r.crb_objective,
            error: &r.error,
        })?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    schema_version: u32,
    config_hash: String,
    profile: Profile,
    trials_per_point: usize,
    rmse_unmatched_penalty_m: f64,
    rmse_rule: &'static str,
    nmse_rule: &'static str,
    total_failures: usize,
    points: &'a [PointSummary],
}

pub fn write_outputs(cfg: &ExperimentConfig, res: &SweepResult, dir: &Path, emit_plots: bool, traces: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(fs::File::create(dir.join("trials.csv"))?, &res.trials)?;
    let grids = build_grids(&cfg.scene.soi_r, &cfg.scene.soi_ru, cfg.q, cfg.p)?;
    let summary = SummaryFile {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        profile: cfg.profile,
        trials_per_point: cfg.seeds.len(),
        rmse_unmatched_penalty_m: grids.r.diagonal(),
        rmse_rule: "optimal one-to-one assignment per class; unmatched truths cost the grid diagonal; surplus detections are ignored",
        nmse_rule: "nmse is the mean of the eight per-block NMSEs",
        total_failures: res.trials.iter().filter(|t| t.result.failed).count(),
        points: &res.summary,
    };
    let mut f = fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    let mut tf = fs::File::create(dir.join("timings.csv"))?;
    writeln!(tf, "seed,scheme,p_t_dbm,n_p,overlap,wall_seconds")?;
    for t in &res.trials {
        let r = &t.result;
        writeln!(tf, "{},{},{},{},{},{:.6}", r.seed, r.scheme, r.p_t_dbm, r.n_p, r.overlap, t.wall_seconds)?;
    }
    if traces {
        let mut jf = fs::File::create(dir.join("traces.jsonl"))?;
        for t in res.trials.iter().filter(|t| !t.traces.outer_phase1.is_empty() || !t.traces.outer_phase2.is_empty()) {
            let line = serde_json::json!({
                "seed": t.result.seed, "scheme": t.result.scheme, "p_t_dbm": t.result.p_t_dbm,
                "n_p": t.result.n_p, "overlap": t.result.overlap, "traces": t.traces,
            });
            writeln!(jf, "{line}")?;
        }
    }
    if emit_plots {
        write_plots(res, dir)?;
    }
    Ok(())
}

/// Per-figure plot data: one row per (x value, scheme).
pub fn write_plots(res: &SweepResult, dir: &Path) -> Result<()> {
    let mut by_axis: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for s in &res.summary {
        let p = &s.point;
        let row = |x: String, y: f64| format!("{x},{},{},{}", s.scheme, y, s.trials);
        by_axis.entry("fig6_nmse_vs_pt").or_default().push(row(format!("{},{},{}", p.p_t_dbm, p.n_p, p.overlap), s.mean_nmse));
        by_axis.entry("fig7_rmse_vs_pt").or_default().push(row(format!("{},{},{}", p.p_t_dbm, p.n_p, p.overlap), s.mean_rmse));
        by_axis.entry("fig8_nmse_vs_overlap").or_default().push(row(format!("{},{},{}", p.gamma_o, p.p_t_dbm, p.n_p), s.mean_nmse));
        by_axis.entry("fig9_rmse_vs_np").or_default().push(row(format!("{},{},{}", p.n_p, p.p_t_dbm, p.overlap), s.mean_rmse));
    }
    let headers = [
        ("fig6_nmse_vs_pt", "p_t_dbm,n_p,overlap,scheme,mean_nmse,trials"),
        ("fig7_rmse_vs_pt", "p_t_dbm,n_p,overlap,scheme,mean_rmse,trials"),
        ("fig8_nmse_vs_overlap", "gamma_o,p_t_dbm,n_p,scheme,mean_nmse,trials"),
        ("fig9_rmse_vs_np", "n_p,p_t_dbm,overlap,scheme,mean_rmse,trials"),
    ];
    for (name, header) in headers {
        let mut f = fs::File::create(dir.join(format!("{name}.csv")))?;
        writeln!(f, "{header}")?;
        for line in by_axis.get(name).into_iter().flatten() {
            writeln!(f, "{line}")?;
        }
    }
    let mut f4 = fs::File::create(dir.join("fig4_rcg_convergence.csv"))?;
    writeln!(f4, "seed,scheme,p_t_dbm,n_p,overlap,iter,objective")?;
    let mut f5 = fs::File::create(dir.join("fig5_convergence.csv"))?;
    writeln!(f5, "seed,scheme,p_t_dbm,n_p,overlap,phase,iter,q_value,dmu")?;
    for t in &res.trials {
        let r = &t.result;
        let key = format!("{},{},{},{},{}", r.seed, r.scheme, r.p_t_dbm, r.n_p, r.overlap);
        for tr in &t.traces.rcg {
            writeln!(f4, "{key},{},{}", tr.iter, tr.objective)?;
        }
        for (ph, tr) in [(1, &t.traces.outer_phase1), (2, &t.traces.outer_phase2)] {
            for o in tr {
                writeln!(f5, "{key},{ph},{},{},{}", o.n, o.q_value, o.dmu)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crb::mean_and_jacobian;
    use crate::measurement::noiseless_observation;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.arrays = Arrays { m: 8, n_p: 12, n_s: 8 };
        c.power_dbm = vec![5.0];
        c.seeds = SeedRange { start: 0, end: 2 };
        c.estimator.n_out = 4;
        c.estimator.estep.turbo_max = 3;
        c.estimator.estep.inner_max = 5;
        c.rcg.max_iter = 10;
        c.sbl_max_iter = 20;
        c
    }

    #[test]
    fn seed_range_parsing() {
        assert_eq!("3..7".parse::<SeedRange>().unwrap(), SeedRange { start: 3, end: 7 });
        assert_eq!("5".parse::<SeedRange>().unwrap().len(), 1);
        assert!("7..3".parse::<SeedRange>().is_err());
        assert!("x".parse::<Scheme>().is_err());
        assert_eq!("TP-SBL".parse::<Scheme>().unwrap(), Scheme::TpSbl);
    }

    #[test]
    fn toml_overrides_profile() {
        let c = ExperimentConfig::from_toml("power_dbm = [1.0]\n[arrays]\nn_p = 24\n").unwrap();
        assert_eq!(c.power_dbm, vec![1.0]);
        assert_eq!(c.arrays.n_p, 24);
        assert_eq!(c.arrays.m, 32);
        let p = ExperimentConfig::from_toml("profile = \"paper\"\n").unwrap();
        assert_eq!(p.arrays.m, 160);
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn pilot_budget_is_preserved() {
        let p = Pilots::default();
        assert_eq!(p.single_phase().total(), p.total());
        assert_eq!(p.single_phase().t1, 4);
    }

    #[test]
    fn crb_mean_matches_synthesized_observation() {
        let c = tiny();
        let pt = c.points()[0];
        let sc = Scenario::generate(&c, &pt, 3).unwrap();
        let sched = sc.schedule(2, 2, c.coverage).unwrap();
        let y = noiseless_observation(&sc.channels, &sched, sc.amplitude).stacked();
        let (m, _) = mean_and_jacobian(&sc.crb_context(), &sc.true_objects(), &sched).unwrap();
        assert!((&m - &y).norm() < 1e-9 * y.norm(), "{}", (&m - &y).norm() / y.norm());
    }

    #[test]
    fn sweep_counts_and_determinism() {
        let mut c = tiny();
        c.power_dbm = vec![0.0, 10.0];
        c.schemes = vec![Scheme::AsTvbi, Scheme::SpTvbi];
        let a = run_sweep(&c).unwrap();
        assert_eq!(a.trials.len(), 2 * 2 * 2);
        assert_eq!(a.summary.len(), 4);
        let b = run_sweep(&c).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_csv(&mut ca, &a.trials).unwrap();
        write_csv(&mut cb, &b.trials).unwrap();
        assert_eq!(ca, cb);
        assert!(a.trials.iter().all(|t| !t.result.failed), "{:?}", a.trials.iter().map(|t| &t.result.error).collect::<Vec<_>>());
    }

    #[test]
    fn averaging_identical_rows() {
        let c = tiny();
        let pt = c.points()[0];
        let (r, _) = run_two_phase(&c, Scheme::SpTvbi, &pt, 1).unwrap();
        let t: Vec<TrialOutput> = (0..10).map(|_| TrialOutput { result: r.clone(), traces: TrialTraces::default(), wall_seconds: 0.0 }).collect();
        let s = summarize(&t, &[pt], &[Scheme::SpTvbi]);
        assert_eq!(s[0].trials, 10);
        assert!((s[0].mean_nmse - r.nmse).abs() <= 1e-15 * r.nmse.abs());
        assert!((s[0].mean_rmse - r.rmse).abs() <= 1e-15 * r.rmse.abs().max(1.0));
    }
}

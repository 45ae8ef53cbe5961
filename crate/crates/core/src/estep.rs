//! E-step of the turbo VBI estimator.
//!
//! Module A runs mean-field coordinate updates for the channel blocks, their
//! precisions and the support indicators. Module B passes sum-product
//! messages over the support factor graph (coupling factors plus a loopy-BP
//! Ising field). The two exchange extrinsic support probabilities.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg::{chol_l_inverse, hpd_cholesky, inverse_from_l_inv, CMat, CVec, C64};
use crate::measurement::{Block, Group, MeasurementModel, Observation, SupportKind};
use crate::priors::{Dir, GammaHyper, MrfParams, SupportProbs};

/// Gram-domain view of one observation group: F^H F, F^H y and ‖y‖².
#[derive(Clone, Debug)]
pub struct GroupSystem {
    pub gram: CMat,
    pub fhy: CVec,
    pub yy: f64,
    pub rows: usize,
}

impl GroupSystem {
    pub fn new(f: &CMat, y: &CVec) -> Result<Self> {
        if f.nrows() != y.len() {
            return Err(Error::Assembly(format!("{} model rows vs {} observations", f.nrows(), y.len())));
        }
        Ok(GroupSystem { gram: f.adjoint() * f, fhy: f.adjoint() * y, yy: y.norm_squared(), rows: y.len() })
    }
}

/// The three independent group systems plus noise power.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub groups: Vec<GroupSystem>,
    pub q: usize,
    pub p: usize,
    pub sigma2: f64,
}

impl LinearSystem {
    pub fn new(model: &MeasurementModel, y: &Observation, sigma2: f64) -> Result<Self> {
        let groups = Group::ALL.iter().map(|&g| GroupSystem::new(model.group(g), &y.group(g))).collect::<Result<Vec<_>>>()?;
        Ok(LinearSystem { groups, q: model.q, p: model.p, sigma2 })
    }

    pub fn group(&self, g: Group) -> &GroupSystem {
        &self.groups[group_index(g)]
    }
}

fn group_index(g: Group) -> usize {
    match g {
        Group::SensorSensing => 0,
        Group::BsSensing => 1,
        Group::Comm => 2,
    }
}

/// Prior bundle consumed by the estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub hyper: GammaHyper,
    pub probs: SupportProbs,
    pub mrf: MrfParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorState {
    pub mu: Vec<CVec>,
    pub sigma: Vec<CMat>,
    /// ln det Σ_j.
    pub logdet: Vec<f64>,
    pub a_t: Vec<Vec<f64>>,
    pub b_t: Vec<Vec<f64>>,
    pub pi_t: Vec<f64>,
    pub pi_nl: Vec<f64>,
    pub pi_l: Vec<f64>,
}

impl PosteriorState {
    pub fn block_mu(&self, b: Block) -> &CVec {
        &self.mu[b.index()]
    }

    /// Means in the full sparse-vector layout.
    pub fn mu_full(&self) -> CVec {
        let q = self.pi_t.len();
        let p = self.pi_l.len();
        let mut x = CVec::zeros(6 * q + 2 * p);
        for b in Block::ALL {
            x.rows_mut(b.range(q, p).start, b.len(q, p)).copy_from(&self.mu[b.index()]);
        }
        x
    }

    pub fn support(&self, kind: SupportKind) -> &[f64] {
        match kind {
            SupportKind::Target => &self.pi_t,
            SupportKind::Scatterer => &self.pi_nl,
            SupportKind::User => &self.pi_l,
        }
    }

    /// ⟨ρ⟩ = ã/b̃ per grid.
    pub fn precision_mean(&self, b: Block) -> Vec<f64> {
        let j = b.index();
        self.a_t[j].iter().zip(&self.b_t[j]).map(|(a, b)| a / b).collect()
    }

    pub fn is_valid(&self) -> bool {
        let probs = self.pi_t.iter().chain(&self.pi_nl).chain(&self.pi_l).all(|p| (0.0..=1.0).contains(p));
        let gamma = self.a_t.iter().flatten().chain(self.b_t.iter().flatten()).all(|v| *v > 0.0 && v.is_finite());
        probs && gamma && self.mu.iter().all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }
}

/// Messages between Module B and Module A, in probability form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurboMessages {
    pub pi_b_t: Vec<f64>,
    pub pi_b_nl: Vec<f64>,
    pub gamma_t: Vec<f64>,
    pub gamma_nl: Vec<f64>,
    /// Fixed Bernoulli(p_L) prior of the user supports.
    pub g_l: f64,
    /// Incoming MRF log-odds per grid and direction ([`Dir::index`] order).
    pub lambda: Vec<[f64; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstepConfig {
    pub inner_max: usize,
    pub inner_tol: f64,
    pub turbo_max: usize,
    pub turbo_tol: f64,
    pub bp_sweeps: usize,
    pub bp_damping: f64,
}

impl Default for EstepConfig {
    fn default() -> Self {
        EstepConfig { inner_max: 30, inner_tol: 1e-6, turbo_max: 10, turbo_tol: 1e-4, bp_sweeps: 10, bp_damping: 0.0 }
    }
}

fn block_prior(kind: SupportKind, sys_q: usize, sys_p: usize) -> usize {
    match kind {
        SupportKind::User => sys_p,
        _ => sys_q,
    }
}

fn incoming(msgs: &TurboMessages, kind: SupportKind, q: usize) -> f64 {
    match kind {
        SupportKind::Target => msgs.gamma_t[q],
        SupportKind::Scatterer => msgs.gamma_nl[q],
        SupportKind::User => msgs.g_l,
    }
}

/// Mean-field Gaussian posterior of every block in group `g`, solved jointly
/// and then cut into per-block diagonal blocks.
fn joint_group_posterior(sys: &LinearSystem, g: Group, prec: &[Vec<f64>], st: &mut PosteriorState) -> Result<()> {
    let gs = sys.group(g);
    let mut a = gs.gram.unscale(sys.sigma2);
    let blocks = Block::in_group(g);
    for &b in blocks {
        let r = b.cols_in_group(sys.q, sys.p);
        for (i, c) in r.clone().zip(&prec[b.index()]) {
            a[(i, i)] += C64::new(*c, 0.0);
        }
    }
    let ch = hpd_cholesky(&a)?;
    let mu = ch.solve(&gs.fhy.unscale(sys.sigma2));
    let cov = ch.inverse();
    for &b in blocks {
        let r = b.cols_in_group(sys.q, sys.p);
        let n = r.len();
        let s = cov.view((r.start, r.start), (n, n)).into_owned();
        let sch = hpd_cholesky(&s)?;
        st.logdet[b.index()] = chol_logdet(&sch);
        st.mu[b.index()] = mu.rows(r.start, n).into_owned();
        st.sigma[b.index()] = s;
    }
    Ok(())
}

fn chol_logdet(ch: &nalgebra::Cholesky<C64, nalgebra::Dyn>) -> f64 {
    let l = ch.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum()
}

/// ψ(s) from the incoming messages, ψ(ρ) from mixture-weighted hyperparameters
/// and ψ(x) from a joint solve per observation group.
pub fn init_posteriors(sys: &LinearSystem, priors: &Priors, msgs: &TurboMessages) -> Result<PosteriorState> {
    let (q, p) = (sys.q, sys.p);
    let pi_t = msgs.gamma_t.clone();
    let pi_nl = msgs.gamma_nl.clone();
    let pi_l = vec![msgs.g_l; p];
    let mut a_t = Vec::with_capacity(8);
    let mut b_t = Vec::with_capacity(8);
    for b in Block::ALL {
        let h = priors.hyper.block(b);
        let n = block_prior(b.support(), q, p);
        let pis = match b.support() {
            SupportKind::Target => &pi_t,
            SupportKind::Scatterer => &pi_nl,
            SupportKind::User => &pi_l,
        };
        a_t.push((0..n).map(|i| pis[i] * h.a[i] + (1.0 - pis[i]) * h.a_bar[i]).collect::<Vec<_>>());
        b_t.push((0..n).map(|i| pis[i] * h.b[i] + (1.0 - pis[i]) * h.b_bar[i]).collect::<Vec<_>>());
    }
    let mut st = PosteriorState {
        mu: Block::ALL.iter().map(|b| CVec::zeros(b.len(q, p))).collect(),
        sigma: Block::ALL.iter().map(|b| CMat::zeros(b.len(q, p), b.len(q, p))).collect(),
        logdet: vec![0.0; 8],
        a_t,
        b_t,
        pi_t,
        pi_nl,
        pi_l,
    };
    let prec: Vec<Vec<f64>> = Block::ALL.iter().map(|&b| st.precision_mean(b)).collect();
    for g in Group::ALL {
        joint_group_posterior(sys, g, &prec, &mut st)?;
    }
    Ok(st)
}

/// Block-wise Gauss-Seidel pass: each block's Gaussian given the other blocks
/// of its group at their current means.
pub fn update_x(st: &mut PosteriorState, sys: &LinearSystem) -> Result<()> {
    let (q, p) = (sys.q, sys.p);
    for g in Group::ALL {
        let gs = sys.group(g);
        for &b in Block::in_group(g) {
            let r = b.cols_in_group(q, p);
            let n = r.len();
            let mut rhs = gs.fhy.rows(r.start, n).into_owned();
            for &o in Block::in_group(g) {
                if o == b {
                    continue;
                }
                let ro = o.cols_in_group(q, p);
                rhs -= gs.gram.view((r.start, ro.start), (n, ro.len())) * &st.mu[o.index()];
            }
            let mut a = gs.gram.view((r.start, r.start), (n, n)).unscale(sys.sigma2);
            let j = b.index();
            for i in 0..n {
                a[(i, i)] += C64::new(st.a_t[j][i] / st.b_t[j][i], 0.0);
            }
            let ch = hpd_cholesky(&a)?;
            let mu = ch.solve(&rhs.unscale(sys.sigma2));
            if mu.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::Numerical(format!("non-finite posterior mean in block {}", b.name())));
            }
            st.logdet[j] = -chol_logdet(&ch);
            st.sigma[j] = inverse_from_l_inv(&chol_l_inverse(&ch));
            st.mu[j] = mu;
        }
    }
    Ok(())
}

fn support_of<'a>(st: &'a PosteriorState, kind: SupportKind) -> &'a [f64] {
    st.support(kind)
}

pub fn update_rho(st: &mut PosteriorState, hyper: &GammaHyper) {
    for b in Block::ALL {
        let j = b.index();
        let h = hyper.block(b);
        let n = st.mu[j].len();
        for i in 0..n {
            let pi = support_of(st, b.support())[i];
            let second = st.mu[j][i].norm_sqr() + st.sigma[j][(i, i)].re;
            st.a_t[j][i] = pi * h.a[i] + (1.0 - pi) * h.a_bar[i] + 1.0;
            st.b_t[j][i] = pi * h.b[i] + (1.0 - pi) * h.b_bar[i] + second;
        }
    }
}

/// E_ψ[ln Gamma(ρ; a, b)] given ⟨ρ⟩ and ⟨ln ρ⟩.
fn expected_log_gamma(a: f64, b: f64, m: f64, lm: f64) -> f64 {
    a * b.ln() - ln_gamma(a) + (a - 1.0) * lm - b * m
}

fn logistic(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        (p / (1.0 - p)).ln()
    }
}

/// Log-likelihood ratio (active vs inactive) that the precisions of the
/// blocks tied to `kind` contribute at grid `i`.
fn support_llr(st: &PosteriorState, hyper: &GammaHyper, kind: SupportKind, i: usize) -> f64 {
    let mut llr = 0.0;
    for b in Block::ALL.into_iter().filter(|b| b.support() == kind) {
        let j = b.index();
        let h = hyper.block(b);
        let (a, bt) = (st.a_t[j][i], st.b_t[j][i]);
        let m = a / bt;
        let lm = digamma(a) - bt.ln();
        llr += expected_log_gamma(h.a[i], h.b[i], m, lm) - expected_log_gamma(h.a_bar[i], h.b_bar[i], m, lm);
    }
    llr
}

pub fn update_s(st: &mut PosteriorState, hyper: &GammaHyper, msgs: &TurboMessages) {
    for kind in [SupportKind::Target, SupportKind::Scatterer, SupportKind::User] {
        let n = st.support(kind).len();
        let new: Vec<f64> = (0..n)
            .map(|i| {
                let prior = incoming(msgs, kind, i);
                if prior <= 0.0 {
                    0.0
                } else if prior >= 1.0 {
                    1.0
                } else {
                    logistic(logit(prior) + support_llr(st, hyper, kind, i))
                }
            })
            .collect();
        match kind {
            SupportKind::Target => st.pi_t = new,
            SupportKind::Scatterer => st.pi_nl = new,
            SupportKind::User => st.pi_l = new,
        }
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Evidence lower bound of the mean-field posterior under prior messages
/// `msgs` (up to constants that no update changes).
pub fn elbo(st: &PosteriorState, sys: &LinearSystem, hyper: &GammaHyper, msgs: &TurboMessages) -> f64 {
    let (q, p) = (sys.q, sys.p);
    let pi = std::f64::consts::PI;
    let mut total = 0.0;
    for g in Group::ALL {
        let gs = sys.group(g);
        let n: usize = Block::in_group(g).iter().map(|b| b.len(q, p)).sum();
        let mut mu = CVec::zeros(n);
        let mut tr = 0.0;
        for &b in Block::in_group(g) {
            let r = b.cols_in_group(q, p);
            mu.rows_mut(r.start, r.len()).copy_from(&st.mu[b.index()]);
            let gjj = gs.gram.view((r.start, r.start), (r.len(), r.len()));
            tr += (gjj * &st.sigma[b.index()]).trace().re;
        }
        let quad = gs.yy - 2.0 * mu.dotc(&gs.fhy).re + mu.dotc(&(&gs.gram * &mu)).re + tr;
        total += -(gs.rows as f64) * (pi * sys.sigma2).ln() - quad / sys.sigma2;
    }
    for b in Block::ALL {
        let j = b.index();
        let h = hyper.block(b);
        let sup = st.support(b.support());
        let n = st.mu[j].len();
        for i in 0..n {
            let (a, bt) = (st.a_t[j][i], st.b_t[j][i]);
            let m = a / bt;
            let lm = digamma(a) - bt.ln();
            let second = st.mu[j][i].norm_sqr() + st.sigma[j][(i, i)].re;
            total += lm - pi.ln() - m * second;
            total += sup[i] * expected_log_gamma(h.a[i], h.b[i], m, lm) + (1.0 - sup[i]) * expected_log_gamma(h.a_bar[i], h.b_bar[i], m, lm);
            total += a - bt.ln() + ln_gamma(a) + (1.0 - a) * digamma(a);
        }
        total += n as f64 * (pi * std::f64::consts::E).ln() + st.logdet[j];
    }
    for kind in [SupportKind::Target, SupportKind::Scatterer, SupportKind::User] {
        for (i, &s) in st.support(kind).iter().enumerate() {
            let prior = incoming(msgs, kind, i);
            total += xlogy(s, prior) + xlogy(1.0 - s, 1.0 - prior);
            total -= xlogy(s, s) + xlogy(1.0 - s, 1.0 - s);
        }
    }
    total
}

fn mean_change(prev: &[CVec], cur: &[CVec]) -> f64 {
    let num: f64 = prev.iter().zip(cur).map(|(a, b)| (a - b).norm_squared()).sum();
    let den: f64 = cur.iter().map(|b| b.norm_squared()).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Module A inner loop; returns the iteration count.
pub fn module_a(st: &mut PosteriorState, sys: &LinearSystem, priors: &Priors, msgs: &TurboMessages, cfg: &EstepConfig) -> Result<usize> {
    for it in 0..cfg.inner_max {
        let prev = st.mu.clone();
        let prev_s: Vec<f64> = st.pi_t.iter().chain(&st.pi_nl).chain(&st.pi_l).copied().collect();
        update_x(st, sys)?;
        update_rho(st, &priors.hyper);
        update_s(st, &priors.hyper, msgs);
        let ds = prev_s.iter().zip(st.pi_t.iter().chain(&st.pi_nl).chain(&st.pi_l)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if it > 0 && mean_change(&prev, &st.mu) < cfg.inner_tol && ds < cfg.inner_tol {
            return Ok(it + 1);
        }
    }
    Ok(cfg.inner_max)
}

/// Extrinsic message π^B = π̃(1−γ) / [π̃(1−γ) + (1−π̃)γ].
pub fn extrinsic(post: f64, gamma: f64) -> f64 {
    let num = post * (1.0 - gamma);
    let den = num + (1.0 - post) * gamma;
    if den == 0.0 {
        0.5
    } else {
        num / den
    }
}

/// Beliefs and outbound messages of one Module B pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleBOutput {
    pub gamma_t: Vec<f64>,
    pub gamma_nl: Vec<f64>,
    pub belief_u: Vec<f64>,
    pub belief_t: Vec<f64>,
    pub belief_nl: Vec<f64>,
    pub lambda: Vec<[f64; 4]>,
}

const PROB_FLOOR: f64 = 1e-300;

/// Log-odds on s_U of the coupling factor p(s | s_U) given message π on s.
fn coupling_up(pi: f64, p: f64) -> f64 {
    let on = p * pi + (1.0 - p) * (1.0 - pi);
    let off = (1.0 - pi).max(PROB_FLOOR);
    (on.max(PROB_FLOOR) / off).ln()
}

/// Sum-product pass over the support factor graph with flooding loopy BP on
/// the Ising field. `lambda0` warm-starts the MRF messages.
pub fn module_b_pass(
    pi_b_t: &[f64],
    pi_b_nl: &[f64],
    mrf: &MrfParams,
    probs: &SupportProbs,
    sweeps: usize,
    damping: f64,
    lambda0: Option<&[[f64; 4]]>,
) -> ModuleBOutput {
    let q = mrf.len();
    let l_t: Vec<f64> = pi_b_t.iter().map(|&pi| coupling_up(pi, probs.p_t)).collect();
    let l_nl: Vec<f64> = pi_b_nl.iter().map(|&pi| coupling_up(pi, probs.p_nl)).collect();
    let bias = -2.0 * mrf.alpha;
    let tb = mrf.beta.tanh();
    let mut lam: Vec<[f64; 4]> = lambda0.map(|l| l.to_vec()).unwrap_or_else(|| vec![[0.0; 4]; q]);
    for _ in 0..sweeps {
        let mut next = vec![[0.0; 4]; q];
        for i in 0..q {
            let total = bias + l_t[i] + l_nl[i] + lam[i].iter().sum::<f64>();
            for d in Dir::ALL {
                if let Some(nb) = mrf.neighbor(i, d) {
                    let h = total - lam[i][d.index()];
                    let msg = 2.0 * (tb * (0.5 * h).tanh()).atanh();
                    next[nb][d.opposite().index()] = msg;
                }
            }
        }
        if damping > 0.0 {
            for i in 0..q {
                for d in 0..4 {
                    next[i][d] = (1.0 - damping) * next[i][d] + damping * lam[i][d];
                }
            }
        }
        lam = next;
    }
    let mut out = ModuleBOutput {
        gamma_t: vec![0.0; q],
        gamma_nl: vec![0.0; q],
        belief_u: vec![0.0; q],
        belief_t: vec![0.0; q],
        belief_nl: vec![0.0; q],
        lambda: lam.clone(),
    };
    for i in 0..q {
        let field = bias + lam[i].iter().sum::<f64>();
        out.belief_u[i] = logistic(field + l_t[i] + l_nl[i]);
        out.gamma_t[i] = probs.p_t * logistic(field + l_nl[i]);
        out.gamma_nl[i] = probs.p_nl * logistic(field + l_t[i]);
        let bt = |pi: f64, g: f64| {
            let on = pi * g;
            let den = on + (1.0 - pi) * (1.0 - g);
            if den == 0.0 {
                0.5
            } else {
                on / den
            }
        };
        out.belief_t[i] = bt(pi_b_t[i], out.gamma_t[i]);
        out.belief_nl[i] = bt(pi_b_nl[i], out.gamma_nl[i]);
    }
    out
}

/// Messages before any Module A evidence: Module B run on uninformative π^B.
pub fn initial_messages(priors: &Priors, cfg: &EstepConfig) -> TurboMessages {
    let q = priors.mrf.len();
    let half = vec![0.5; q];
    let out = module_b_pass(&half, &half, &priors.mrf, &priors.probs, cfg.bp_sweeps, cfg.bp_damping, None);
    TurboMessages {
        pi_b_t: half.clone(),
        pi_b_nl: half,
        gamma_t: out.gamma_t,
        gamma_nl: out.gamma_nl,
        g_l: priors.probs.p_l,
        lambda: out.lambda,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstepTrace {
    pub round: usize,
    pub inner_iterations: usize,
    pub elbo: f64,
    pub max_support_change: f64,
}

#[derive(Clone, Debug)]
pub struct EstepResult {
    pub state: PosteriorState,
    pub msgs: TurboMessages,
    pub rounds: usize,
    pub trace: Vec<EstepTrace>,
}

/// Turbo loop between Module A and Module B. `warm` carries a previous
/// posterior and its messages across EM iterations.
pub fn run_estep(sys: &LinearSystem, priors: &Priors, warm: Option<(PosteriorState, TurboMessages)>, cfg: &EstepConfig) -> Result<EstepResult> {
    let (mut st, mut msgs) = match warm {
        Some(w) => w,
        None => {
            let msgs = initial_messages(priors, cfg);
            (init_posteriors(sys, priors, &msgs)?, msgs)
        }
    };
    let mut trace = Vec::new();
    let mut rounds = 0;
    for round in 0..cfg.turbo_max {
        rounds = round + 1;
        let prev_t = st.pi_t.clone();
        let prev_nl = st.pi_nl.clone();
        let inner = module_a(&mut st, sys, priors, &msgs, cfg)?;
        let change = prev_t
            .iter()
            .zip(&st.pi_t)
            .chain(prev_nl.iter().zip(&st.pi_nl))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        trace.push(EstepTrace { round, inner_iterations: inner, elbo: elbo(&st, sys, &priors.hyper, &msgs), max_support_change: change });
        msgs.pi_b_t = st.pi_t.iter().zip(&msgs.gamma_t).map(|(&p, &g)| extrinsic(p, g)).collect();
        msgs.pi_b_nl = st.pi_nl.iter().zip(&msgs.gamma_nl).map(|(&p, &g)| extrinsic(p, g)).collect();
        let out = module_b_pass(&msgs.pi_b_t, &msgs.pi_b_nl, &priors.mrf, &priors.probs, cfg.bp_sweeps, cfg.bp_damping, Some(&msgs.lambda));
        msgs.gamma_t = out.gamma_t;
        msgs.gamma_nl = out.gamma_nl;
        msgs.lambda = out.lambda;
        if round > 0 && change < cfg.turbo_tol {
            break;
        }
    }
    if !st.is_valid() {
        return Err(Error::Numerical("posterior left its domain".into()));
    }
    Ok(EstepResult { state: st, msgs, rounds, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use crate::priors::{hyperparams_from_gains, ising_unnorm_logprob, PriorConfig};

    fn chain(rows: usize, cols: usize, alpha: f64, beta: f64) -> MrfParams {
        MrfParams { alpha, beta, rows, cols }
    }

    /// Exact marginals of (s_U, s_T, s_NL) by enumerating 5 admissible
    /// per-grid states: U off, or U on with (T, NL) in {10, 01, 11, 00}.
    fn enumerate(pi_t: &[f64], pi_nl: &[f64], mrf: &MrfParams, probs: &SupportProbs) -> (Vec<f64>, Vec<f64>) {
        let q = mrf.len();
        let mut z = 0.0;
        let mut mu = vec![0.0; q];
        let mut mt = vec![0.0; q];
        let states = 5usize.pow(q as u32);
        for code in 0..states {
            let mut c = code;
            let mut su = vec![-1i8; q];
            let mut w = 1.0;
            let mut st = vec![false; q];
            for i in 0..q {
                let k = c % 5;
                c /= 5;
                let (u, t, nl) = match k {
                    0 => (false, false, false),
                    1 => (true, true, false),
                    2 => (true, false, true),
                    3 => (true, true, true),
                    _ => (true, false, false),
                };
                su[i] = if u { 1 } else { -1 };
                st[i] = t;
                let (ft, fnl) = if u {
                    (if t { probs.p_t } else { 1.0 - probs.p_t }, if nl { probs.p_nl } else { 1.0 - probs.p_nl })
                } else {
                    (1.0, 1.0)
                };
                w *= ft * fnl * if t { pi_t[i] } else { 1.0 - pi_t[i] } * if nl { pi_nl[i] } else { 1.0 - pi_nl[i] };
            }
            w *= ising_unnorm_logprob(&su, mrf).exp();
            z += w;
            for i in 0..q {
                if su[i] == 1 {
                    mu[i] += w;
                }
                if st[i] {
                    mt[i] += w;
                }
            }
        }
        (mu.iter().map(|v| v / z).collect(), mt.iter().map(|v| v / z).collect())
    }

    #[test]
    fn extrinsic_examples() {
        assert!((extrinsic(0.7, 0.5) - 0.7).abs() < 1e-15);
        assert!((extrinsic(0.3, 0.3) - 0.5).abs() < 1e-15);
        assert!((extrinsic(0.9, 0.2) - 36.0 / 37.0).abs() < 1e-15);
        assert_eq!(extrinsic(1.0, 1.0), 0.5);
    }

    #[test]
    fn bp_exact_on_chains() {
        let probs = SupportProbs { p_t: 0.6, p_nl: 0.7, p_l: 0.1 };
        for (rows, cols) in [(1, 3), (1, 4), (3, 1)] {
            let mrf = chain(rows, cols, 0.3, 0.5);
            let q = mrf.len();
            let pt: Vec<f64> = (0..q).map(|i| 0.2 + 0.17 * i as f64).collect();
            let pn: Vec<f64> = (0..q).map(|i| 0.8 - 0.13 * i as f64).collect();
            let out = module_b_pass(&pt, &pn, &mrf, &probs, 10, 0.0, None);
            let (mu, mt) = enumerate(&pt, &pn, &mrf, &probs);
            for i in 0..q {
                assert!((out.belief_u[i] - mu[i]).abs() < 1e-10, "{rows}x{cols} U {i}");
                assert!((out.belief_t[i] - mt[i]).abs() < 1e-10, "{rows}x{cols} T {i}");
            }
        }
    }

    #[test]
    fn bp_close_on_loopy_square() {
        let probs = SupportProbs { p_t: 0.6, p_nl: 0.7, p_l: 0.1 };
        let mrf = chain(2, 2, 0.3, 0.5);
        let pt = [0.2, 0.9, 0.4, 0.6];
        let pn = [0.7, 0.1, 0.5, 0.3];
        let out = module_b_pass(&pt, &pn, &mrf, &probs, 10, 0.0, None);
        let (mu, _) = enumerate(&pt, &pn, &mrf, &probs);
        for i in 0..4 {
            assert!((out.belief_u[i] - mu[i]).abs() < 0.05);
        }
    }

    #[test]
    fn decoupled_field_matches_single_node() {
        let probs = SupportProbs { p_t: 0.5, p_nl: 0.8, p_l: 0.1 };
        let mrf = chain(2, 3, 0.4, 0.0);
        let pt = vec![0.3; 6];
        let pn = vec![0.6; 6];
        let out = module_b_pass(&pt, &pn, &mrf, &probs, 10, 0.0, None);
        // γ_T = p_T · P(s_U=1 | NL branch), hand-enumerated over s_U.
        let on = (-0.4f64).exp() * (0.8 * 0.6 + 0.2 * 0.4);
        let off = 0.4f64.exp() * 0.4;
        let expect = 0.5 * on / (on + off);
        for g in out.gamma_t {
            assert!((g - expect).abs() < 1e-12);
        }
        let sym = module_b_pass(&[0.5; 6], &[0.5; 6], &chain(2, 3, 0.0, 0.5), &probs, 10, 0.0, None);
        assert!(sym.gamma_t.iter().all(|g| (g - sym.gamma_t[0]).abs() < 1e-15));
    }

    fn toy_system(seed: u64) -> (LinearSystem, Priors) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let (q, p) = (4usize, 2usize);
        let rand_mat = |r: usize, cl: usize, rng: &mut rand_chacha::ChaCha20Rng| CMat::from_fn(r, cl, |_, _| crate::channel::draw_cn(rng));
        let model = MeasurementModel {
            f_sr: rand_mat(10, 2 * q, &mut rng),
            f_br: rand_mat(12, 2 * q, &mut rng),
            f_c: rand_mat(14, 2 * q + 2 * p, &mut rng),
            q,
            p,
            t_s: 1,
            t_c: 1,
            n_s: 7,
            m: 7,
        };
        let mut x = CVec::zeros(model.x_len());
        x[1] = c(1.0, -0.5);
        x[q + 1] = c(0.3, 0.2);
        x[4 * q + 2] = c(-0.7, 0.1);
        x[6 * q] = c(2.0, 0.0);
        let mut y = model.apply(&x);
        for v in [&mut y.y_sr, &mut y.y_br, &mut y.y_sc, &mut y.y_bc] {
            for z in v.iter_mut() {
                *z += crate::channel::draw_cn(&mut rng) * 0.1;
            }
        }
        let gains = vec![vec![1.0; q], vec![1.0; q], vec![1.0; q], vec![1.0; q], vec![1.0; q], vec![1.0; q], vec![1.0; p], vec![1.0; p]];
        let priors = Priors {
            hyper: hyperparams_from_gains(&gains, &PriorConfig::default()),
            probs: SupportProbs { p_t: 0.5, p_nl: 0.6, p_l: 0.5 },
            mrf: chain(2, 2, 0.3, 0.5),
        };
        (LinearSystem::new(&model, &y, 0.01).unwrap(), priors)
    }

    #[test]
    fn elbo_monotone_in_module_a() {
        for seed in 0..5 {
            let (sys, priors) = toy_system(seed);
            let cfg = EstepConfig::default();
            let msgs = initial_messages(&priors, &cfg);
            let mut st = init_posteriors(&sys, &priors, &msgs).unwrap();
            let mut last = elbo(&st, &sys, &priors.hyper, &msgs);
            for _ in 0..20 {
                update_x(&mut st, &sys).unwrap();
                let e1 = elbo(&st, &sys, &priors.hyper, &msgs);
                update_rho(&mut st, &priors.hyper);
                let e2 = elbo(&st, &sys, &priors.hyper, &msgs);
                update_s(&mut st, &priors.hyper, &msgs);
                let e3 = elbo(&st, &sys, &priors.hyper, &msgs);
                let slack = 1e-9 * last.abs().max(1.0);
                assert!(e1 >= last - slack && e2 >= e1 - slack && e3 >= e2 - slack, "{last} {e1} {e2} {e3}");
                last = e3;
            }
        }
    }

    #[test]
    fn zero_data_and_limits() {
        let (mut sys, priors) = toy_system(3);
        for g in sys.groups.iter_mut() {
            g.fhy.fill(C64::new(0.0, 0.0));
            g.yy = 0.0;
        }
        let msgs = initial_messages(&priors, &EstepConfig::default());
        let st = init_posteriors(&sys, &priors, &msgs).unwrap();
        assert!(st.mu.iter().all(|m| m.norm() == 0.0));
        let (sys, _) = toy_system(3);
        let mut wide = sys.clone();
        wide.sigma2 = 1e30;
        let st = init_posteriors(&wide, &priors, &msgs).unwrap();
        assert!(st.mu.iter().all(|m| m.norm() < 1e-12));
    }

    #[test]
    fn rho_update_examples() {
        let (sys, priors) = toy_system(1);
        let mut msgs = initial_messages(&priors, &EstepConfig::default());
        msgs.gamma_t = vec![1.0; 4];
        let mut st = init_posteriors(&sys, &priors, &msgs).unwrap();
        let h = priors.hyper.block(Block::Its);
        assert!((st.a_t[0][0] / st.b_t[0][0] - h.a[0] / h.b[0]).abs() < 1e-15);
        st.mu[0].fill(C64::new(0.0, 0.0));
        st.sigma[0].fill(C64::new(0.0, 0.0));
        update_rho(&mut st, &priors.hyper);
        assert_eq!((st.a_t[0][0], st.b_t[0][0]), (h.a[0] + 1.0, h.b[0]));
        st.pi_t = vec![0.0; 4];
        st.mu[0][1] = c(0.5, 0.0);
        update_rho(&mut st, &priors.hyper);
        assert_eq!((st.a_t[0][1], st.b_t[0][1]), (h.a_bar[1] + 1.0, h.b_bar[1] + 0.25));
    }

    #[test]
    fn s_update_examples() {
        let (sys, mut priors) = toy_system(2);
        let mut msgs = initial_messages(&priors, &EstepConfig::default());
        let mut st = init_posteriors(&sys, &priors, &msgs).unwrap();
        // Identical branches carry no evidence.
        for b in priors.hyper.blocks.iter_mut() {
            b.a_bar = b.a.clone();
            b.b_bar = b.b.clone();
        }
        update_s(&mut st, &priors.hyper, &msgs);
        for q in 0..4 {
            assert!((st.pi_t[q] - msgs.gamma_t[q]).abs() < 1e-12);
        }
        msgs.gamma_t = vec![0.0; 4];
        update_s(&mut st, &priors.hyper, &msgs);
        assert!(st.pi_t.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn strong_evidence_matches_scalar_log_ratio() {
        let (sys, priors) = toy_system(4);
        let msgs = initial_messages(&priors, &EstepConfig::default());
        let mut st = init_posteriors(&sys, &priors, &msgs).unwrap();
        // One NL grid with a large second moment.
        let j = Block::Bnl.index();
        st.a_t[j][2] = 2.0;
        st.b_t[j][2] = 1.0 + 9.0;
        let ji = Block::Inl.index();
        st.a_t[ji][2] = 2.0;
        st.b_t[ji][2] = 1.0 + 4.0;
        update_s(&mut st, &priors.hyper, &msgs);
        // Scalar script: Σ_j [a ln b − (a−ā)... ] written out for a = ā = 1.
        let h = priors.hyper.block(Block::Bnl);
        let term = |at: f64, bt: f64| {
            let m = at / bt;
            (h.b[2].ln() - h.b[2] * m) - (h.b_bar[2].ln() - h.b_bar[2] * m)
        };
        let llr = term(2.0, 10.0) + term(2.0, 5.0);
        let g = msgs.gamma_nl[2];
        let expect = 1.0 / (1.0 + (-(llr + (g / (1.0 - g)).ln())).exp());
        assert!((st.pi_nl[2] - expect).abs() < 1e-12);
        assert!(st.pi_nl[2] > 0.99);
    }

    #[test]
    fn covariances_stay_pd() {
        let (sys, priors) = toy_system(7);
        let cfg = EstepConfig { inner_max: 2000, turbo_max: 40, ..EstepConfig::default() };
        let res = run_estep(&sys, &priors, None, &cfg).unwrap();
        for s in &res.state.sigma {
            let h = s.adjoint();
            assert!((s - h).norm() < 1e-10 * s.norm().max(1e-300));
            let eig = nalgebra::SymmetricEigen::new(s.clone()).eigenvalues;
            assert!(eig.iter().all(|&e| e > 0.0));
        }
        assert!(res.state.is_valid());
        // Fixed point: another run from the converged state barely moves μ.
        let again = run_estep(&sys, &priors, Some((res.state.clone(), res.msgs.clone())), &cfg).unwrap();
        assert!(mean_change(&res.state.mu, &again.state.mu) < 1e-4);
    }
}

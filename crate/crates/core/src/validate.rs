//! Standalone oracle checks behind `jsce validate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crb::{approx_fim_coeffs, fim_full, mean_and_jacobian};
use crate::error::Result;
use crate::estep::{initial_messages, init_posteriors, module_b_pass, run_estep, update_x, EstepConfig, LinearSystem};
use crate::harness::{ExperimentConfig, Scenario, SweepPoint};
use crate::linalg::{c, CMat, CVec};
use crate::measurement::{synthesize_observation, Block, Group, Phase};
use crate::mstep::{gradients, surrogate_q};
use crate::priors::{ising_unnorm_logprob, MrfParams, SupportProbs};
use crate::scene::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Fim,
    Bp,
    Posterior,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub passed: bool,
}

impl Report {
    fn check(&mut self, name: String, value: f64, tol: f64) {
        let ok = value < tol;
        self.lines.push(format!("{} {name}: {value:.3e} (tol {tol:.0e})", if ok { "PASS" } else { "FAIL" }));
        self.passed &= ok;
    }
}

fn desk_point(cfg: &ExperimentConfig) -> SweepPoint {
    cfg.points()[0]
}

pub fn run_suite(suite: Suite, seeds: u64) -> Result<Report> {
    let mut rep = Report { lines: Vec::new(), passed: true };
    let mut cfg = ExperimentConfig::desk();
    cfg.power_dbm = vec![10.0];
    let pt = desk_point(&cfg);
    match suite {
        Suite::Gradients => {
            for seed in 0..seeds {
                rep.check(format!("seed {seed} surrogate gradient vs central differences"), gradient_error(&cfg, &pt, seed)?, 1e-5);
            }
        }
        Suite::Fim => {
            for seed in 0..seeds {
                let (fd, co) = fim_errors(&cfg, &pt, seed)?;
                rep.check(format!("seed {seed} FIM vs finite-difference FIM"), fd, 1e-4);
                rep.check(format!("seed {seed} coefficient diagonal vs direct"), co, 1e-8);
            }
        }
        Suite::Bp => {
            let probs = SupportProbs { p_t: 0.4, p_nl: 0.7, p_l: 0.1 };
            for (rows, cols, tol) in [(1, 3, 1e-10), (1, 4, 1e-10), (3, 1, 1e-10), (2, 2, 0.05)] {
                for seed in 0..seeds {
                    rep.check(format!("{rows}x{cols} lattice seed {seed} BP vs enumeration"), bp_error(rows, cols, &probs, seed), tol);
                }
            }
        }
        Suite::Posterior => {
            for seed in 0..seeds {
                rep.check(format!("seed {seed} Module-A mean vs dense posterior"), posterior_error(&cfg, &pt, seed)?, 1e-8);
            }
        }
    }
    Ok(rep)
}

/// Relative error of the analytic total gradient against central differences
/// of the surrogate at random offsets.
pub fn gradient_error(cfg: &ExperimentConfig, pt: &SweepPoint, seed: u64) -> Result<f64> {
    let sc = Scenario::generate(cfg, pt, seed)?;
    let sched = sc.schedule(cfg.pilots.t1, cfg.pilots.t2, cfg.coverage)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37);
    let y = synthesize_observation(&sc.channels, &sched, sc.amplitude, cfg.scene.noise_power, &mut rng);
    let ctx = sc.context(sched);
    let mut off = sc.true_offsets.clone();
    let (hr, hz) = (sc.grids.r.spacing / 2.0, sc.grids.z.spacing / 2.0);
    for d in &mut off.dr {
        *d = Point::new(rng.random_range(-hr..hr) * 0.5, rng.random_range(-hr..hr) * 0.5);
    }
    for d in &mut off.dz {
        *d = Point::new(rng.random_range(-hz..hz) * 0.5, rng.random_range(-hz..hz) * 0.5);
    }
    let priors = sc.priors(cfg)?;
    let sys = LinearSystem::new(&ctx.model(&off)?, &y, cfg.scene.noise_power)?;
    let est = EstepConfig { turbo_max: 2, inner_max: 3, ..EstepConfig::default() };
    let st = run_estep(&sys, &priors, None, &est)?.state;
    let cands: Vec<usize> = (0..sc.grids.q()).collect();
    let g = gradients(&ctx, &off, &st, &y, cfg.scene.noise_power, &cands, true)?;
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    let mut probe = |an: f64, set: &dyn Fn(&mut crate::scene::OffsetState, f64)| -> Result<()> {
        let mut a = off.clone();
        set(&mut a, h);
        let mut b = off.clone();
        set(&mut b, -h);
        let fd = (surrogate_q(&ctx, &a, &st, &y, cfg.scene.noise_power)? - surrogate_q(&ctx, &b, &st, &y, cfg.scene.noise_power)?) / (2.0 * h);
        num += (an - fd).powi(2);
        den += fd * fd;
        Ok(())
    };
    for &q in sc.map.targets.iter().chain(&sc.map.scatterers).chain([0, sc.grids.q() - 1].iter()) {
        let t = g.total_r(q);
        probe(t[0], &|o, d| o.dr[q].x += d)?;
        probe(t[1], &|o, d| o.dr[q].y += d)?;
    }
    let u = sc.map.user;
    let t = g.total_z(u);
    probe(t[0], &|o, d| o.dz[u].x += d)?;
    probe(t[1], &|o, d| o.dz[u].y += d)?;
    Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
}

/// (FIM vs finite-difference FIM, coefficient diagonal vs direct) on the true objects.
pub fn fim_errors(cfg: &ExperimentConfig, pt: &SweepPoint, seed: u64) -> Result<(f64, f64)> {
    let sc = Scenario::generate(cfg, pt, seed)?;
    let ctx = sc.crb_context();
    let objs = sc.true_objects();
    let s1 = sc.schedule(cfg.pilots.t1, cfg.pilots.t2, cfg.coverage)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_p = sc.arrays.n_p;
    let (t3, t4) = (cfg.pilots.t3, cfg.pilots.t4);
    let phi = CVec::from_fn(n_p * (t3 + t4), |_, _| num_complex::Complex64::from_polar(1.0, rng.random::<f64>() * std::f64::consts::TAU));
    let s2 = crate::measurement::ReflectionSchedule::from_vector(&phi, n_p, t3, t4, Phase::II);
    let j = fim_full(&ctx, &objs, &[&s1, &s2])?;
    let h = 1e-5;
    let n = 2 * objs.len();
    let mut oracle = CMat::zeros(n, n);
    for s in [&s1, &s2] {
        let rows = mean_and_jacobian(&ctx, &objs, s)?.0.len();
        let mut fd = CMat::zeros(rows, n);
        for k in 0..n {
            let shift = |d: f64| -> Result<CVec> {
                let mut o = objs.clone();
                if k % 2 == 0 {
                    o[k / 2].pos.x += d;
                } else {
                    o[k / 2].pos.y += d;
                }
                Ok(mean_and_jacobian(&ctx, &o, s)?.0)
            };
            fd.set_column(k, &((shift(h)? - shift(-h)?) / c(2.0 * h, 0.0)));
        }
        oracle += fd.adjoint() * &fd;
    }
    let oracle = oracle.map(|z| z.re) * (2.0 / ctx.sigma2);
    let fd_err = (&j - &oracle).norm() / oracle.norm();
    let co = approx_fim_coeffs(&ctx, &objs, &s1, t3, t4)?;
    let d = co.diag(&phi);
    let co_err = d.iter().enumerate().map(|(i, v)| (v - j[(i, i)]).abs() / j[(i, i)].abs()).fold(0.0, f64::max);
    Ok((fd_err, co_err))
}

/// Max absolute error of Module B beliefs against exhaustive enumeration.
pub fn bp_error(rows: usize, cols: usize, probs: &SupportProbs, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let q = rows * cols;
    let mrf = MrfParams { alpha: rng.random_range(-0.5..0.5), beta: rng.random_range(0.1..0.8), rows, cols };
    let pi_t: Vec<f64> = (0..q).map(|_| rng.random_range(0.05..0.95)).collect();
    let pi_nl: Vec<f64> = (0..q).map(|_| rng.random_range(0.05..0.95)).collect();
    let out = module_b_pass(&pi_t, &pi_nl, &mrf, probs, 50, 0.0, None);
    let (mut z, mut mu, mut mt) = (0.0, vec![0.0; q], vec![0.0; q]);
    // Per grid: s_U off, or s_U on with each (s_T, s_NL) pair.
    for code in 0..5usize.pow(q as u32) {
        let (mut c, mut w) = (code, 1.0);
        let mut su = vec![-1i8; q];
        let mut st = vec![false; q];
        for i in 0..q {
            let k = c % 5;
            c /= 5;
            let (u, t, nl) = [(false, false, false), (true, false, false), (true, true, false), (true, false, true), (true, true, true)][k];
            su[i] = if u { 1 } else { -1 };
            st[i] = t;
            if u {
                w *= if t { probs.p_t } else { 1.0 - probs.p_t } * if nl { probs.p_nl } else { 1.0 - probs.p_nl };
            }
            w *= if t { pi_t[i] } else { 1.0 - pi_t[i] } * if nl { pi_nl[i] } else { 1.0 - pi_nl[i] };
        }
        w *= ising_unnorm_logprob(&su, &mrf).exp();
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
    (0..q).map(|i| (out.belief_u[i] - mu[i] / z).abs().max((out.belief_t[i] - mt[i] / z).abs())).fold(0.0, f64::max)
}

/// With supports fixed at the truth and precisions held, the block
/// Gauss-Seidel mean against the dense joint Gaussian posterior.
pub fn posterior_error(cfg: &ExperimentConfig, pt: &SweepPoint, seed: u64) -> Result<f64> {
    let sc = Scenario::generate(cfg, pt, seed)?;
    let sched = sc.schedule(cfg.pilots.t1, cfg.pilots.t2, cfg.coverage)?;
    let y = synthesize_observation(&sc.channels, &sched, sc.amplitude, cfg.scene.noise_power, &mut ChaCha20Rng::seed_from_u64(seed));
    let ctx = sc.context(sched);
    let model = ctx.model(&sc.true_offsets)?;
    let sigma2 = cfg.scene.noise_power;
    let sys = LinearSystem::new(&model, &y, sigma2)?;
    let priors = sc.priors(cfg)?;
    let (q, p) = (sc.grids.q(), sc.grids.p());
    let mut msgs = initial_messages(&priors, &EstepConfig::default());
    let on = |v: &[usize], n: usize| -> Vec<f64> { (0..n).map(|i| if v.contains(&i) { 1.0 } else { 0.0 }).collect() };
    msgs.gamma_t = on(&sc.map.targets, q);
    msgs.gamma_nl = on(&sc.map.scatterers, q);
    let mut st = init_posteriors(&sys, &priors, &msgs)?;
    st.pi_l = on(&[sc.map.user], p);
    for b in [Block::Bl, Block::Il] {
        let h = priors.hyper.block(b);
        let j = b.index();
        for i in 0..p {
            let pi = st.pi_l[i];
            st.a_t[j][i] = pi * h.a[i] + (1.0 - pi) * h.a_bar[i];
            st.b_t[j][i] = pi * h.b[i] + (1.0 - pi) * h.b_bar[i];
        }
    }
    for _ in 0..500 {
        update_x(&mut st, &sys)?;
    }
    let mut worst: f64 = 0.0;
    for g in Group::ALL {
        let f = model.group(g);
        let mut a = f.adjoint() * f / c(sigma2, 0.0);
        let mut idx = Vec::new();
        for &b in Block::in_group(g) {
            let r = b.cols_in_group(q, p);
            let prec = st.precision_mean(b);
            for (k, i) in r.clone().enumerate() {
                a[(i, i)] += c(prec[k], 0.0);
                idx.push((b, k, i));
            }
        }
        let mu = a.lu().solve(&(f.adjoint() * y.group(g) / c(sigma2, 0.0))).ok_or_else(|| crate::Error::Numerical("dense posterior solve".into()))?;
        let mine = CVec::from_iterator(mu.len(), idx.iter().map(|&(b, k, _)| st.mu[b.index()][k]));
        worst = worst.max((&mine - &mu).norm() / mu.norm().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

//! Conjugate-gradient descent over unit-modulus reflection vectors for the
//! diagonal-approximate CRB objective.

use serde::{Deserialize, Serialize};

use crate::crb::FimCoeffs;
use crate::error::{Error, Result};
use crate::linalg::{CVec, C64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RcgConfig {
    pub max_iter: usize,
    /// Relative objective decrease that ends the run.
    pub eps: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub init_step: f64,
    pub max_backtracks: usize,
    pub restart_every: usize,
}

impl Default for RcgConfig {
    fn default() -> Self {
        RcgConfig { max_iter: 200, eps: 1e-6, armijo_c: 1e-4, shrink: 0.5, init_step: 1.0, max_backtracks: 50, restart_every: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcgTrace {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub max_modulus_err: f64,
}

#[derive(Clone, Debug)]
pub struct RcgResult {
    pub phi: CVec,
    pub objective: f64,
    pub iterations: usize,
    pub stalled: bool,
    pub trace: Vec<RcgTrace>,
}

/// Σ_n 1/J_nn(φ).
pub fn objective(phi: &CVec, co: &FimCoeffs) -> Result<f64> {
    let mut s = 0.0;
    for (n, j) in co.diag(phi).into_iter().enumerate() {
        if !(j > 0.0) {
            return Err(Error::Infeasible(format!("J_{n}{n} = {j} is not positive")));
        }
        s += 1.0 / j;
    }
    Ok(s)
}

/// Real-coordinate gradient of the objective, packed as ∂/∂Re + j ∂/∂Im.
pub fn euclidean_grad(phi: &CVec, co: &FimCoeffs) -> CVec {
    let d = co.diag(phi);
    let mut g = CVec::zeros(co.dim());
    for (n, j) in d.iter().enumerate() {
        g -= co.grad_param(n, phi) * C64::new(1.0 / (j * j), 0.0);
    }
    g
}

/// Projection onto the tangent space of the circle product at φ.
pub fn riemannian_grad(phi: &CVec, g: &CVec) -> CVec {
    CVec::from_fn(phi.len(), |i, _| g[i] - phi[i] * (g[i] * phi[i].conj()).re)
}

pub fn retract(phi: &CVec) -> CVec {
    phi.map(|z| {
        let r = z.norm();
        if r > 0.0 {
            z / r
        } else {
            C64::new(1.0, 0.0)
        }
    })
}

fn modulus_err(phi: &CVec) -> f64 {
    phi.iter().map(|z| (z.norm() - 1.0).abs()).fold(0.0, f64::max)
}

fn re_inner(a: &CVec, b: &CVec) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Fletcher–Reeves RCG with Armijo backtracking. The trial step is
/// `init_step / max|d_i|`, so the first trial rotates no element by more
/// than about `init_step` radians whatever the scale of the objective.
pub fn optimize(co: &FimCoeffs, phi0: &CVec, cfg: &RcgConfig) -> Result<RcgResult> {
    let mut phi = retract(phi0);
    let mut f = objective(&phi, co)?;
    let mut g = riemannian_grad(&phi, &euclidean_grad(&phi, co));
    let mut d = -g.clone();
    let mut trace = vec![RcgTrace { iter: 0, objective: f, grad_norm: g.norm(), step: 0.0, max_modulus_err: modulus_err(&phi) }];
    let mut stalled = false;
    let mut iters = 0;
    for k in 1..=cfg.max_iter {
        iters = k;
        let mut slope = re_inner(&g, &d);
        if slope >= 0.0 {
            d = -g.clone();
            slope = -g.norm_squared();
        }
        if slope == 0.0 {
            break;
        }
        let dmax = d.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let mut t = cfg.init_step / dmax;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let cand = retract(&(&phi + &d * C64::new(t, 0.0)));
            if let Ok(fc) = objective(&cand, co) {
                if fc <= f + cfg.armijo_c * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= cfg.shrink;
        }
        let Some((next, fn_)) = accepted else {
            stalled = true;
            break;
        };
        let g_new = riemannian_grad(&next, &euclidean_grad(&next, co));
        let rho = g_new.norm_squared() / g.norm_squared().max(f64::MIN_POSITIVE);
        let transported = riemannian_grad(&next, &d);
        d = if k % cfg.restart_every == 0 { -g_new.clone() } else { -g_new.clone() + transported * C64::new(rho, 0.0) };
        let decrease = (f - fn_) / f.abs().max(f64::MIN_POSITIVE);
        phi = next;
        f = fn_;
        g = g_new;
        trace.push(RcgTrace { iter: k, objective: f, grad_norm: g.norm(), step: t, max_modulus_err: modulus_err(&phi) });
        if decrease < cfg.eps {
            break;
        }
    }
    Ok(RcgResult { phi, objective: f, iterations: iters, stalled, trace })
}

/// Exhaustive search over `levels` phases per element, for instances whose
/// sensing and channel-estimation partitions decouple (no overlap objects).
pub fn exhaustive_quantized(co: &FimCoeffs, levels: usize) -> Result<(CVec, f64)> {
    let n_r = co.n_p * co.t3;
    let n = co.dim();
    let alphabet: Vec<C64> = (0..levels).map(|l| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * l as f64 / levels as f64)).collect();
    let mut best = CVec::from_element(n, C64::new(1.0, 0.0));
    for (lo, hi) in [(0, n_r), (n_r, n)] {
        let len = hi - lo;
        if len == 0 {
            continue;
        }
        let total = levels.checked_pow(len as u32).ok_or_else(|| Error::Config("exhaustive search too large".into()))?;
        let mut best_f = f64::INFINITY;
        let mut best_part = vec![0usize; len];
        let mut idx = vec![0usize; len];
        let mut phi = best.clone();
        for _ in 0..total {
            for (i, &l) in idx.iter().enumerate() {
                phi[lo + i] = alphabet[l];
            }
            if let Ok(f) = objective(&phi, co) {
                if f < best_f {
                    best_f = f;
                    best_part.copy_from_slice(&idx);
                }
            }
            for v in idx.iter_mut() {
                *v += 1;
                if *v < levels {
                    break;
                }
                *v = 0;
            }
        }
        for (i, &l) in best_part.iter().enumerate() {
            best[lo + i] = alphabet[l];
        }
    }
    let f = objective(&best, co)?;
    Ok((best, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crb::ParamCoeffs;
    use crate::linalg::{c, CMat};
    use rand::{Rng, SeedableRng};

    fn random_coeffs(seed: u64, n_p: usize, t3: usize, t4: usize, classes: &[(bool, bool)]) -> FimCoeffs {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut cn = || c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let mut params = Vec::new();
        for &(r, cc) in classes {
            let mut mk = |on: bool| {
                if !on {
                    return (None, None);
                }
                let u = CMat::from_fn(3, n_p, |_, _| cn());
                let v = CVec::from_fn(3, |_, _| cn());
                (Some(u.transpose() * u.map(|z| z.conj())), Some(u.transpose() * v.map(|z| z.conj())))
            };
            let (a_r, b_r) = mk(r);
            let (a_c, b_c) = mk(cc);
            params.push(ParamCoeffs { a_r, b_r, a_c, b_c, c: 4.0 });
        }
        FimCoeffs { params, n_p, t3, t4, sigma2: 1.0 }
    }

    fn random_phi(seed: u64, n: usize) -> CVec {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        CVec::from_fn(n, |_, _| C64::from_polar(1.0, rng.random::<f64>() * 6.283))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let co = random_coeffs(3, 4, 2, 1, &[(true, false), (true, true), (false, true)]);
        let phi = random_phi(4, co.dim());
        let g = euclidean_grad(&phi, &co);
        let h = 1e-6;
        let mut fd = CVec::zeros(co.dim());
        for k in 0..co.dim() {
            for (dir, w) in [(c(1.0, 0.0), c(1.0, 0.0)), (c(0.0, 1.0), c(0.0, 1.0))] {
                let mut p = phi.clone();
                p[k] += dir * h;
                let mut m = phi.clone();
                m[k] -= dir * h;
                let d = (objective(&p, &co).unwrap() - objective(&m, &co).unwrap()) / (2.0 * h);
                fd[k] += w * d;
            }
        }
        let rel = (&g - &fd).norm() / fd.norm();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn sensing_only_gradient_has_empty_comm_partition() {
        let co = random_coeffs(5, 4, 1, 2, &[(true, false)]);
        let g = euclidean_grad(&random_phi(6, co.dim()), &co);
        assert!(g.rows(4, 8).norm() == 0.0);
        assert!(g.rows(0, 4).norm() > 0.0);
    }

    #[test]
    fn objective_scaling_and_constant_case() {
        let mut co = random_coeffs(7, 3, 1, 1, &[(true, true)]);
        let phi = random_phi(8, co.dim());
        let f = objective(&phi, &co).unwrap();
        for p in &mut co.params {
            p.a_r = p.a_r.take().map(|a| a * c(2.0, 0.0));
            p.b_r = p.b_r.take().map(|a| a * c(2.0, 0.0));
            p.a_c = p.a_c.take().map(|a| a * c(2.0, 0.0));
            p.b_c = p.b_c.take().map(|a| a * c(2.0, 0.0));
            p.c *= 2.0;
        }
        assert!((objective(&phi, &co).unwrap() - f / 2.0).abs() < 1e-12 * f);
        let flat = FimCoeffs { params: vec![ParamCoeffs { a_r: None, b_r: None, a_c: None, b_c: None, c: 2.0 }], n_p: 3, t3: 1, t4: 1, sigma2: 1.0 };
        assert_eq!(objective(&phi, &flat).unwrap(), 0.5);
        assert_eq!(euclidean_grad(&phi, &flat).norm(), 0.0);
        let neg = FimCoeffs { params: vec![ParamCoeffs { a_r: None, b_r: None, a_c: None, b_c: None, c: -1.0 }], ..flat };
        assert!(matches!(objective(&phi, &neg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn tangent_projection() {
        let phi = random_phi(9, 10);
        let par = phi.map(|z| z * 1.7);
        assert!(riemannian_grad(&phi, &par).norm() < 1e-14);
        let tan = phi.map(|z| z * c(0.0, 1.0));
        assert!((riemannian_grad(&phi, &tan) - &tan).norm() < 1e-14);
        let g = random_phi(10, 10).map(|z| z * 3.0);
        let out = riemannian_grad(&phi, &g);
        let res = out.iter().zip(phi.iter()).map(|(o, p)| (o * p.conj()).re.abs()).fold(0.0, f64::max);
        assert!(res < 1e-14);
    }

    #[test]
    fn monotone_and_unit_modulus() {
        let co = random_coeffs(11, 6, 2, 2, &[(true, false), (true, true), (false, true), (false, true)]);
        let res = optimize(&co, &random_phi(12, co.dim()), &RcgConfig::default()).unwrap();
        for w in res.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
        assert!(res.trace.iter().all(|t| t.max_modulus_err < 1e-12));
        assert!(res.trace.last().unwrap().objective < res.trace[0].objective);
    }

    #[test]
    fn tiny_instance_near_exhaustive_optimum() {
        let co = random_coeffs(13, 4, 1, 1, &[(true, false), (true, false), (false, true), (false, true)]);
        let (_, best) = exhaustive_quantized(&co, 16).unwrap();
        let cfg = RcgConfig { eps: 1e-10, ..RcgConfig::default() };
        let res = optimize(&co, &CVec::from_element(co.dim(), c(1.0, 0.0)), &cfg).unwrap();
        assert!(res.objective <= best * 1.02, "rcg {} vs grid {}", res.objective, best);
    }
}

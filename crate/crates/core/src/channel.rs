//! Physical channel synthesis.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec, C64};
use crate::scene::{GroundTruth, Point, SceneConfig};

/// Element counts of the three λ/2 ULAs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrays {
    /// BS antennas.
    pub m: usize,
    /// IRS reflecting elements.
    pub n_p: usize,
    /// IRS sensors.
    pub n_s: usize,
}

impl Default for Arrays {
    fn default() -> Self {
        Arrays { m: 32, n_p: 48, n_s: 32 }
    }
}

/// Element i is exp(−jπ i cos θ).
pub fn steering(n: usize, theta: f64) -> CVec {
    let u = theta.cos();
    CVec::from_fn(n, |i, _| C64::from_polar(1.0, -PI * i as f64 * u))
}

/// ∂/∂θ of [`steering`].
pub fn steering_deriv(n: usize, theta: f64) -> CVec {
    let (s, u) = theta.sin_cos();
    CVec::from_fn(n, |i, _| {
        let k = PI * i as f64;
        C64::from_polar(1.0, -k * u) * c(0.0, k * s)
    })
}

pub fn irs_element_positions(scene: &SceneConfig, n_p: usize) -> Vec<Point> {
    let d = scene.wavelength / 2.0;
    let dir = Point::new(scene.theta_i.cos(), scene.theta_i.sin());
    (0..n_p).map(|n| scene.p_i + dir * (n as f64 * d)).collect()
}

pub fn near_field_hci(p_c: Point, elements: &[Point], wavelength: f64) -> Result<CVec> {
    let mut h = CVec::zeros(elements.len());
    for (n, &pe) in elements.iter().enumerate() {
        let d = p_c.dist(pe);
        if d == 0.0 {
            return Err(Error::Domain(format!("controller coincides with element {n}")));
        }
        h[n] = C64::from_polar(wavelength / (4.0 * PI * d), -2.0 * PI * d / wavelength);
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensingLink {
    IrsTargetSensor,
    CtrlTargetSensor,
    CtrlTargetBs,
    IrsTargetBs,
}

/// Radar-equation amplitude of one sensing link.
pub fn path_loss(link: SensingLink, scene: &SceneConfig, target: Point, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Domain("RCS must be positive".into()));
    }
    let d_i = scene.p_i.dist(target);
    let d_c = scene.p_c.dist(target);
    let d_b = scene.p_b.dist(target);
    let (d1, d2) = match link {
        SensingLink::IrsTargetSensor => (d_i, d_i),
        SensingLink::CtrlTargetSensor => (d_c, d_i),
        SensingLink::CtrlTargetBs => (d_c, d_b),
        SensingLink::IrsTargetBs => (d_i, d_b),
    };
    if d1 == 0.0 || d2 == 0.0 {
        return Err(Error::Domain("target coincides with an anchor".into()));
    }
    let lam = scene.wavelength;
    Ok((lam * lam * kappa / (64.0 * PI.powi(3) * d1 * d1 * d2 * d2)).sqrt())
}

/// Distance-power-law loss for the communication links.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommLoss {
    pub exponent_los: f64,
    pub exponent_nlos: f64,
    /// Loss at 1 m in dB (free space at 28 GHz by default).
    pub reference_loss_db: f64,
}

impl Default for CommLoss {
    fn default() -> Self {
        CommLoss { exponent_los: 2.2, exponent_nlos: 2.8, reference_loss_db: 61.4 }
    }
}

impl CommLoss {
    pub fn amplitude(&self, d: f64, los: bool) -> f64 {
        let n = if los { self.exponent_los } else { self.exponent_nlos };
        let db = self.reference_loss_db + 10.0 * n * d.max(1e-3).log10();
        10f64.powf(-db / 20.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetChannel {
    pub alpha_its: C64,
    pub alpha_cts: C64,
    pub alpha_itb: C64,
    pub alpha_ctb: C64,
    pub theta_i: f64,
    pub theta_b: f64,
    pub h_its: CMat,
    pub h_cts: CVec,
    pub h_itb: CMat,
    pub h_ctb: CVec,
}

/// One SV path toward the IRS and the BS; index 0 is the user LoS path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommPath {
    pub alpha_iu: C64,
    pub alpha_bu: C64,
    pub theta_i: f64,
    pub theta_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub h_ci: CVec,
    pub targets: Vec<TargetChannel>,
    pub paths: Vec<CommPath>,
    pub h_iu: CVec,
    pub h_bu: CVec,
    pub h_su: CVec,
    pub h_ib: CMat,
    pub h_cb: CVec,
}

impl ChannelSet {
    /// 1/√(L+1) weight shared by all SV paths.
    pub fn sv_weight(&self) -> f64 {
        1.0 / (self.paths.len() as f64).sqrt()
    }
}

pub fn draw_cn<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn generate_channels<R: Rng + ?Sized>(
    scene: &SceneConfig,
    arrays: &Arrays,
    truth: &GroundTruth,
    comm: &CommLoss,
    rng: &mut R,
) -> Result<ChannelSet> {
    generate_channels_with(scene, arrays, truth, comm, || draw_cn(rng))
}

/// Channel synthesis with an explicit small-scale gain source.
pub fn generate_channels_with<F: FnMut() -> C64>(
    scene: &SceneConfig,
    arrays: &Arrays,
    truth: &GroundTruth,
    comm: &CommLoss,
    mut beta: F,
) -> Result<ChannelSet> {
    let elems = irs_element_positions(scene, arrays.n_p);
    let h_ci = near_field_hci(scene.p_c, &elems, scene.wavelength)?;

    let mut targets = Vec::with_capacity(truth.k());
    for (k, &pt) in truth.targets.iter().enumerate() {
        let kappa = truth.rcs.get(k).copied().unwrap_or(1.0);
        let th_i = scene.theta_irs(pt)?;
        let th_b = scene.theta_bs(pt)?;
        let alpha_its = beta() * path_loss(SensingLink::IrsTargetSensor, scene, pt, kappa)?;
        let alpha_cts = beta() * path_loss(SensingLink::CtrlTargetSensor, scene, pt, kappa)?;
        let alpha_itb = beta() * path_loss(SensingLink::IrsTargetBs, scene, pt, kappa)?;
        let alpha_ctb = beta() * path_loss(SensingLink::CtrlTargetBs, scene, pt, kappa)?;
        let a_s = steering(arrays.n_s, th_i);
        let a_i = steering(arrays.n_p, th_i);
        let a_b = steering(arrays.m, th_b);
        targets.push(TargetChannel {
            alpha_its,
            alpha_cts,
            alpha_itb,
            alpha_ctb,
            theta_i: th_i,
            theta_b: th_b,
            h_its: (&a_s * a_i.adjoint()) * alpha_its,
            h_cts: &a_s * alpha_cts,
            h_itb: (&a_b * a_i.adjoint()) * alpha_itb,
            h_ctb: &a_b * alpha_ctb,
        });
    }

    let mut paths = Vec::with_capacity(truth.l() + 1);
    let pu = truth.user;
    paths.push(CommPath {
        alpha_iu: beta() * comm.amplitude(pu.dist(scene.p_i), true),
        alpha_bu: beta() * comm.amplitude(pu.dist(scene.p_b), true),
        theta_i: scene.theta_irs(pu)?,
        theta_b: scene.theta_bs(pu)?,
    });
    for &ps in &truth.scatterers {
        let d0 = pu.dist(ps);
        paths.push(CommPath {
            alpha_iu: beta() * comm.amplitude(d0 + ps.dist(scene.p_i), false),
            alpha_bu: beta() * comm.amplitude(d0 + ps.dist(scene.p_b), false),
            theta_i: scene.theta_irs(ps)?,
            theta_b: scene.theta_bs(ps)?,
        });
    }
    let w = 1.0 / (paths.len() as f64).sqrt();
    let mut h_iu = CVec::zeros(arrays.n_p);
    let mut h_su = CVec::zeros(arrays.n_s);
    let mut h_bu = CVec::zeros(arrays.m);
    for p in &paths {
        h_iu += steering(arrays.n_p, p.theta_i) * (p.alpha_iu * w);
        h_su += steering(arrays.n_s, p.theta_i) * (p.alpha_iu * w);
        h_bu += steering(arrays.m, p.theta_b) * (p.alpha_bu * w);
    }

    let d_ib = scene.p_i.dist(scene.p_b);
    let g_ib = C64::from_polar(comm.amplitude(d_ib, true), -2.0 * PI * d_ib / scene.wavelength);
    let h_ib = (steering(arrays.m, scene.theta_bs(scene.p_i)?) * steering(arrays.n_p, scene.theta_irs(scene.p_b)?).adjoint()) * g_ib;
    let d_cb = scene.p_c.dist(scene.p_b);
    let g_cb = C64::from_polar(comm.amplitude(d_cb, true), -2.0 * PI * d_cb / scene.wavelength);
    let h_cb = steering(arrays.m, scene.theta_bs(scene.p_c)?) * g_cb;

    Ok(ChannelSet { h_ci, targets, paths, h_iu, h_bu, h_su, h_ib, h_cb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use nalgebra::SVD;

    #[test]
    fn steering_examples() {
        let a = steering(4, PI / 2.0);
        assert!(a.iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-15));
        let b = steering(2, 0.0);
        assert!((b[1] - c(-1.0, 0.0)).norm() < 1e-15);
        let t = steering(3, PI / 3.0);
        assert!((t[1] - c(0.0, -1.0)).norm() < 1e-15);
        assert!((t[2] - c(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn steering_derivative_matches_finite_difference() {
        let (n, th, h) = (7, 1.1, 1e-6);
        let fd = (steering(n, th + h) - steering(n, th - h)) / c(2.0 * h, 0.0);
        assert!((fd - steering_deriv(n, th)).norm() < 1e-8);
    }

    #[test]
    fn near_field_examples() {
        let lam = SceneConfig::default().wavelength;
        let pc = Point::new(0.0, 0.0);
        let g = near_field_hci(pc, &[Point::new(lam / (4.0 * PI), 0.0), Point::new(0.0, lam)], lam).unwrap();
        assert!((g[0].norm() - 1.0).abs() < 1e-12);
        assert!(g[1].arg().abs() < 1e-9);
        let d = 0.1;
        let v = near_field_hci(pc, &[Point::new(0.0, d)], lam).unwrap()[0];
        let want = c((2.0 * PI * d / lam).cos(), -(2.0 * PI * d / lam).sin()) * (lam / (4.0 * PI * d));
        assert!((v - want).norm() < 1e-15);
        assert!(near_field_hci(pc, &[pc], lam).is_err());
    }

    #[test]
    fn path_loss_scaling() {
        let mut s = SceneConfig::default();
        s.p_c = s.p_i;
        let pt = Point::new(0.0, 20.0);
        let far = s.p_i + (pt - s.p_i) * 2.0;
        let g1 = path_loss(SensingLink::IrsTargetSensor, &s, pt, 1.0).unwrap();
        let g2 = path_loss(SensingLink::IrsTargetSensor, &s, far, 1.0).unwrap();
        assert!((g2 / g1 - 0.25).abs() < 1e-12);
        let g4 = path_loss(SensingLink::IrsTargetSensor, &s, pt, 4.0).unwrap();
        assert!((g4 / g1 - 2.0).abs() < 1e-12);
        let mono = path_loss(SensingLink::CtrlTargetSensor, &s, pt, 1.0).unwrap();
        assert!((mono - g1).abs() < 1e-18);
    }

    fn small_truth() -> GroundTruth {
        GroundTruth {
            targets: vec![Point::new(-3.0, 30.0), Point::new(5.0, 25.0)],
            scatterers: vec![Point::new(8.0, 40.0)],
            user: Point::new(1.0, 8.0),
            overlap: vec![],
            rcs: vec![1.0, 2.0],
        }
    }

    #[test]
    fn frozen_gains_reproduce_closed_form() {
        let s = SceneConfig::default();
        let arr = Arrays { m: 5, n_p: 6, n_s: 4 };
        let truth = small_truth();
        let ch = generate_channels_with(&s, &arr, &truth, &CommLoss::default(), || c(1.0, 0.0)).unwrap();
        // Per-entry recomputation from raw geometry.
        let lam = s.wavelength;
        for (k, t) in truth.targets.iter().enumerate() {
            let d_i = s.p_i.dist(*t);
            let g = (lam * lam * truth.rcs[k] / (64.0 * PI.powi(3) * d_i.powi(4))).sqrt();
            let u = (s.p_i.x - t.x) / d_i; // cos of the IRS-convention angle
            for n in 0..arr.n_s {
                for m in 0..arr.n_p {
                    let want = C64::from_polar(g, -PI * (n as f64 - m as f64) * u);
                    assert!((ch.targets[k].h_its[(n, m)] - want).norm() < 1e-12 * g);
                }
            }
        }
        let w = 1.0 / 2f64.sqrt();
        let cl = CommLoss::default();
        let d_los = truth.user.dist(s.p_i);
        let d_nl = truth.user.dist(truth.scatterers[0]) + truth.scatterers[0].dist(s.p_i);
        for n in 0..arr.n_p {
            let u0 = (s.p_i.x - truth.user.x) / d_los;
            let u1 = (s.p_i.x - truth.scatterers[0].x) / truth.scatterers[0].dist(s.p_i);
            let want = (C64::from_polar(cl.amplitude(d_los, true), -PI * n as f64 * u0)
                + C64::from_polar(cl.amplitude(d_nl, false), -PI * n as f64 * u1))
                * w;
            assert!((ch.h_iu[n] - want).norm() < 1e-12 * want.norm().max(1e-30));
        }
    }

    #[test]
    fn los_only_user_has_unit_weight() {
        let s = SceneConfig::default();
        let arr = Arrays { m: 4, n_p: 4, n_s: 4 };
        let truth = GroundTruth { targets: vec![Point::new(0.0, 30.0)], scatterers: vec![], ..small_truth() };
        let ch = generate_channels_with(&s, &arr, &truth, &CommLoss::default(), || c(1.0, 0.0)).unwrap();
        assert_eq!(ch.paths.len(), 1);
        assert!((ch.sv_weight() - 1.0).abs() < 1e-15);
        let want = steering(4, ch.paths[0].theta_i) * ch.paths[0].alpha_iu;
        assert!((ch.h_iu.clone() - want).norm() < 1e-18);
    }

    #[test]
    fn sensing_channels_rank_one_and_shared_gains() {
        let s = SceneConfig::default();
        let arr = Arrays { m: 8, n_p: 12, n_s: 6 };
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(9);
        let ch = generate_channels(&s, &arr, &small_truth(), &CommLoss::default(), &mut rng).unwrap();
        for t in &ch.targets {
            for h in [&t.h_its, &t.h_itb] {
                let sv = SVD::new(h.clone(), false, false).singular_values;
                assert!(sv[1] < 1e-10 * sv[0]);
            }
        }
        // h_SU and h_IU carry the same per-path gains.
        let w = ch.sv_weight();
        let a_s = CMat::from_columns(&ch.paths.iter().map(|p| steering(arr.n_s, p.theta_i)).collect::<Vec<_>>());
        let a_i = CMat::from_columns(&ch.paths.iter().map(|p| steering(arr.n_p, p.theta_i)).collect::<Vec<_>>());
        let gs = a_s.clone().svd(true, true).solve(&ch.h_su, 1e-12).unwrap();
        let gi = a_i.clone().svd(true, true).solve(&ch.h_iu, 1e-12).unwrap();
        for (l, p) in ch.paths.iter().enumerate() {
            assert!((gs[l] - p.alpha_iu * w).norm() < 1e-9 * p.alpha_iu.norm());
            assert!((gi[l] - p.alpha_iu * w).norm() < 1e-9 * p.alpha_iu.norm());
        }
    }
}

//! Position Fisher information for detected objects, its trace-CRB, and the
//! quadratic-form coefficients that express each diagonal entry as an
//! explicit function of the phase-II reflection vectors.

use serde::{Deserialize, Serialize};

use crate::channel::{steering, steering_deriv, Arrays};
use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec, RMat, C64};
use crate::measurement::ReflectionSchedule;
use crate::scene::{Point, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    PureTarget,
    Overlap,
    PureScatterer,
    User,
}

/// A detected (or true) object with its gains held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: Point,
    pub class: ObjectClass,
    /// (its, cts, itb, ctb) for targets and overlaps.
    pub sensing: Option<[C64; 4]>,
    /// (bs, irs) gains: (bnl, inl) for scatterers, (bl, il) for the user.
    pub comm: Option<[C64; 2]>,
}

impl Object {
    pub fn new(pos: Point, sensing: Option<[C64; 4]>, comm: Option<[C64; 2]>, user: bool) -> Self {
        let class = match (sensing.is_some(), comm.is_some(), user) {
            (_, _, true) => ObjectClass::User,
            (true, true, _) => ObjectClass::Overlap,
            (true, false, _) => ObjectClass::PureTarget,
            _ => ObjectClass::PureScatterer,
        };
        Object { pos, class, sensing, comm }
    }
}

/// Sorts objects into the ξ order (pure targets, overlaps, pure scatterers,
/// user); parameter 2i is x and 2i+1 is y of object i.
pub fn order_objects(mut objs: Vec<Object>) -> Vec<Object> {
    objs.sort_by_key(|o| o.class);
    objs
}

#[derive(Clone, Debug)]
pub struct CrbContext {
    pub scene: SceneConfig,
    pub arrays: Arrays,
    pub h_ci: CVec,
    pub h_ib: CMat,
    /// Pilot amplitude already folded into the gains.
    pub sigma2: f64,
}

/// Angles and angle derivatives of one object.
struct Geo {
    th_i: f64,
    th_b: f64,
    ci: (f64, f64),
    cb: (f64, f64),
}

fn geo(ctx: &CrbContext, p: Point) -> Result<Geo> {
    Ok(Geo { th_i: ctx.scene.theta_irs(p)?, th_b: ctx.scene.theta_bs(p)?, ci: ctx.scene.dtheta_irs(p), cb: ctx.scene.dtheta_bs(p) })
}

/// Noiseless mean of one schedule's observations (rows in
/// [`crate::measurement::Observation::stacked`] order) and its Jacobian with
/// respect to all object coordinates.
pub fn mean_and_jacobian(ctx: &CrbContext, objs: &[Object], sched: &ReflectionSchedule) -> Result<(CVec, CMat)> {
    let a = &ctx.arrays;
    let (m, n_s, n_p) = (a.m, a.n_s, a.n_p);
    let (t_s, t_c) = (sched.t_s(), sched.t_c());
    let rows = (n_s + m) * t_s + (n_s + m) * t_c;
    let mut mean = CVec::zeros(rows);
    let mut jac = CMat::zeros(rows, 2 * objs.len());
    let phi_t = CMat::from_fn(n_p, t_s, |n, t| ctx.h_ci[n] * sched.phi_r[(n, t)]);
    let o_br = n_s * t_s;
    let o_sc = (n_s + m) * t_s;
    let o_bc = o_sc + n_s * t_c;
    for (k, o) in objs.iter().enumerate() {
        let g = geo(ctx, o.pos)?;
        let (a_s, a_i, a_b) = (steering(n_s, g.th_i), steering(n_p, g.th_i), steering(m, g.th_b));
        let (da_s, da_i, da_b) = (steering_deriv(n_s, g.th_i), steering_deriv(n_p, g.th_i), steering_deriv(m, g.th_b));
        let cols = [(2 * k, g.ci.0, g.cb.0), (2 * k + 1, g.ci.1, g.cb.1)];
        if let Some([its, cts, itb, ctb]) = o.sensing {
            for t in 0..t_s {
                let pt = phi_t.column(t);
                let w = a_i.dotc(&pt);
                let dw = da_i.dotc(&pt);
                for r in 0..n_s {
                    mean[t * n_s + r] += its * a_s[r] * w + cts * a_s[r];
                    let d = its * (da_s[r] * w + a_s[r] * dw) + cts * da_s[r];
                    for &(c, ci, _) in &cols {
                        jac[(t * n_s + r, c)] += d * ci;
                    }
                }
                for r in 0..m {
                    mean[o_br + t * m + r] += itb * a_b[r] * w + ctb * a_b[r];
                    let di = itb * a_b[r] * dw;
                    let db = itb * da_b[r] * w + ctb * da_b[r];
                    for &(c, ci, cb) in &cols {
                        jac[(o_br + t * m + r, c)] += di * ci + db * cb;
                    }
                }
            }
        }
        if let Some([g_b, g_i]) = o.comm {
            for t in 0..t_c {
                for r in 0..n_s {
                    mean[o_sc + t * n_s + r] += g_i * a_s[r];
                    for &(c, ci, _) in &cols {
                        jac[(o_sc + t * n_s + r, c)] += g_i * da_s[r] * ci;
                    }
                }
                let ph = sched.phi_c.column(t);
                let via = (&ctx.h_ib * a_i.component_mul(&ph)) * g_i;
                let dvia = (&ctx.h_ib * da_i.component_mul(&ph)) * g_i;
                for r in 0..m {
                    mean[o_bc + t * m + r] += g_b * a_b[r] + via[r];
                    for &(c, ci, cb) in &cols {
                        jac[(o_bc + t * m + r, c)] += dvia[r] * ci + g_b * da_b[r] * cb;
                    }
                }
            }
        }
    }
    Ok((mean, jac))
}

/// Exact FIM (2/σ²) Re{∂μ^H ∂μ} summed over the given schedules.
pub fn fim_full(ctx: &CrbContext, objs: &[Object], schedules: &[&ReflectionSchedule]) -> Result<RMat> {
    let n = 2 * objs.len();
    let mut j = RMat::zeros(n, n);
    for s in schedules {
        let (_, jac) = mean_and_jacobian(ctx, objs, s)?;
        let g = jac.adjoint() * &jac;
        j += g.map(|z| z.re) * (2.0 / ctx.sigma2);
    }
    Ok(j)
}

/// Blocks that the block pattern sets to zero: pure targets against pure
/// scatterers and the user, and everything else against the user.
pub fn structurally_zero(a: ObjectClass, b: ObjectClass) -> bool {
    use ObjectClass::*;
    matches!(
        (a, b),
        (PureTarget, PureScatterer)
            | (PureScatterer, PureTarget)
            | (PureTarget, User)
            | (User, PureTarget)
            | (Overlap, User)
            | (User, Overlap)
            | (PureScatterer, User)
            | (User, PureScatterer)
    )
}

/// FIM with the block-sparsity pattern applied.
pub fn fim(ctx: &CrbContext, objs: &[Object], schedules: &[&ReflectionSchedule]) -> Result<RMat> {
    let mut j = fim_full(ctx, objs, schedules)?;
    for (a, oa) in objs.iter().enumerate() {
        for (b, ob) in objs.iter().enumerate() {
            if structurally_zero(oa.class, ob.class) {
                for r in 0..2 {
                    for c in 0..2 {
                        j[(2 * a + r, 2 * b + c)] = 0.0;
                    }
                }
            }
        }
    }
    Ok(j)
}

/// tr(J⁻¹); infinite when J is singular after jitter.
pub fn crb_trace(j: &RMat) -> f64 {
    let n = j.nrows();
    if n == 0 {
        return 0.0;
    }
    let try_inv = |m: RMat| nalgebra::Cholesky::new(m).map(|c| c.inverse().trace());
    if let Some(t) = try_inv(j.clone()) {
        if t.is_finite() && t > 0.0 {
            return t;
        }
    }
    let tr = j.trace();
    let mut b = j.clone();
    for i in 0..n {
        b[(i, i)] += crate::linalg::JITTER * tr.abs();
    }
    match try_inv(b) {
        Some(t) if t.is_finite() && t > 0.0 && tr > 0.0 => t,
        _ => f64::INFINITY,
    }
}

/// Σ 1/J_nn.
pub fn diag_crb_trace(j: &RMat) -> f64 {
    (0..j.nrows()).map(|i| 1.0 / j[(i, i)]).sum()
}

/// Quadratic-form coefficients of one diagonal entry. With φ_t the reflection
/// vector of pilot t, a sensing partition contributes
/// (2/σ²) Σ_t [φ_t^T A φ_t^* + 2 Re(φ_t^T b)] and likewise for the
/// communication partition; `c` collects everything independent of φ.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCoeffs {
    pub a_r: Option<CMat>,
    pub b_r: Option<CVec>,
    pub a_c: Option<CMat>,
    pub b_c: Option<CVec>,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FimCoeffs {
    pub params: Vec<ParamCoeffs>,
    pub n_p: usize,
    pub t3: usize,
    pub t4: usize,
    pub sigma2: f64,
}

/// Per-pilot (A, b) from J(φ) = ‖Uφ + v‖²: A = U^T U^*, b = U^T v^*.
fn quad(u: &CMat, v: &CVec) -> (CMat, CVec) {
    (u.transpose() * u.map(|z| z.conj()), u.transpose() * v.map(|z| z.conj()))
}

impl FimCoeffs {
    /// Split a stacked [vec Φ_r; vec Φ_c] into per-pilot columns.
    fn pilot<'a>(&self, phi: &'a CVec, c: bool, t: usize) -> nalgebra::DVectorView<'a, C64> {
        let off = if c { self.n_p * self.t3 } else { 0 };
        phi.rows(off + t * self.n_p, self.n_p)
    }

    pub fn dim(&self) -> usize {
        self.n_p * (self.t3 + self.t4)
    }

    /// Diagonal entries J_nn(φ).
    pub fn diag(&self, phi: &CVec) -> Vec<f64> {
        let k = 2.0 / self.sigma2;
        self.params
            .iter()
            .map(|pc| {
                let mut s = pc.c;
                for (part, a, b, tn) in [(false, &pc.a_r, &pc.b_r, self.t3), (true, &pc.a_c, &pc.b_c, self.t4)] {
                    if let (Some(a), Some(b)) = (a, b) {
                        for t in 0..tn {
                            let p = self.pilot(phi, part, t);
                            let pc_ = p.map(|z| z.conj());
                            s += k * ((p.transpose() * a * pc_)[(0, 0)].re + 2.0 * (p.transpose() * b)[(0, 0)].re);
                        }
                    }
                }
                s
            })
            .collect()
    }

    /// Imaginary residue of the quadratic forms, for the realness check.
    pub fn diag_imag(&self, phi: &CVec) -> f64 {
        let mut worst: f64 = 0.0;
        for pc in &self.params {
            for (part, a, tn) in [(false, &pc.a_r, self.t3), (true, &pc.a_c, self.t4)] {
                if let Some(a) = a {
                    for t in 0..tn {
                        let p = self.pilot(phi, part, t);
                        worst = worst.max((p.transpose() * a * p.map(|z| z.conj()))[(0, 0)].im.abs());
                    }
                }
            }
        }
        worst
    }

    /// Real-coordinate gradient of J_nn: (4/σ²)(A^* φ + b^*) per pilot.
    pub fn grad_param(&self, n: usize, phi: &CVec) -> CVec {
        let pc = &self.params[n];
        let k = 4.0 / self.sigma2;
        let mut g = CVec::zeros(self.dim());
        for (part, a, b, tn) in [(false, &pc.a_r, &pc.b_r, self.t3), (true, &pc.a_c, &pc.b_c, self.t4)] {
            if let (Some(a), Some(b)) = (a, b) {
                let off = if part { self.n_p * self.t3 } else { 0 };
                for t in 0..tn {
                    let p = self.pilot(phi, part, t);
                    let v = (a.map(|z| z.conj()) * p + b.map(|z| z.conj())) * C64::new(k, 0.0);
                    g.rows_mut(off + t * self.n_p, self.n_p).copy_from(&v);
                }
            }
        }
        g
    }
}

/// Builds the coefficient form of every diagonal FIM entry for a phase-II
/// design with `t3` sensing and `t4` channel-estimation pilots; phase-I
/// information enters the constants.
pub fn approx_fim_coeffs(ctx: &CrbContext, objs: &[Object], phase1: &ReflectionSchedule, t3: usize, t4: usize) -> Result<FimCoeffs> {
    let a = &ctx.arrays;
    let (m, n_s, n_p) = (a.m, a.n_s, a.n_p);
    let j1 = fim_full(ctx, objs, &[phase1])?;
    let k = 2.0 / ctx.sigma2;
    let hd = CMat::from_diagonal(&ctx.h_ci);
    let mut params = Vec::with_capacity(2 * objs.len());
    for (oi, o) in objs.iter().enumerate() {
        let g = geo(ctx, o.pos)?;
        let (a_s, a_i, a_b) = (steering(n_s, g.th_i), steering(n_p, g.th_i), steering(m, g.th_b));
        let (da_s, da_i, da_b) = (steering_deriv(n_s, g.th_i), steering_deriv(n_p, g.th_i), steering_deriv(m, g.th_b));
        for axis in 0..2 {
            let (ci, cb) = if axis == 0 { (g.ci.0, g.cb.0) } else { (g.ci.1, g.cb.1) };
            let (ci, cb) = (C64::new(ci, 0.0), C64::new(cb, 0.0));
            let mut pc = ParamCoeffs { a_r: None, b_r: None, a_c: None, b_c: None, c: j1[(2 * oi + axis, 2 * oi + axis)] };
            if let Some([its, cts, itb, ctb]) = o.sensing {
                // Sensor rows: ∂y = [its (da_s a_I^H + a_s da_I^H) diag(h)] φ + cts da_s, times ∂θ_I.
                let u_s = (&da_s * a_i.adjoint() + &a_s * da_i.adjoint()) * &hd * (its * ci);
                let v_s = &da_s * (cts * ci);
                let u_b = (&da_b * a_i.adjoint() * (itb * cb) + &a_b * da_i.adjoint() * (itb * ci)) * &hd;
                let v_b = &da_b * (ctb * cb);
                let (as_, bs) = quad(&u_s, &v_s);
                let (ab, bb) = quad(&u_b, &v_b);
                pc.a_r = Some(as_ + ab);
                pc.b_r = Some(bs + bb);
                pc.c += k * t3 as f64 * (v_s.norm_squared() + v_b.norm_squared());
            }
            if let Some([g_b, g_i]) = o.comm {
                // BS rows: ∂y = H_IB diag(g_i da_I ∂θ_I) φ + g_b da_B ∂θ_B; sensor rows are φ-free.
                let u = &ctx.h_ib * CMat::from_diagonal(&(&da_i * (g_i * ci)));
                let v = &da_b * (g_b * cb);
                let (ac, bc) = quad(&u, &v);
                pc.a_c = Some(ac);
                pc.b_c = Some(bc);
                pc.c += k * t4 as f64 * (v.norm_squared() + (&da_s * (g_i * ci)).norm_squared());
            }
            params.push(pc);
        }
    }
    if params.is_empty() {
        return Err(Error::Infeasible("no detected objects".into()));
    }
    Ok(FimCoeffs { params, n_p, t3, t4, sigma2: ctx.sigma2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use crate::measurement::Phase;

    #[test]
    fn trace_examples() {
        let j = RMat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        assert!((crb_trace(&j) - 1.25).abs() < 1e-15);
        let blk = RMat::from_row_slice(4, 4, &[2.0, 0.5, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 5.0]);
        let a = RMat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((crb_trace(&blk) - (crb_trace(&a) + 1.0 / 3.0 + 0.2)).abs() < 1e-12);
        assert!(crb_trace(&a) >= diag_crb_trace(&a));
        assert_eq!(crb_trace(&RMat::zeros(2, 2)), f64::INFINITY);
    }

    #[test]
    fn zero_pattern_is_symmetric() {
        use ObjectClass::*;
        for a in [PureTarget, Overlap, PureScatterer, User] {
            for b in [PureTarget, Overlap, PureScatterer, User] {
                assert_eq!(structurally_zero(a, b), structurally_zero(b, a));
            }
        }
        assert!(!structurally_zero(Overlap, PureScatterer));
    }

    #[test]
    fn empty_phase_two_sensing_leaves_constants() {
        let scene = SceneConfig::default();
        let arrays = Arrays { m: 4, n_p: 6, n_s: 4 };
        let elems = crate::channel::irs_element_positions(&scene, arrays.n_p);
        let h_ci = crate::channel::near_field_hci(scene.p_c, &elems, scene.wavelength).unwrap();
        let h_ib = CMat::from_fn(4, 6, |i, j| c((i + j) as f64, 1.0));
        let ctx = CrbContext { scene, arrays, h_ci, h_ib, sigma2: 1.0 };
        let objs = vec![Object::new(Point::new(3.0, 30.0), Some([c(1.0, 0.0); 4]), None, false)];
        let s1 = ReflectionSchedule { phi_r: CMat::from_element(6, 1, c(1.0, 0.0)), phi_c: CMat::zeros(6, 0), phase: Phase::I };
        let co = approx_fim_coeffs(&ctx, &objs, &s1, 0, 0).unwrap();
        let j = fim_full(&ctx, &objs, &[&s1]).unwrap();
        let d = co.diag(&CVec::zeros(0));
        assert!((d[0] - j[(0, 0)]).abs() < 1e-9 * j[(0, 0)]);
    }

    fn fixture() -> (CrbContext, Vec<Object>, ReflectionSchedule, ReflectionSchedule) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let scene = SceneConfig::default();
        let arrays = Arrays { m: 4, n_p: 6, n_s: 4 };
        let elems = crate::channel::irs_element_positions(&scene, arrays.n_p);
        let h_ci = crate::channel::near_field_hci(scene.p_c, &elems, scene.wavelength).unwrap();
        let mut cn = || c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let h_ib = CMat::from_fn(4, 6, |_, _| cn());
        let objs = order_objects(vec![
            Object::new(Point::new(5.0, 9.0), None, Some([cn(), cn()]), true),
            Object::new(Point::new(-4.0, 33.0), Some([cn(), cn(), cn(), cn()]), None, false),
            Object::new(Point::new(8.0, 41.0), Some([cn(), cn(), cn(), cn()]), Some([cn(), cn()]), false),
            Object::new(Point::new(-10.0, 25.0), None, Some([cn(), cn()]), false),
        ]);
        let mut ph = |r, t| CMat::from_fn(r, t, |_, _| C64::from_polar(1.0, rng.random::<f64>() * 6.283));
        let s1 = ReflectionSchedule { phi_r: ph(6, 3), phi_c: ph(6, 2), phase: Phase::I };
        let s2 = ReflectionSchedule { phi_r: ph(6, 2), phi_c: ph(6, 3), phase: Phase::II };
        (CrbContext { scene, arrays, h_ci, h_ib, sigma2: 0.3 }, objs, s1, s2)
    }

    #[test]
    fn fim_matches_finite_differences() {
        let (ctx, objs, s1, s2) = fixture();
        let n = 2 * objs.len();
        let h = 1e-5;
        let mut jac = CMat::zeros(0, 0);
        for s in [&s1, &s2] {
            let (m0, _) = mean_and_jacobian(&ctx, &objs, s).unwrap();
            let mut fd = CMat::zeros(m0.len(), n);
            for k in 0..n {
                let shift = |d: f64| {
                    let mut o = objs.clone();
                    if k % 2 == 0 { o[k / 2].pos.x += d } else { o[k / 2].pos.y += d }
                    mean_and_jacobian(&ctx, &o, s).unwrap().0
                };
                fd.set_column(k, &((shift(h) - shift(-h)) / c(2.0 * h, 0.0)));
            }
            jac = if jac.nrows() == 0 { fd } else { crate::linalg::vstack(&[&jac, &fd]) };
        }
        let oracle = (jac.adjoint() * &jac).map(|z| z.re) * (2.0 / ctx.sigma2);
        let j = fim_full(&ctx, &objs, &[&s1, &s2]).unwrap();
        let rel = (&j - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-4, "rel {rel}");
        // Gains ×2 scale the FIM by 4; halving σ² doubles it.
        let mut big = objs.clone();
        for o in &mut big {
            o.sensing = o.sensing.map(|g| g.map(|z| z * 2.0));
            o.comm = o.comm.map(|g| g.map(|z| z * 2.0));
        }
        let j4 = fim_full(&ctx, &big, &[&s1, &s2]).unwrap();
        assert!((&j4 - &j * 4.0).norm() < 1e-9 * j.norm());
        let half = CrbContext { sigma2: ctx.sigma2 / 2.0, ..ctx.clone() };
        assert!((fim_full(&half, &objs, &[&s1, &s2]).unwrap() - &j * 2.0).norm() < 1e-9 * j.norm());
    }

    #[test]
    fn zero_pattern_applied() {
        let (ctx, objs, s1, _) = fixture();
        let j = fim(&ctx, &objs, &[&s1]).unwrap();
        let full = fim_full(&ctx, &objs, &[&s1]).unwrap();
        // order: target(0) overlap(1) scatterer(2) user(3)
        assert_eq!(j[(0, 4)], 0.0);
        assert_eq!(j[(6, 2)], 0.0);
        assert_eq!(j[(2, 4)], full[(2, 4)]);
        assert!(full[(0, 4)].abs() < 1e-12 * full.norm());
        for i in 0..8 {
            assert_eq!(j[(i, i)], full[(i, i)]);
        }
    }

    #[test]
    fn coefficients_reproduce_direct_diagonal() {
        let (ctx, objs, s1, s2) = fixture();
        let co = approx_fim_coeffs(&ctx, &objs, &s1, 2, 3).unwrap();
        let phi = s2.vectorize();
        let d = co.diag(&phi);
        let j = fim_full(&ctx, &objs, &[&s1, &s2]).unwrap();
        for (i, v) in d.iter().enumerate() {
            assert!((v - j[(i, i)]).abs() < 1e-8 * j[(i, i)].abs().max(1.0), "{i}: {v} vs {}", j[(i, i)]);
        }
        assert!(co.diag_imag(&phi) < 1e-9);
        for p in &co.params {
            for a in [&p.a_r, &p.a_c].into_iter().flatten() {
                assert!((a - a.adjoint()).norm() < 1e-12 * a.norm().max(1.0));
            }
        }
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        let (ctx, objs, s1, s2) = fixture();
        let co = approx_fim_coeffs(&ctx, &objs, &s1, 2, 3).unwrap();
        let phi = s2.vectorize();
        let h = 1e-6;
        for n in [0, 3, 5, 7] {
            let g = co.grad_param(n, &phi);
            for k in [0, 7, 14, 25] {
                for dir in [c(1.0, 0.0), c(0.0, 1.0)] {
                    let mut p = phi.clone();
                    p[k] += dir * h;
                    let mut m = phi.clone();
                    m[k] -= dir * h;
                    let fd = (co.diag(&p)[n] - co.diag(&m)[n]) / (2.0 * h);
                    let an = (g[k].conj() * dir).re;
                    assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "n{n} k{k}: {fd} vs {an}");
                }
            }
        }
    }
}

//! Two-parameter continuation of fold and Hopf curves in the (gamma, rho)
//! plane, with Bogdanov-Takens detection via trace degeneration and
//! generalised Hopf detection via a sign change of the first Lyapunov
//! coefficient.
//!
//! Defining systems use the raw scalar conditions det J = 0 and trace J = 0
//! with analytic gradients (Jacobi's formula); in the plane these are exact
//! and no bordered augmentation is needed.

use crate::contin::{palc, SpecialPoint, SpecialPointKind};
use crate::error::{Error, Result};
use crate::model::{
    self, det2, jacobian_reduced, trace2, ActiveParam, Mat2, Params, State2,
};
use crate::numerics::Matrix;
use serde::Serialize;
use std::collections::BTreeMap;

/// Defining-system residual bound for accepted curve points.
pub const CURVE_RESIDUAL_TOL: f64 = 1e-9;
/// Both |det J| and |trace J| must fall below this at a localized BT point.
pub const BT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurveKind {
    FoldCurve,
    HopfCurve,
    /// Pointwise homoclinic samples (from the period blow-up proxy).
    HomoclinicCurve,
    /// Pointwise saddle-node-of-cycles samples.
    LpcCurve,
}

#[derive(Debug, Clone, Serialize)]
pub struct Codim2Point {
    pub gamma: f64,
    pub rho: f64,
    pub state: State2,
    /// Max-norm of the defining system at this point.
    pub residual: f64,
    pub test_fold: f64,
    pub test_hopf: f64,
    /// First Lyapunov coefficient (Hopf curves only).
    pub l1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Codim2Curve {
    pub kind: CurveKind,
    pub base: Params,
    pub points: Vec<Codim2Point>,
    pub special: Vec<SpecialPoint>,
    pub truncated: bool,
}

// ---------------------------------------------------------------------------
// defining systems
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum Defining {
    Fold,
    Hopf,
}

struct CurveProblem {
    base: Params,
    defining: Defining,
    scales: [f64; 4],
}

impl CurveProblem {
    fn new(base: Params, defining: Defining) -> Self {
        CurveProblem { base, defining, scales: [1000.0, 40.0, 1.0, 1.0] }
    }

    fn params_at(&self, z: &[f64]) -> Params {
        let mut p = self.base;
        p.gamma = z[2];
        p.rho = z[3];
        p
    }
}

fn grad_rows(j: &Mat2, d: &model::JacDerivs, hopf: bool) -> [f64; 4] {
    let g = |dj: &Mat2| {
        if hopf {
            dj[0][0] + dj[1][1]
        } else {
            j[1][1] * dj[0][0] + j[0][0] * dj[1][1] - j[1][0] * dj[0][1] - j[0][1] * dj[1][0]
        }
    };
    [g(&d.d_s), g(&d.d_i), g(&d.d_gamma), g(&d.d_rho)]
}

impl palc::Problem for CurveProblem {
    fn n_eq(&self) -> usize {
        3
    }

    fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn residual(&mut self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.params_at(z);
        let x = [z[0], z[1]];
        let f = model::rhs2(x, &p);
        let j = jacobian_reduced(x, &p);
        out[0] = f[0];
        out[1] = f[1];
        out[2] = match self.defining {
            Defining::Fold => det2(&j),
            Defining::Hopf => trace2(&j),
        };
        Ok(())
    }

    fn jacobian(&mut self, z: &[f64]) -> Result<Matrix> {
        let p = self.params_at(z);
        let x = [z[0], z[1]];
        let j = jacobian_reduced(x, &p);
        let fg = model::rhs_param_deriv(x, &p, ActiveParam::Gamma);
        let fr = model::rhs_param_deriv(x, &p, ActiveParam::Rho);
        let d = model::jacobian_derivs(x, &p);
        let g = grad_rows(&j, &d, self.defining == Defining::Hopf);
        Ok(Matrix::from_rows(&[
            &[j[0][0], j[0][1], fg[0], fr[0]],
            &[j[1][0], j[1][1], fg[1], fr[1]],
            &g,
        ]))
    }
}

fn point_at(prob: &CurveProblem, z: &[f64], l1: Option<f64>) -> Codim2Point {
    let p = prob.params_at(z);
    let x = [z[0], z[1]];
    let f = model::rhs2(x, &p);
    let j = jacobian_reduced(x, &p);
    let defining = match prob.defining {
        Defining::Fold => det2(&j),
        Defining::Hopf => trace2(&j),
    };
    Codim2Point {
        gamma: z[2],
        rho: z[3],
        state: x,
        residual: f[0].abs().max(f[1].abs()).max(defining.abs()),
        test_fold: det2(&j),
        test_hopf: trace2(&j),
        l1,
    }
}

fn seed_solution(prob: &mut CurveProblem, seed: &SpecialPoint) -> Result<Vec<f64>> {
    let z0 = vec![seed.state[0], seed.state[1], seed.gamma, seed.rho];
    let settings = palc::Settings::default();
    // correct the seed onto the defining manifold, holding rho fixed
    match palc::correct_fixed(prob, &z0, 3, seed.rho, &settings)? {
        Some(z) => Ok(z),
        None => Err(Error::CorrectorFailedAtStart),
    }
}

fn march_curve(
    prob: &mut CurveProblem,
    z0: &[f64],
    direction: f64,
    settings: &palc::Settings,
    compute_l1: bool,
) -> Result<(Vec<Vec<f64>>, bool)> {
    use palc::Problem as _;
    let sc = prob.scales().to_vec();
    let mut orient = vec![0.0; 4];
    // orient along gamma first, falling back to rho near a gamma-fold
    orient[2] = direction;
    let mut tangent = palc::tangent(prob, z0, Some(&orient))?;
    if tangent[2].abs() < 1e-8 {
        let mut o2 = vec![0.0; 4];
        o2[3] = direction;
        tangent = palc::tangent(prob, z0, Some(&o2))?;
    }
    let mut zs = palc::to_scaled(z0, &sc);
    let mut points: Vec<Vec<f64>> = vec![z0.to_vec()];
    let mut h = settings.h0;
    let mut successes = 0;
    let mut truncated = false;
    let _ = compute_l1;

    for _ in 0..settings.max_points {
        let pred: Vec<f64> = zs.iter().zip(&tangent).map(|(a, t)| a + h * t).collect();
        match palc::correct(prob, &pred, &tangent, settings)? {
            Some(z_new) => {
                // stop cleanly when leaving the unit parameter square
                if !(0.0..=1.0).contains(&z_new[2]) || !(0.0..=1.0).contains(&z_new[3]) {
                    break;
                }
                let zs_new = palc::to_scaled(&z_new, &sc);
                let mut secant: Vec<f64> = zs_new.iter().zip(&zs).map(|(a, b)| a - b).collect();
                let norm = secant.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in secant.iter_mut() {
                        *v /= norm;
                    }
                }
                points.push(z_new.clone());
                zs = zs_new;
                tangent = secant;
                successes += 1;
                if successes >= settings.grow_after {
                    h = (h * 1.3).min(settings.hmax);
                    successes = 0;
                }
            }
            None => {
                h *= 0.5;
                successes = 0;
                if h < settings.hmin {
                    truncated = true;
                    break;
                }
            }
        }
    }
    Ok((points, truncated))
}

/// Continues the fold curve {rhs = 0, det J = 0} through the (gamma, rho)
/// plane from a localized LP seed, monitoring trace J for BT points.
pub fn continue_fold_curve(base: &Params, seed: &SpecialPoint) -> Result<Codim2Curve> {
    continue_curve(base, seed, Defining::Fold)
}

/// Continues the Hopf curve {rhs = 0, trace J = 0} from a localized HB
/// seed, monitoring det J (BT endpoints) and the first Lyapunov
/// coefficient (GH points).
pub fn continue_hopf_curve(base: &Params, seed: &SpecialPoint) -> Result<Codim2Curve> {
    continue_curve(base, seed, Defining::Hopf)
}

fn continue_curve(base: &Params, seed: &SpecialPoint, defining: Defining) -> Result<Codim2Curve> {
    base.validate()?;
    let mut prob = CurveProblem::new(*base, defining);
    let z0 = seed_solution(&mut prob, seed)?;
    let settings = palc::Settings { h0: 1e-3, hmax: 8e-3, tol: 1e-11, ..Default::default() };

    let (fwd, trunc_f) = march_curve(&mut prob, &z0, 1.0, &settings, false)?;
    let (bwd, trunc_b) = march_curve(&mut prob, &z0, -1.0, &settings, false)?;

    let mut zs: Vec<Vec<f64>> = bwd.into_iter().rev().collect();
    zs.pop();
    zs.extend(fwd);

    let compute_l1 = defining == Defining::Hopf;
    let points: Vec<Codim2Point> = zs
        .iter()
        .map(|z| {
            let l1 = if compute_l1 {
                let p = prob.params_at(z);
                let j = jacobian_reduced([z[0], z[1]], &p);
                let det = det2(&j);
                if det > 0.0 {
                    lyapunov_l1(&p, [z[0], z[1]], det.sqrt()).ok()
                } else {
                    None
                }
            } else {
                None
            };
            point_at(&prob, z, l1)
        })
        .collect();

    let kind = match defining {
        Defining::Fold => CurveKind::FoldCurve,
        Defining::Hopf => CurveKind::HopfCurve,
    };
    let mut curve = Codim2Curve {
        kind,
        base: *base,
        points,
        special: Vec::new(),
        truncated: trunc_f || trunc_b,
    };
    let mut special = detect_bt(&curve)?;
    if compute_l1 {
        special.extend(detect_gh(&curve)?);
    }
    curve.special = special;
    Ok(curve)
}

// ---------------------------------------------------------------------------
// BT and GH detection
// ---------------------------------------------------------------------------

/// Localizes Bogdanov-Takens points on a fold or Hopf curve: the monitor
/// (trace J on fold curves, det J on Hopf curves) changes sign; the located
/// point satisfies |det J| <= 1e-8 and |trace J| <= 1e-8.
pub fn detect_bt(curve: &Codim2Curve) -> Result<Vec<SpecialPoint>> {
    let monitor = |pt: &Codim2Point| match curve.kind {
        CurveKind::FoldCurve => pt.test_hopf,
        CurveKind::HopfCurve => pt.test_fold,
        _ => 0.0,
    };
    if !matches!(curve.kind, CurveKind::FoldCurve | CurveKind::HopfCurve) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for k in 1..curve.points.len() {
        let (a, b) = (&curve.points[k - 1], &curve.points[k]);
        if monitor(a) * monitor(b) < 0.0 {
            let guess = [
                0.5 * (a.state[0] + b.state[0]),
                0.5 * (a.state[1] + b.state[1]),
                0.5 * (a.gamma + b.gamma),
                0.5 * (a.rho + b.rho),
            ];
            if let Some(z) = bt_newton(&curve.base, guess) {
                let p = Params { gamma: z[2], rho: z[3], ..curve.base };
                let j = jacobian_reduced([z[0], z[1]], &p);
                let mut aux = BTreeMap::new();
                aux.insert("det".into(), det2(&j));
                aux.insert("trace".into(), trace2(&j));
                out.push(SpecialPoint {
                    kind: SpecialPointKind::BT,
                    gamma: z[2],
                    rho: z[3],
                    state: [z[0], z[1]],
                    aux,
                });
            }
        }
    }
    Ok(out)
}

/// Full BT defining system {rhs = 0, det J = 0, trace J = 0} in
/// (S, I, gamma, rho).
fn bt_newton(base: &Params, mut z: [f64; 4]) -> Option<[f64; 4]> {
    let sc = [1000.0, 40.0, 1.0, 1.0];
    for _ in 0..50 {
        let p = Params { gamma: z[2], rho: z[3], ..*base };
        let x = [z[0], z[1]];
        let f = model::rhs2(x, &p);
        let j = jacobian_reduced(x, &p);
        let rn = f[0].abs().max(f[1].abs()).max(det2(&j).abs()).max(trace2(&j).abs());
        if rn <= 1e-12 {
            return Some(z);
        }
        let fg = model::rhs_param_deriv(x, &p, ActiveParam::Gamma);
        let fr = model::rhs_param_deriv(x, &p, ActiveParam::Rho);
        let d = model::jacobian_derivs(x, &p);
        let gd = grad_rows(&j, &d, false);
        let gt = grad_rows(&j, &d, true);
        let mut m = Matrix::from_rows(&[
            &[j[0][0], j[0][1], fg[0], fr[0]],
            &[j[1][0], j[1][1], fg[1], fr[1]],
            &gd,
            &gt,
        ]);
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] *= sc[c];
            }
        }
        let rhs = vec![-f[0], -f[1], -det2(&j), -trace2(&j)];
        let step = crate::numerics::solve_linear(&m, &rhs).ok()?;
        for k in 0..4 {
            z[k] += step[k] * sc[k];
        }
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    let p = Params { gamma: z[2], rho: z[3], ..*base };
    let j = jacobian_reduced([z[0], z[1]], &p);
    let f = model::rhs2([z[0], z[1]], &p);
    let ok = f[0].abs().max(f[1].abs()) <= 1e-10
        && det2(&j).abs() <= BT_TOL
        && trace2(&j).abs() <= BT_TOL;
    if ok {
        Some(z)
    } else {
        None
    }
}

/// Localizes generalised Hopf points on a Hopf curve by bisecting the l1
/// monitor along the curve; aux records the sign of the l1 slope.
pub fn detect_gh(curve: &Codim2Curve) -> Result<Vec<SpecialPoint>> {
    if curve.kind != CurveKind::HopfCurve {
        return Ok(Vec::new());
    }
    let mut prob = CurveProblem::new(curve.base, Defining::Hopf);
    let settings = palc::Settings { tol: 1e-11, ..Default::default() };
    let sc = [1000.0, 40.0, 1.0, 1.0];
    let mut out = Vec::new();
    for k in 1..curve.points.len() {
        let (a, b) = (&curve.points[k - 1], &curve.points[k]);
        let (la, lb) = match (a.l1, b.l1) {
            (Some(x), Some(y)) => (x, y),
            _ => continue,
        };
        if la * lb >= 0.0 {
            continue;
        }
        // bisection along the curve with perpendicular correction
        let mut z_lo = vec![a.state[0], a.state[1], a.gamma, a.rho];
        let mut z_hi = vec![b.state[0], b.state[1], b.gamma, b.rho];
        let mut t_lo = la;
        let mut t_hi = lb;
        let dir_raw: Vec<f64> = (0..4).map(|j| (z_hi[j] - z_lo[j]) / sc[j]).collect();
        let dn = dir_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn == 0.0 {
            continue;
        }
        let dir: Vec<f64> = dir_raw.iter().map(|v| v / dn).collect();
        let mut best = z_lo.clone();
        for _ in 0..60 {
            let denom = t_hi - t_lo;
            let s = if denom.abs() > 1e-300 { (-t_lo / denom).clamp(0.15, 0.85) } else { 0.5 };
            let zs_mid: Vec<f64> =
                (0..4).map(|j| (z_lo[j] + s * (z_hi[j] - z_lo[j])) / sc[j]).collect();
            let z_mid = match palc::correct(&mut prob, &zs_mid, &dir, &settings)? {
                Some(z) => z,
                None => palc::from_scaled(&zs_mid, &sc),
            };
            let p = prob.params_at(&z_mid);
            let j = jacobian_reduced([z_mid[0], z_mid[1]], &p);
            let det = det2(&j);
            if det <= 0.0 {
                break;
            }
            let l_mid = match lyapunov_l1(&p, [z_mid[0], z_mid[1]], det.sqrt()) {
                Ok(v) => v,
                Err(_) => break,
            };
            best = z_mid.clone();
            if t_lo * l_mid <= 0.0 {
                z_hi = z_mid;
                t_hi = l_mid;
            } else {
                z_lo = z_mid;
                t_lo = l_mid;
            }
            let dp = (z_hi[2] - z_lo[2]).abs().max((z_hi[3] - z_lo[3]).abs());
            if dp < 1e-10 {
                break;
            }
        }
        let p = prob.params_at(&best);
        let j = jacobian_reduced([best[0], best[1]], &p);
        let mut aux = BTreeMap::new();
        aux.insert("l1_slope_sign".into(), if lb > la { 1.0 } else { -1.0 });
        aux.insert("omega".into(), det2(&j).max(0.0).sqrt());
        out.push(SpecialPoint {
            kind: SpecialPointKind::GH,
            gamma: best[2],
            rho: best[3],
            state: [best[0], best[1]],
            aux,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// first Lyapunov coefficient
// ---------------------------------------------------------------------------

/// First Lyapunov coefficient of the model at a Hopf point; negative means
/// supercritical (a stable cycle is ejected), positive subcritical. Only
/// the sign and order of magnitude are contractual.
pub fn lyapunov_l1(p: &Params, hopf_state: State2, omega: f64) -> Result<f64> {
    Ok(lyapunov_l1_checked(p, hopf_state, omega)?.0)
}

/// As [`lyapunov_l1`], also returning the relative change when the
/// finite-difference step is halved; callers may flag values above 5%.
pub fn lyapunov_l1_checked(p: &Params, hopf_state: State2, omega: f64) -> Result<(f64, f64)> {
    let j = jacobian_reduced(hopf_state, p);
    if trace2(&j).abs() > 1e-6 {
        return Err(Error::DegenerateLinearization(format!(
            "trace J = {:.3e} is not numerically zero",
            trace2(&j)
        )));
    }
    let det = det2(&j);
    if det <= 0.0 || omega <= 0.0 {
        return Err(Error::DegenerateHopf { det });
    }
    let pc = *p;
    let f = move |x: State2| model::rhs2(x, &pc);
    let h = 1e-4 * (1.0 + (hopf_state[0].powi(2) + hopf_state[1].powi(2)).sqrt());
    let v1 = l1_planar(&f, hopf_state, &j, omega, h)?;
    let v2 = l1_planar(&f, hopf_state, &j, omega, 0.5 * h)?;
    let rel = if v2.abs() > 1e-300 { ((v1 - v2) / v2).abs() } else { (v1 - v2).abs() };
    Ok((v2, rel))
}

/// First Lyapunov coefficient of a generic planar field at an equilibrium
/// whose linearization `j` has eigenvalues +/- i omega: transform to the
/// real eigenbasis and apply the planar cubic normal-form formula with
/// central finite differences up to third order.
pub(crate) fn l1_planar<F: Fn(State2) -> State2>(
    f: &F,
    center: State2,
    j: &Mat2,
    omega: f64,
    h: f64,
) -> Result<f64> {
    // complex eigenvector q for +i omega from the first row of (J - i omega I);
    // fall back to the second row if the first is degenerate
    let (qr, qi) = if j[0][1].abs() > 1e-12 * (1.0 + j[0][0].abs()) {
        ([j[0][1], -j[0][0]], [0.0, omega])
    } else if j[1][0].abs() > 1e-12 * (1.0 + j[1][1].abs()) {
        ([-j[1][1], j[1][0]], [omega, 0.0])
    } else {
        // diagonal linear part: trace 0 and det > 0 forces J = [[0,-w],[w,0]] shape
        return Err(Error::DegenerateLinearization("eigenvector construction failed".into()));
    };
    // common normalization keeps T^-1 J T = [[0,-omega],[omega,0]] exact
    let norm = (qr[0] * qr[0] + qr[1] * qr[1] + qi[0] * qi[0] + qi[1] * qi[1]).sqrt();
    let t_mat = [[qr[0] / norm, -qi[0] / norm], [qr[1] / norm, -qi[1] / norm]];
    let det_t = det2(&t_mat);
    if det_t.abs() < 1e-300 {
        return Err(Error::DegenerateLinearization("eigenbasis is singular".into()));
    }
    let t_inv = [
        [t_mat[1][1] / det_t, -t_mat[0][1] / det_t],
        [-t_mat[1][0] / det_t, t_mat[0][0] / det_t],
    ];

    // F~(z) = T^-1 f(center + T z), sampled on the FD stencil
    let ft = |a: f64, b: f64| -> State2 {
        let x = [
            center[0] + t_mat[0][0] * a * h + t_mat[0][1] * b * h,
            center[1] + t_mat[1][0] * a * h + t_mat[1][1] * b * h,
        ];
        let v = f(x);
        [
            t_inv[0][0] * v[0] + t_inv[0][1] * v[1],
            t_inv[1][0] * v[0] + t_inv[1][1] * v[1],
        ]
    };

    let f00 = ft(0.0, 0.0);
    let fp0 = ft(1.0, 0.0);
    let fm0 = ft(-1.0, 0.0);
    let f0p = ft(0.0, 1.0);
    let f0m = ft(0.0, -1.0);
    let fpp = ft(1.0, 1.0);
    let fpm = ft(1.0, -1.0);
    let fmp = ft(-1.0, 1.0);
    let fmm = ft(-1.0, -1.0);
    let f2p0 = ft(2.0, 0.0);
    let f2m0 = ft(-2.0, 0.0);
    let f02p = ft(0.0, 2.0);
    let f02m = ft(0.0, -2.0);

    let h2 = h * h;
    let h3 = h2 * h;
    let comp = |k: usize| {
        let fxx = (fp0[k] - 2.0 * f00[k] + fm0[k]) / h2;
        let fyy = (f0p[k] - 2.0 * f00[k] + f0m[k]) / h2;
        let fxy = (fpp[k] - fpm[k] - fmp[k] + fmm[k]) / (4.0 * h2);
        let fxxx = (f2p0[k] - 2.0 * fp0[k] + 2.0 * fm0[k] - f2m0[k]) / (2.0 * h3);
        let fyyy = (f02p[k] - 2.0 * f0p[k] + 2.0 * f0m[k] - f02m[k]) / (2.0 * h3);
        let fxyy = (fpp[k] + fpm[k] - 2.0 * fp0[k] - fmp[k] - fmm[k] + 2.0 * fm0[k]) / (2.0 * h3);
        let fxxy = (fpp[k] + fmp[k] - 2.0 * f0p[k] - fpm[k] - fmm[k] + 2.0 * f0m[k]) / (2.0 * h3);
        (fxx, fyy, fxy, fxxx, fyyy, fxyy, fxxy)
    };
    let (fxx, fyy, fxy, fxxx, _fyyy, fxyy, _fxxy) = comp(0);
    let (gxx, gyy, gxy, _gxxx, gyyy, _gxyy, gxxy) = comp(1);

    let a = (fxxx + fxyy + gxxy + gyyy) / 16.0
        + (fxy * (fxx + fyy) - gxy * (gxx + gyy) - fxx * gxx + fyy * gyy) / (16.0 * omega);
    if !a.is_finite() {
        return Err(Error::DegenerateLinearization("l1 evaluation produced non-finite value".into()));
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_sign_matches_normal_form_oracle() {
        // x' = -y + a x (x^2+y^2), y' = x + a y (x^2+y^2): l1 has the sign
        // of a (the magnitude depends on the eigenbasis normalization; only
        // sign and order of magnitude are contractual)
        for a in [1.0_f64, -1.0] {
            let f = move |x: State2| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                [-x[1] + a * x[0] * r2, x[0] + a * x[1] * r2]
            };
            let j = [[0.0, -1.0], [1.0, 0.0]];
            let l1 = l1_planar(&f, [0.0, 0.0], &j, 1.0, 1e-3).unwrap();
            assert_eq!(l1.signum(), a.signum(), "a={a}: l1={l1}");
            let ratio = (l1 / a).abs();
            assert!((0.1..=10.0).contains(&ratio), "a={a}: l1={l1}");
        }
    }

    #[test]
    fn l1_supercritical_at_rho_01_hopf() {
        // the Hopf point on the segment between GH1 and GH2
        use crate::contin::{continue_equilibrium, SpecialPointKind};
        use crate::model::endemic_equilibria;
        let p = Params::baseline(0.3, 0.1);
        let eq = endemic_equilibria(&p).unwrap();
        let b = continue_equilibrium(&p, eq.last().unwrap(), ActiveParam::Gamma, (0.3, 0.42), 1e-3, 1e-2)
            .unwrap();
        let hb = b.special.iter().find(|s| s.kind == SpecialPointKind::HB).unwrap();
        let ph = Params::baseline(hb.gamma, 0.1);
        let (l1, rel) = lyapunov_l1_checked(&ph, hb.state, hb.aux["omega"]).unwrap();
        assert!(l1 < 0.0, "supercritical Hopf at rho=0.1: l1 = {l1}");
        assert!(rel < 0.05, "step-halving check: rel change {rel}");
    }

    #[test]
    fn l1_rejects_non_hopf_input() {
        let p = Params::baseline(0.3, 0.1);
        // generic state: trace is far from zero
        assert!(lyapunov_l1(&p, [500.0, 20.0], 0.02).is_err());
    }
}

//! One-parameter pseudo-arclength continuation of equilibria with fold,
//! Hopf, and branch-point test functions, plus bisection localization of
//! the codimension-1 points.
//!
//! The predictor-corrector core in [`palc`] is shared with the
//! two-parameter and periodic-orbit drivers: a secant predictor in scaled
//! coordinates and a Newton corrector on the bordered system with the
//! arclength constraint, so branches pass through folds without
//! reparameterization.

use crate::error::{Error, Result};
use crate::model::{
    self, det2, jacobian_reduced, trace2, ActiveParam, EquilibriumPoint, Params, State2,
};
use crate::numerics::{eig2, Matrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Equilibrium residual bound for accepted branch points.
pub const BRANCH_RESIDUAL_TOL: f64 = 1e-10;
/// Absolute parameter tolerance for localized special points.
pub const LOCALIZE_PARAM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecialPointKind {
    /// Fold (saddle-node) of equilibria.
    LP,
    /// Hopf bifurcation.
    HB,
    /// Branch (transcritical) point.
    BP,
    /// Bogdanov-Takens point.
    BT,
    /// Generalised Hopf (Bautin) point.
    GH,
    /// Homoclinic orbit (high-period proxy).
    HOM,
    /// Saddle-node of limit cycles.
    LPC,
}

impl std::fmt::Display for SpecialPointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SpecialPointKind::LP => "LP",
            SpecialPointKind::HB => "HB",
            SpecialPointKind::BP => "BP",
            SpecialPointKind::BT => "BT",
            SpecialPointKind::GH => "GH",
            SpecialPointKind::HOM => "HOM",
            SpecialPointKind::LPC => "LPC",
        };
        write!(f, "{s}")
    }
}

/// A localized bifurcation point in the (gamma, rho) plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecialPoint {
    pub kind: SpecialPointKind,
    pub gamma: f64,
    pub rho: f64,
    pub state: State2,
    /// Auxiliary scalars such as omega, l1, period, multiplier.
    pub aux: BTreeMap<String, f64>,
}

impl SpecialPoint {
    pub fn location(&self, which: ActiveParam) -> f64 {
        match which {
            ActiveParam::Gamma => self.gamma,
            ActiveParam::Rho => self.rho,
        }
    }
}

/// One accepted point of an equilibrium branch.
#[derive(Debug, Clone, Serialize)]
pub struct BranchPoint {
    pub state: State2,
    pub active_param_value: f64,
    /// det J, vanishing at folds and branch points.
    pub test_fold: f64,
    /// trace J, vanishing at Hopf points (det J > 0) and neutral saddles.
    pub test_hopf: f64,
    pub eigenvalues: [Complex64; 2],
    /// Cumulative scaled arclength from the branch start.
    pub arclength: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    pub special: Vec<SpecialPoint>,
    pub active_param: ActiveParam,
    pub frozen_param_value: f64,
    /// Set when the run ended early by step underflow.
    pub truncated: bool,
}

/// Test function selector for [`localize_special`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    Fold,
    Hopf,
    Branch,
}

/// Hopf angular frequency omega = sqrt(det J) for a planar Jacobian with
/// zero trace. Errors when det J <= 0 (the point is BT-degenerate).
pub fn hopf_frequency(jac: &model::Mat2) -> Result<f64> {
    let det = det2(jac);
    if det <= 0.0 {
        return Err(Error::DegenerateHopf { det });
    }
    Ok(det.sqrt())
}

// ---------------------------------------------------------------------------
// shared pseudo-arclength machinery
// ---------------------------------------------------------------------------

pub(crate) mod palc {
    use super::*;
    use crate::numerics::solve_linear;

    /// A continuation problem with n equations in n+1 unknowns.
    /// Unknown vectors are always unscaled; `scales` makes components
    /// comparable inside the driver.
    pub trait Problem {
        fn n_eq(&self) -> usize;
        fn scales(&self) -> &[f64];
        fn residual(&mut self, z: &[f64], out: &mut [f64]) -> Result<()>;
        /// Unscaled Jacobian, n_eq rows by n_eq+1 columns.
        fn jacobian(&mut self, z: &[f64]) -> Result<Matrix>;
        /// Post-corrector acceptance check (e.g. cycle amplitude guard).
        fn validate(&mut self, _z: &[f64]) -> Result<bool> {
            Ok(true)
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub struct Settings {
        pub h0: f64,
        pub hmax: f64,
        pub hmin: f64,
        pub tol: f64,
        pub max_corrector_iters: usize,
        pub grow_after: usize,
        pub max_points: usize,
    }

    impl Default for Settings {
        fn default() -> Self {
            Settings {
                h0: 1e-3,
                hmax: 1e-2,
                hmin: 1e-11,
                tol: 1e-11,
                max_corrector_iters: 12,
                grow_after: 4,
                max_points: 100_000,
            }
        }
    }

    pub fn to_scaled(z: &[f64], sc: &[f64]) -> Vec<f64> {
        z.iter().zip(sc).map(|(v, s)| v / s).collect()
    }

    pub fn from_scaled(zs: &[f64], sc: &[f64]) -> Vec<f64> {
        zs.iter().zip(sc).map(|(v, s)| v * s).collect()
    }

    /// Column-scaled Jacobian: d residual / d (z_j / s_j).
    fn scaled_jacobian<P: Problem>(prob: &mut P, z: &[f64]) -> Result<Matrix> {
        let sc = prob.scales().to_vec();
        let mut j = prob.jacobian(z)?;
        for r in 0..j.rows() {
            for c in 0..j.cols() {
                j[(r, c)] *= sc[c];
            }
        }
        Ok(j)
    }

    /// Unit tangent of the solution curve in scaled coordinates, oriented
    /// along `orient` when provided.
    pub fn tangent<P: Problem>(prob: &mut P, z: &[f64], orient: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = prob.n_eq();
        let j = scaled_jacobian(prob, z)?;
        // border with each unit vector until the system is solvable
        let mut best: Option<Vec<f64>> = None;
        for border in (0..=n).rev() {
            let mut m = Matrix::zeros(n + 1, n + 1);
            for r in 0..n {
                for c in 0..=n {
                    m[(r, c)] = j[(r, c)];
                }
            }
            m[(n, border)] = 1.0;
            let mut rhs = vec![0.0; n + 1];
            rhs[n] = 1.0;
            if let Ok(t) = solve_linear(&m, &rhs) {
                let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 && t.iter().all(|v| v.is_finite()) {
                    best = Some(t.iter().map(|v| v / norm).collect());
                    break;
                }
            }
        }
        let mut t = best.ok_or(Error::SingularMatrix { pivot: 0.0 })?;
        if let Some(dir) = orient {
            let dot: f64 = t.iter().zip(dir).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                for v in t.iter_mut() {
                    *v = -*v;
                }
            }
        }
        Ok(t)
    }

    /// Newton corrector on the bordered system; `zs_pred` and `dir` are in
    /// scaled coordinates. Returns the corrected unscaled point.
    pub fn correct<P: Problem>(
        prob: &mut P,
        zs_pred: &[f64],
        dir: &[f64],
        settings: &Settings,
    ) -> Result<Option<Vec<f64>>> {
        let n = prob.n_eq();
        let sc = prob.scales().to_vec();
        let mut zs = zs_pred.to_vec();
        let mut res = vec![0.0; n];
        for _ in 0..settings.max_corrector_iters {
            let z = from_scaled(&zs, &sc);
            if prob.residual(&z, &mut res).is_err() {
                return Ok(None);
            }
            if !res.iter().all(|v| v.is_finite()) {
                return Ok(None);
            }
            let con: f64 = zs.iter().zip(zs_pred).zip(dir).map(|((a, b), t)| (a - b) * t).sum();
            let rnorm = res.iter().fold(con.abs(), |m, v| m.max(v.abs()));
            if rnorm <= settings.tol {
                return Ok(Some(z));
            }
            let j = match scaled_jacobian(prob, &z) {
                Ok(j) => j,
                Err(_) => return Ok(None),
            };
            let mut m = Matrix::zeros(n + 1, n + 1);
            for r in 0..n {
                for c in 0..=n {
                    m[(r, c)] = j[(r, c)];
                }
            }
            for c in 0..=n {
                m[(n, c)] = dir[c];
            }
            let mut rhs: Vec<f64> = res.iter().map(|v| -v).collect();
            rhs.push(-con);
            let step = match solve_linear(&m, &rhs) {
                Ok(s) => s,
                Err(_) => return Ok(None),
            };
            if !step.iter().all(|v| v.is_finite()) {
                return Ok(None);
            }
            for (v, d) in zs.iter_mut().zip(&step) {
                *v += d;
            }
        }
        // final check
        let z = from_scaled(&zs, &sc);
        if prob.residual(&z, &mut res).is_ok() {
            let rnorm = res.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if rnorm <= settings.tol * 10.0 {
                return Ok(Some(z));
            }
        }
        Ok(None)
    }

    /// Re-solves the problem with the unknown `fixed_idx` held at `value`
    /// (used to land exactly on a range boundary).
    pub fn correct_fixed<P: Problem>(
        prob: &mut P,
        z_start: &[f64],
        fixed_idx: usize,
        value: f64,
        settings: &Settings,
    ) -> Result<Option<Vec<f64>>> {
        let sc = prob.scales().to_vec();
        let mut dir = vec![0.0; z_start.len()];
        dir[fixed_idx] = 1.0;
        let mut zs = to_scaled(z_start, &sc);
        zs[fixed_idx] = value / sc[fixed_idx];
        correct(prob, &zs, &dir, settings)
    }
}

// ---------------------------------------------------------------------------
// equilibrium continuation
// ---------------------------------------------------------------------------

/// Equilibria of the reduced system as a curve in (S, I, active param).
pub(crate) struct EquilibriumProblem {
    pub base: Params,
    pub active: ActiveParam,
    scales: [f64; 3],
}

impl EquilibriumProblem {
    pub fn new(base: Params, active: ActiveParam) -> Self {
        EquilibriumProblem { base, active, scales: [1000.0, 40.0, 1.0] }
    }

    pub fn params_at(&self, p_active: f64) -> Params {
        self.base.with_active(self.active, p_active)
    }
}

impl palc::Problem for EquilibriumProblem {
    fn n_eq(&self) -> usize {
        2
    }

    fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn residual(&mut self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.params_at(z[2]);
        let f = model::rhs2([z[0], z[1]], &p);
        out[0] = f[0];
        out[1] = f[1];
        Ok(())
    }

    fn jacobian(&mut self, z: &[f64]) -> Result<Matrix> {
        let p = self.params_at(z[2]);
        let j = jacobian_reduced([z[0], z[1]], &p);
        let fp = model::rhs_param_deriv([z[0], z[1]], &p, self.active);
        Ok(Matrix::from_rows(&[
            &[j[0][0], j[0][1], fp[0]],
            &[j[1][0], j[1][1], fp[1]],
        ]))
    }
}

fn branch_point_at(prob: &EquilibriumProblem, z: &[f64], arclength: f64) -> BranchPoint {
    let p = prob.params_at(z[2]);
    let j = jacobian_reduced([z[0], z[1]], &p);
    BranchPoint {
        state: [z[0], z[1]],
        active_param_value: z[2],
        test_fold: det2(&j),
        test_hopf: trace2(&j),
        eigenvalues: eig2(j[0][0], j[0][1], j[1][0], j[1][1]),
        arclength,
    }
}

/// Continues an equilibrium in the chosen parameter across `range` by
/// pseudo-arclength, recording det J and trace J at every point and
/// localizing LP/HB/BP events. `h0` and `hmax` are scaled arclength steps.
pub fn continue_equilibrium(
    p: &Params,
    start: &EquilibriumPoint,
    active: ActiveParam,
    range: (f64, f64),
    h0: f64,
    hmax: f64,
) -> Result<Branch> {
    p.validate()?;
    let start_state = start.planar();
    let f = model::rhs2(start_state, p);
    if f[0].abs().max(f[1].abs()) > BRANCH_RESIDUAL_TOL {
        return Err(Error::CorrectorFailedAtStart);
    }
    let frozen = match active {
        ActiveParam::Gamma => p.rho,
        ActiveParam::Rho => p.gamma,
    };
    let (lo, hi) = (range.0.min(range.1), range.0.max(range.1));
    let p0 = p.active(active);

    let mut prob = EquilibriumProblem::new(*p, active);
    let settings = palc::Settings { h0, hmax, ..Default::default() };

    // march from the start in both directions, then stitch
    let fwd = march_equilibrium(&mut prob, [start_state[0], start_state[1], p0], (lo, hi), &settings, 1.0)?;
    let bwd = march_equilibrium(&mut prob, [start_state[0], start_state[1], p0], (lo, hi), &settings, -1.0)?;

    // bwd is ordered away from the start; reverse and drop its duplicate start
    let mut points: Vec<[f64; 3]> = bwd.points.into_iter().rev().collect();
    points.pop();
    points.extend(fwd.points);

    // arclength accumulated over the stitched order
    let sc = [1000.0, 40.0, 1.0];
    let mut arc = 0.0;
    let mut branch_points = Vec::with_capacity(points.len());
    for (k, z) in points.iter().enumerate() {
        if k > 0 {
            let prev = &points[k - 1];
            arc += (0..3)
                .map(|j| ((z[j] - prev[j]) / sc[j]).powi(2))
                .sum::<f64>()
                .sqrt();
        }
        branch_points.push(branch_point_at(&prob, z, arc));
    }

    let mut branch = Branch {
        points: branch_points,
        special: Vec::new(),
        active_param: active,
        frozen_param_value: frozen,
        truncated: fwd.truncated || bwd.truncated,
    };
    detect_codim1(&mut prob, &mut branch)?;
    Ok(branch)
}

struct March {
    points: Vec<[f64; 3]>,
    truncated: bool,
}

fn march_equilibrium(
    prob: &mut EquilibriumProblem,
    z0: [f64; 3],
    range: (f64, f64),
    settings: &palc::Settings,
    direction: f64,
) -> Result<March> {
    use palc::Problem as _;
    let sc = prob.scales().to_vec();
    let mut points: Vec<[f64; 3]> = vec![z0];
    let mut truncated = false;

    // initial tangent oriented toward the requested parameter direction
    let mut orient = vec![0.0; 3];
    orient[2] = direction;
    let mut tangent = match palc::tangent(prob, &z0, Some(&orient)) {
        Ok(t) => t,
        Err(_) => return Err(Error::CorrectorFailedAtStart),
    };
    // a fold start would give a near-zero parameter component; keep it anyway
    if tangent[2].abs() < 1e-12 {
        tangent[2] = 0.0;
    }

    let mut zs = palc::to_scaled(&z0, &sc);
    let mut h = settings.h0;
    let mut successes = 0;
    let mut first_step = true;

    for _ in 0..settings.max_points {
        let pred: Vec<f64> = zs.iter().zip(&tangent).map(|(a, t)| a + h * t).collect();
        match palc::correct(prob, &pred, &tangent, settings)? {
            Some(z_new) => {
                let zs_new = palc::to_scaled(&z_new, &sc);
                // secant direction for the next prediction
                let mut secant: Vec<f64> =
                    zs_new.iter().zip(&zs).map(|(a, b)| a - b).collect();
                let norm = secant.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in secant.iter_mut() {
                        *v /= norm;
                    }
                }
                // guard against doubling back
                let dot: f64 = secant.iter().zip(&tangent).map(|(a, b)| a * b).sum();
                if !first_step && dot < 0.0 {
                    h *= 0.5;
                    successes = 0;
                    if h < settings.hmin {
                        truncated = true;
                        break;
                    }
                    continue;
                }
                first_step = false;
                let p_new = z_new[2];
                points.push([z_new[0], z_new[1], p_new]);
                zs = zs_new;
                tangent = secant;
                successes += 1;
                if successes >= settings.grow_after {
                    h = (h * 1.3).min(settings.hmax);
                    successes = 0;
                }
                if p_new < range.0 || p_new > range.1 {
                    // land exactly on the boundary and stop
                    let bound = if p_new < range.0 { range.0 } else { range.1 };
                    if let Some(zb) = palc::correct_fixed(prob, &z_new, 2, bound, settings)? {
                        *points.last_mut().unwrap() = [zb[0], zb[1], zb[2]];
                    }
                    break;
                }
                // leaving the physical quadrant ends the branch cleanly
                if z_new[0] < -1e-6 || z_new[1] < -1.0 {
                    break;
                }
            }
            None => {
                if points.len() == 1 && h <= settings.h0 * 0.26 {
                    return Err(Error::CorrectorFailedAtStart);
                }
                h *= 0.5;
                successes = 0;
                if h < settings.hmin {
                    truncated = true;
                    break;
                }
            }
        }
    }
    Ok(March { points, truncated })
}

/// Scans consecutive branch points for test-function sign changes and
/// localizes each event.
fn detect_codim1(prob: &mut EquilibriumProblem, branch: &mut Branch) -> Result<()> {
    let pts = &branch.points;
    let mut found: Vec<SpecialPoint> = Vec::new();
    for k in 1..pts.len() {
        let (a, b) = (&pts[k - 1], &pts[k]);
        if a.test_fold * b.test_fold < 0.0 {
            // fold or branch point: distinguish by how the parameter moves
            let kind = classify_det_crossing(prob, a, b)?;
            let test = if kind == SpecialPointKind::BP { TestFunction::Branch } else { TestFunction::Fold };
            if let Ok(mut sp) = localize_between(prob, a, b, test) {
                sp.kind = kind;
                found.push(sp);
            }
        }
        if a.test_hopf * b.test_hopf < 0.0 && a.test_fold > 0.0 && b.test_fold > 0.0 {
            if let Ok(sp) = localize_between(prob, a, b, TestFunction::Hopf) {
                found.push(sp);
            }
        }
    }
    branch.special = found;
    Ok(())
}

/// A det-J crossing is a fold when the branch turns around in the
/// parameter, and a branch point when the parameter keeps moving while the
/// bordered matrix goes singular.
fn classify_det_crossing(
    prob: &mut EquilibriumProblem,
    a: &BranchPoint,
    b: &BranchPoint,
) -> Result<SpecialPointKind> {
    let za = [a.state[0], a.state[1], a.active_param_value];
    let zb = [b.state[0], b.state[1], b.active_param_value];
    let ta = palc::tangent(prob, &za, None)?;
    let tb = palc::tangent(prob, &zb, Some(&ta))?;
    if ta[2] * tb[2] < 0.0 {
        return Ok(SpecialPointKind::LP);
    }
    // parameter component keeps its sign: transcritical crossing
    Ok(SpecialPointKind::BP)
}

/// Localizes a test-function zero between two bracketing branch points:
/// bisection in arclength with perpendicular correction, then a Newton
/// polish on the augmented defining system.
pub fn localize_special(
    p: &Params,
    active: ActiveParam,
    segment: (&BranchPoint, &BranchPoint),
    test: TestFunction,
) -> Result<SpecialPoint> {
    let mut prob = EquilibriumProblem::new(*p, active);
    localize_between(&mut prob, segment.0, segment.1, test)
}

fn test_value(prob: &EquilibriumProblem, z: &[f64], test: TestFunction) -> f64 {
    let p = prob.params_at(z[2]);
    let j = jacobian_reduced([z[0], z[1]], &p);
    match test {
        TestFunction::Fold | TestFunction::Branch => det2(&j),
        TestFunction::Hopf => trace2(&j),
    }
}

fn localize_between(
    prob: &mut EquilibriumProblem,
    a: &BranchPoint,
    b: &BranchPoint,
    test: TestFunction,
) -> Result<SpecialPoint> {
    let sc = [1000.0, 40.0, 1.0];
    let settings = palc::Settings::default();
    let mut z_lo = [a.state[0], a.state[1], a.active_param_value];
    let mut z_hi = [b.state[0], b.state[1], b.active_param_value];
    let mut t_lo = test_value(prob, &z_lo, test);
    let mut t_hi = test_value(prob, &z_hi, test);
    if t_lo * t_hi > 0.0 {
        return Err(Error::NoSignChange);
    }

    // secant direction in scaled space for perpendicular correction
    let dir_raw: Vec<f64> = (0..3).map(|j| (z_hi[j] - z_lo[j]) / sc[j]).collect();
    let dn = dir_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir: Vec<f64> = if dn > 0.0 { dir_raw.iter().map(|v| v / dn).collect() } else { vec![0.0, 0.0, 1.0] };

    let mut best = z_lo;
    for _ in 0..70 {
        let denom = t_hi - t_lo;
        let mut s = if denom.abs() > 1e-300 { (-t_lo / denom).clamp(0.1, 0.9) } else { 0.5 };
        if !s.is_finite() {
            s = 0.5;
        }
        let zs_mid: Vec<f64> = (0..3)
            .map(|j| (z_lo[j] + s * (z_hi[j] - z_lo[j])) / sc[j])
            .collect();
        let corrected = palc::correct(prob, &zs_mid, &dir, &settings)?;
        let z_mid = match corrected {
            Some(z) => [z[0], z[1], z[2]],
            None => {
                let z = palc::from_scaled(&zs_mid, &sc);
                [z[0], z[1], z[2]]
            }
        };
        let t_mid = test_value(prob, &z_mid, test);
        best = z_mid;
        if t_lo * t_mid <= 0.0 {
            z_hi = z_mid;
            t_hi = t_mid;
        } else {
            z_lo = z_mid;
            t_lo = t_mid;
        }
        if (z_hi[2] - z_lo[2]).abs() <= 1e-13 * (1.0 + z_hi[2].abs()) && t_mid.abs() < 1e-12 {
            break;
        }
    }

    // Newton polish on the augmented defining system (fold/Hopf only; the
    // augmented system is singular at a transcritical point)
    let polished = match test {
        TestFunction::Fold => polish_augmented(prob, best, false),
        TestFunction::Hopf => polish_augmented(prob, best, true),
        TestFunction::Branch => None,
    };
    let z = polished.unwrap_or(best);

    let pfull = prob.params_at(z[2]);
    let j = jacobian_reduced([z[0], z[1]], &pfull);
    let mut aux = BTreeMap::new();
    let kind = match test {
        TestFunction::Fold => SpecialPointKind::LP,
        TestFunction::Branch => SpecialPointKind::BP,
        TestFunction::Hopf => {
            let omega = hopf_frequency(&j)?;
            aux.insert("omega".to_string(), omega);
            SpecialPointKind::HB
        }
    };
    aux.insert("det".to_string(), det2(&j));
    aux.insert("trace".to_string(), trace2(&j));
    Ok(SpecialPoint { kind, gamma: pfull.gamma, rho: pfull.rho, state: [z[0], z[1]], aux })
}

/// Newton on {rhs = 0, det J = 0} (fold) or {rhs = 0, trace J = 0} (Hopf)
/// in (S, I, p) with analytic gradients via Jacobi's formula.
fn polish_augmented(prob: &EquilibriumProblem, z0: [f64; 3], hopf: bool) -> Option<[f64; 3]> {
    let sc = [1000.0, 40.0, 1.0];
    let mut z = z0;
    for _ in 0..30 {
        let p = prob.params_at(z[2]);
        let x = [z[0], z[1]];
        let f = model::rhs2(x, &p);
        let j = jacobian_reduced(x, &p);
        let test = if hopf { trace2(&j) } else { det2(&j) };
        let rn = f[0].abs().max(f[1].abs()).max(test.abs());
        if rn <= 1e-13 {
            return Some(z);
        }
        let fp = model::rhs_param_deriv(x, &p, prob.active);
        let d = model::jacobian_derivs(x, &p);
        let dp = match prob.active {
            ActiveParam::Gamma => d.d_gamma,
            ActiveParam::Rho => d.d_rho,
        };
        let grad = |dj: &model::Mat2| {
            if hopf {
                dj[0][0] + dj[1][1]
            } else {
                // Jacobi's formula for a 2x2 determinant
                j[1][1] * dj[0][0] + j[0][0] * dj[1][1] - j[1][0] * dj[0][1] - j[0][1] * dj[1][0]
            }
        };
        let mut m = Matrix::from_rows(&[
            &[j[0][0], j[0][1], fp[0]],
            &[j[1][0], j[1][1], fp[1]],
            &[grad(&d.d_s), grad(&d.d_i), grad(&dp)],
        ]);
        // scale columns for conditioning
        for r in 0..3 {
            for c in 0..3 {
                m[(r, c)] *= sc[c];
            }
        }
        let rhs = vec![-f[0], -f[1], -test];
        let step = crate::numerics::solve_linear(&m, &rhs).ok()?;
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        for k in 0..3 {
            z[k] += step[k] * sc[k];
        }
    }
    let p = prob.params_at(z[2]);
    let f = model::rhs2([z[0], z[1]], &p);
    let j = jacobian_reduced([z[0], z[1]], &p);
    let test = if hopf { trace2(&j) } else { det2(&j) };
    if f[0].abs().max(f[1].abs()).max(test.abs()) <= 1e-10 {
        Some(z)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::endemic_equilibria;

    fn branch_rho01() -> Branch {
        let p = Params::baseline(0.3, 0.1);
        let eq = endemic_equilibria(&p).unwrap();
        let e1 = eq.last().unwrap();
        continue_equilibrium(&p, e1, ActiveParam::Gamma, (0.3, 0.42), 1e-3, 1e-2).unwrap()
    }

    #[test]
    fn branch_residuals_below_tolerance() {
        let b = branch_rho01();
        assert!(b.points.len() > 20);
        for pt in &b.points {
            let p = Params::baseline(pt.active_param_value, 0.1);
            let f = model::rhs2(pt.state, &p);
            assert!(f[0].abs().max(f[1].abs()) <= BRANCH_RESIDUAL_TOL);
        }
    }

    #[test]
    fn finds_fold_and_hopf_at_rho_01() {
        let b = branch_rho01();
        let lp = b.special.iter().find(|s| s.kind == SpecialPointKind::LP).expect("LP found");
        assert!(
            (lp.gamma - 0.356902).abs() < 1e-4,
            "LP at gamma {} (expected 0.356902)",
            lp.gamma
        );
        let hb = b.special.iter().find(|s| s.kind == SpecialPointKind::HB).expect("HB found");
        assert!(
            (hb.gamma - 0.349638).abs() < 1e-4,
            "HB at gamma {} (expected 0.349638)",
            hb.gamma
        );

        // defining conditions at the localized points
        let pl = Params::baseline(lp.gamma, 0.1);
        let jl = jacobian_reduced(lp.state, &pl);
        assert!(det2(&jl).abs() <= 1e-10);
        assert!(trace2(&jl).abs() > 1e-3, "away from BT the fold has nonzero trace");
        let ph = Params::baseline(hb.gamma, 0.1);
        let jh = jacobian_reduced(hb.state, &ph);
        assert!(trace2(&jh).abs() <= 1e-10);
        assert!(det2(&jh) > 0.0);
        assert!(hb.aux["omega"] > 0.0);
        // eigenvalues purely imaginary within 1e-8
        let ev = eig2(jh[0][0], jh[0][1], jh[1][0], jh[1][1]);
        assert!(ev.iter().all(|e| e.re.abs() < 1e-8 && e.im.abs() > 0.0));
    }

    #[test]
    fn no_unflagged_sign_changes() {
        // every test-function sign change has a localized special point in
        // the neighborhood of the bracketing segment (at a fold the branch
        // turns around, so the localized parameter can exceed the bracket)
        let b = branch_rho01();
        let seg_dist = |s: &SpecialPoint, a: &BranchPoint, c: &BranchPoint| {
            let mid = [
                0.5 * (a.state[0] + c.state[0]),
                0.5 * (a.state[1] + c.state[1]),
                0.5 * (a.active_param_value + c.active_param_value),
            ];
            let len = (((a.state[0] - c.state[0]) / 1000.0).powi(2)
                + ((a.state[1] - c.state[1]) / 40.0).powi(2)
                + (a.active_param_value - c.active_param_value).powi(2))
            .sqrt();
            let d = (((s.state[0] - mid[0]) / 1000.0).powi(2)
                + ((s.state[1] - mid[1]) / 40.0).powi(2)
                + (s.gamma - mid[2]).powi(2))
            .sqrt();
            d <= 2.0 * len + 1e-6
        };
        for k in 1..b.points.len() {
            let (a, c) = (&b.points[k - 1], &b.points[k]);
            if a.test_fold * c.test_fold < 0.0 {
                assert!(
                    b.special.iter().any(|s| seg_dist(s, a, c)),
                    "fold-test sign change without a localized point"
                );
            }
            if a.test_hopf * c.test_hopf < 0.0 && a.test_fold > 0.0 && c.test_fold > 0.0 {
                assert!(
                    b.special.iter().any(|s| seg_dist(s, a, c)),
                    "hopf-test sign change without a localized point"
                );
            }
        }
    }

    #[test]
    fn branch_point_on_disease_free_branch() {
        let gamma0 = 4969.0 / 31000.0;
        for rho in [0.01, 0.1, 0.25] {
            let p = Params::baseline(0.1, rho);
            let e0 = model::disease_free_equilibrium(&p);
            let b = continue_equilibrium(&p, &e0, ActiveParam::Gamma, (0.1, 0.3), 1e-3, 1e-2)
                .unwrap();
            let bp = b
                .special
                .iter()
                .find(|s| s.kind == SpecialPointKind::BP)
                .unwrap_or_else(|| panic!("BP found at rho={rho}"));
            assert!(
                (bp.gamma - gamma0).abs() < 1e-6,
                "BP at gamma {} (expected {gamma0}) for rho={rho}",
                bp.gamma
            );
        }
    }

    #[test]
    fn direction_reversal_reproduces_special_points() {
        let p = Params::baseline(0.42, 0.1);
        // start from the high-gamma side instead
        let pstart = Params::baseline(0.33, 0.1);
        let eq = endemic_equilibria(&pstart).unwrap();
        let e1 = eq.last().unwrap();
        let b1 = continue_equilibrium(&pstart, e1, ActiveParam::Gamma, (0.3, 0.42), 1e-3, 1e-2)
            .unwrap();
        // same sweep with halved initial step and from another seed point
        let pstart2 = Params::baseline(0.34, 0.1);
        let eq2 = endemic_equilibria(&pstart2).unwrap();
        let e12 = eq2.last().unwrap();
        let b2 = continue_equilibrium(&pstart2, e12, ActiveParam::Gamma, (0.3, 0.42), 5e-4, 5e-3)
            .unwrap();
        for kind in [SpecialPointKind::LP, SpecialPointKind::HB] {
            let g1 = b1.special.iter().find(|s| s.kind == kind).unwrap().gamma;
            let g2 = b2.special.iter().find(|s| s.kind == kind).unwrap().gamma;
            assert!((g1 - g2).abs() < 1e-7, "{kind} reproducibility: {g1} vs {g2}");
        }
        let _ = p;
    }

    #[test]
    fn hopf_frequency_rotation() {
        let j = [[0.0, -2.0], [2.0, 0.0]];
        assert!((hopf_frequency(&j).unwrap() - 2.0).abs() < 1e-14);
        let j_bad = [[0.1, 1.0], [1.0, -0.1]];
        assert!(hopf_frequency(&j_bad).is_err());
    }

    #[test]
    fn localize_requires_sign_change() {
        let b = branch_rho01();
        let a = &b.points[0];
        let c = &b.points[1];
        if a.test_hopf * c.test_hopf > 0.0 {
            let p = Params::baseline(0.3, 0.1);
            assert!(matches!(
                localize_special(&p, ActiveParam::Gamma, (a, c), TestFunction::Hopf),
                Err(Error::NoSignChange)
            ));
        }
    }
}

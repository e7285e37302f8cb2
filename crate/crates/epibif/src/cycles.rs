//! Continuation of periodic orbits born at Hopf points: shooting solver,
//! Floquet multipliers, saddle-node-of-cycles localization, and a
//! homoclinic-orbit approximation by period blow-up.
//!
//! Cycles are solved by single shooting with the phase condition I' = 0 at
//! mesh point zero, escalating to 4-segment multiple shooting once the
//! period grows past [`MULTI_SEGMENT_PERIOD`] (near a homoclinic the
//! nontrivial multiplier grows exponentially with the period and a single
//! monodromy sweep loses the trivial one). The determinant of the monodromy
//! is also tracked through the Liouville integral of trace J along the
//! orbit, which keeps the trivial multiplier accurate even when the
//! nontrivial one is enormous.

use crate::contin::{palc, SpecialPoint, SpecialPointKind};
use crate::error::{Error, Result};
use crate::model::{self, det2, jacobian_reduced, ActiveParam, Mat2, Params, State2};
use crate::numerics::{eig2, lu_solve_in_place, Matrix};
use crate::odeflow::{Dopri5, IntegratorOpts, STATE_SCALE};
use num_complex::Complex64;
use serde::Serialize;
use std::collections::BTreeMap;

/// Period at which a cycle is flagged as a homoclinic proxy.
pub const PERIOD_BLOWUP_THRESHOLD: f64 = 3000.0;
/// Beyond this period the shooting problem uses 4 segments.
const MULTI_SEGMENT_PERIOD: f64 = 800.0;
/// Scale of the period unknown in arclength space.
const T_SCALE: f64 = 1000.0;
/// Scaled orbit amplitude below which a "cycle" is a collapsed equilibrium.
const MIN_AMPLITUDE: f64 = 1e-4;
/// |multiplier modulus - 1| band reported as semistable.
const SEMI_BAND: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CycleStability {
    Stable,
    Unstable,
    /// Nontrivial multiplier within [`SEMI_BAND`] of modulus one.
    Semistable,
}

/// A converged periodic orbit.
#[derive(Debug, Clone, Serialize)]
pub struct Cycle {
    /// mesh_n + 1 states at uniform phase; first and last coincide within
    /// the shooting tolerance.
    pub mesh: Vec<State2>,
    pub period: f64,
    pub params: Params,
    /// [trivial (nearest 1), nontrivial].
    pub multipliers: [Complex64; 2],
    pub stability: CycleStability,
}

impl Cycle {
    pub fn nontrivial_multiplier(&self) -> Complex64 {
        self.multipliers[1]
    }

    /// Scaled max distance of the mesh from its first point.
    pub fn amplitude(&self) -> f64 {
        let x0 = self.mesh[0];
        self.mesh
            .iter()
            .map(|x| {
                let ds = (x[0] - x0[0]) / STATE_SCALE[0];
                let di = (x[1] - x0[1]) / STATE_SCALE[1];
                (ds * ds + di * di).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleBranch {
    /// Cycles in traversal order (the active parameter folds back at an LPC).
    pub cycles: Vec<Cycle>,
    pub active: ActiveParam,
    pub special: Vec<SpecialPoint>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CycleOpts {
    pub mesh_n: usize,
    /// Scaled shooting residual tolerance.
    pub shoot_tol: f64,
    pub h0: f64,
    pub hmax: f64,
    pub max_cycles: usize,
    pub period_blowup_threshold: f64,
}

impl Default for CycleOpts {
    fn default() -> Self {
        CycleOpts {
            mesh_n: 100,
            shoot_tol: 1e-8,
            h0: 5e-3,
            hmax: 0.25,
            max_cycles: 3000,
            period_blowup_threshold: PERIOD_BLOWUP_THRESHOLD,
        }
    }
}

fn integ_opts(shoot_tol: f64) -> IntegratorOpts {
    let rel = (shoot_tol * 1e-2).clamp(1e-13, 1e-6);
    IntegratorOpts { rel_tol: rel, abs_tol: rel, max_steps: 50_000_000 }
}

// ---------------------------------------------------------------------------
// variational flow over one shooting segment
// ---------------------------------------------------------------------------

struct Segment {
    x_end: State2,
    monodromy: Mat2,
    dparam: State2,
    /// Liouville integral of trace J along the segment.
    log_det: f64,
}

/// Integrates state, monodromy, parameter sensitivity, and the Liouville
/// integral over a time span `tau`.
fn flow_variational(
    p: &Params,
    active: ActiveParam,
    x0: State2,
    tau: f64,
    opts: &IntegratorOpts,
) -> Result<Segment> {
    let pc = *p;
    let f = move |_t: f64, y: &[f64; 9]| {
        let x = [y[0], y[1]];
        let d = model::rhs2(x, &pc);
        let j = jacobian_reduced(x, &pc);
        let fp = model::rhs_param_deriv(x, &pc, active);
        [
            d[0],
            d[1],
            j[0][0] * y[2] + j[0][1] * y[4],
            j[0][0] * y[3] + j[0][1] * y[5],
            j[1][0] * y[2] + j[1][1] * y[4],
            j[1][0] * y[3] + j[1][1] * y[5],
            j[0][0] * y[6] + j[0][1] * y[7] + fp[0],
            j[1][0] * y[6] + j[1][1] * y[7] + fp[1],
            j[0][0] + j[1][1],
        ]
    };
    let y0 = [x0[0], x0[1], 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let mut stepper = Dopri5::new(f, 0.0, y0, *opts);
    while stepper.t < tau {
        stepper.step(tau)?;
    }
    // the last step overshoots to exactly tau via dense output only when
    // limited; Dopri5::step caps h at the limit so stepper.t == tau here
    let y = stepper.y;
    Ok(Segment {
        x_end: [y[0], y[1]],
        monodromy: [[y[2], y[3]], [y[4], y[5]]],
        dparam: [y[6], y[7]],
        log_det: y[8],
    })
}

/// Plain flow over `tau` returning dense samples at `n + 1` uniform times.
fn flow_samples(p: &Params, x0: State2, tau: f64, n: usize, opts: &IntegratorOpts) -> Result<Vec<State2>> {
    let pc = *p;
    let f = move |_t: f64, y: &State2| model::rhs2(*y, &pc);
    let mut stepper = Dopri5::new(f, 0.0, x0, *opts);
    let mut out = Vec::with_capacity(n + 1);
    out.push(x0);
    let mut next = 1;
    while stepper.t < tau && next <= n {
        let step = stepper.step(tau)?;
        while next <= n {
            let t_target = tau * next as f64 / n as f64;
            if t_target > step.t_new + 1e-300 {
                break;
            }
            out.push(step.dense(t_target.min(step.t_new)));
            next += 1;
        }
    }
    while out.len() < n + 1 {
        out.push(stepper.y);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// shooting problem (m segments): unknowns [x_0.., x_{m-1}, T, p]
// ---------------------------------------------------------------------------

struct ShootProblem {
    base: Params,
    active: ActiveParam,
    segments: usize,
    opts: IntegratorOpts,
    scales: Vec<f64>,
    cache_z: Vec<f64>,
    cache: Vec<Segment>,
}

impl ShootProblem {
    fn new(base: Params, active: ActiveParam, segments: usize, shoot_tol: f64) -> Self {
        let mut scales = Vec::with_capacity(2 * segments + 2);
        for _ in 0..segments {
            scales.push(STATE_SCALE[0]);
            scales.push(STATE_SCALE[1]);
        }
        scales.push(T_SCALE);
        scales.push(1.0);
        ShootProblem {
            base,
            active,
            segments,
            opts: integ_opts(shoot_tol),
            scales,
            cache_z: Vec::new(),
            cache: Vec::new(),
        }
    }

    fn params_at(&self, p_active: f64) -> Params {
        self.base.with_active(self.active, p_active)
    }

    fn eval(&mut self, z: &[f64]) -> Result<&[Segment]> {
        if self.cache_z == z {
            return Ok(&self.cache);
        }
        let m = self.segments;
        let period = z[2 * m];
        if !(period.is_finite() && period > 1.0) {
            return Err(Error::NonFinite("cycle period"));
        }
        let p = self.params_at(z[2 * m + 1]);
        p.validate()?;
        let tau = period / m as f64;
        let mut segs = Vec::with_capacity(m);
        for k in 0..m {
            segs.push(flow_variational(&p, self.active, [z[2 * k], z[2 * k + 1]], tau, &self.opts)?);
        }
        self.cache_z = z.to_vec();
        self.cache = segs;
        Ok(&self.cache)
    }

    /// Monodromy eigenvalues [trivial, nontrivial] with a Liouville
    /// correction for the small one when the large one dominates.
    fn multipliers(&mut self, z: &[f64]) -> Result<[Complex64; 2]> {
        let m = self.segments;
        let segs = self.eval(z)?;
        let mut total: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
        let mut log_det = 0.0;
        for seg in segs.iter().take(m) {
            let a = seg.monodromy;
            total = [
                [
                    a[0][0] * total[0][0] + a[0][1] * total[1][0],
                    a[0][0] * total[0][1] + a[0][1] * total[1][1],
                ],
                [
                    a[1][0] * total[0][0] + a[1][1] * total[1][0],
                    a[1][0] * total[0][1] + a[1][1] * total[1][1],
                ],
            ];
            log_det += seg.log_det;
        }
        let ev = eig2(total[0][0], total[0][1], total[1][0], total[1][1]);
        let (big, small) = if ev[0].norm() >= ev[1].norm() { (ev[0], ev[1]) } else { (ev[1], ev[0]) };
        let small = if big.norm() > 1e6 && big.im == 0.0 {
            Complex64::new(log_det.exp() / big.re, 0.0)
        } else {
            small
        };
        // trivial first
        if (small - 1.0).norm() <= (big - 1.0).norm() {
            Ok([small, big])
        } else {
            Ok([big, small])
        }
    }
}

impl palc::Problem for ShootProblem {
    fn n_eq(&self) -> usize {
        2 * self.segments + 1
    }

    fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn residual(&mut self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.segments;
        let p = self.params_at(z[2 * m + 1]);
        let segs = self.eval(z)?;
        for k in 0..m {
            let nxt = (k + 1) % m;
            out[2 * k] = (segs[k].x_end[0] - z[2 * nxt]) / STATE_SCALE[0];
            out[2 * k + 1] = (segs[k].x_end[1] - z[2 * nxt + 1]) / STATE_SCALE[1];
        }
        let f0 = model::rhs2([z[0], z[1]], &p);
        out[2 * m] = f0[1] / STATE_SCALE[1];
        Ok(())
    }

    fn jacobian(&mut self, z: &[f64]) -> Result<Matrix> {
        let m = self.segments;
        let p = self.params_at(z[2 * m + 1]);
        let mut jm = Matrix::zeros(2 * m + 1, 2 * m + 2);
        {
            let segs = self.eval(z)?;
            for k in 0..m {
                let nxt = (k + 1) % m;
                let seg = &segs[k];
                let f_end = model::rhs2(seg.x_end, &p);
                for r in 0..2 {
                    let row = 2 * k + r;
                    let sc = STATE_SCALE[r];
                    jm[(row, 2 * k)] = seg.monodromy[r][0] / sc;
                    jm[(row, 2 * k + 1)] = seg.monodromy[r][1] / sc;
                    let e = jm[(row, 2 * nxt + r)] - 1.0 / sc;
                    jm[(row, 2 * nxt + r)] = e;
                    jm[(row, 2 * m)] = f_end[r] / (m as f64 * sc);
                    jm[(row, 2 * m + 1)] = seg.dparam[r] / sc;
                }
            }
        }
        let j0 = jacobian_reduced([z[0], z[1]], &p);
        let fp0 = model::rhs_param_deriv([z[0], z[1]], &p, self.active);
        jm[(2 * m, 0)] = j0[1][0] / STATE_SCALE[1];
        jm[(2 * m, 1)] = j0[1][1] / STATE_SCALE[1];
        jm[(2 * m, 2 * m + 1)] = fp0[1] / STATE_SCALE[1];
        Ok(jm)
    }

    fn validate(&mut self, z: &[f64]) -> Result<bool> {
        let m = self.segments;
        let period = z[2 * m];
        if !(period.is_finite() && period > 1.0) {
            return Ok(false);
        }
        // amplitude guard: the shooting system is also solved by equilibria
        let p = self.params_at(z[2 * m + 1]);
        let probe = flow_samples(&p, [z[0], z[1]], period, 8, &integ_opts(1e-6))?;
        let amp = probe
            .iter()
            .map(|x| {
                let ds = (x[0] - z[0]) / STATE_SCALE[0];
                let di = (x[1] - z[1]) / STATE_SCALE[1];
                (ds * ds + di * di).sqrt()
            })
            .fold(0.0, f64::max);
        Ok(amp >= MIN_AMPLITUDE)
    }
}

// ---------------------------------------------------------------------------
// cycle construction and refinement
// ---------------------------------------------------------------------------

fn build_cycle(prob: &mut ShootProblem, z: &[f64], mesh_n: usize) -> Result<Cycle> {
    let m = prob.segments;
    let period = z[2 * m];
    let p = prob.params_at(z[2 * m + 1]);
    let mesh = flow_samples(&p, [z[0], z[1]], period, mesh_n, &prob.opts)?;
    let multipliers = prob.multipliers(z)?;
    let modulus = multipliers[1].norm();
    let stability = if (modulus - 1.0).abs() <= SEMI_BAND {
        CycleStability::Semistable
    } else if modulus < 1.0 {
        CycleStability::Stable
    } else {
        CycleStability::Unstable
    };
    Ok(Cycle { mesh, period, params: p, multipliers, stability })
}

/// Solves the fixed-parameter shooting system from an initial guess.
/// The number of segments follows the period guess.
pub fn refine_cycle(p: &Params, x0: State2, period: f64, mesh_n: usize) -> Result<Cycle> {
    refine_cycle_tol(p, x0, period, mesh_n, 1e-8)
}

pub(crate) fn refine_cycle_tol(
    p: &Params,
    x0: State2,
    period: f64,
    mesh_n: usize,
    shoot_tol: f64,
) -> Result<Cycle> {
    use palc::Problem as _;
    let m = if period > MULTI_SEGMENT_PERIOD { 4 } else { 1 };
    let mut prob = ShootProblem::new(*p, ActiveParam::Gamma, m, shoot_tol);
    // slide the guess onto the phase section I' = 0 (I decreasing) so the
    // first Newton step is not dominated by an along-orbit displacement
    let x0 = slide_to_section(p, x0, 2.2 * period).unwrap_or(x0);
    // seed segment starts by sampling the flow from the guess
    let samples = flow_samples(p, x0, period, m.max(1), &integ_opts(1e-8))?;
    let mut z: Vec<f64> = Vec::with_capacity(2 * m + 2);
    for x in samples.iter().take(m) {
        z.push(x[0]);
        z.push(x[1]);
    }
    z.push(period);
    z.push(p.active(ActiveParam::Gamma));

    // damped Newton with the parameter column frozen
    let n = prob.n_eq();
    let mut res = vec![0.0; n];
    prob.residual(&z, &mut res)?;
    let mut rn = res.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    for _ in 0..40 {
        if !rn.is_finite() {
            return Err(Error::CycleCorrectorFailed("non-finite shooting residual".into()));
        }
        if rn <= shoot_tol {
            if !prob.validate(&z)? {
                return Err(Error::CycleCorrectorFailed("orbit collapsed onto an equilibrium".into()));
            }
            return build_cycle(&mut prob, &z, mesh_n);
        }
        let jm = prob.jacobian(&z)?;
        // square system: drop the parameter column
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for r in 0..n {
            for c in 0..n {
                a[r * n + c] = jm[(r, c)] * prob.scales()[c];
            }
            b[r] = -res[r];
        }
        if lu_solve_in_place(&mut a, &mut b, n).is_err() {
            return Err(Error::CycleCorrectorFailed("singular shooting Jacobian".into()));
        }
        let mut lambda = 1.0;
        let mut advanced = false;
        for _ in 0..=8 {
            let mut trial = z.clone();
            for c in 0..n {
                trial[c] += lambda * b[c] * prob.scales()[c];
            }
            if trial.iter().all(|v| v.is_finite()) && trial[2 * m] > 1.0 {
                let mut res_t = vec![0.0; n];
                if prob.residual(&trial, &mut res_t).is_ok() {
                    let rt = res_t.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                    if rt.is_finite() && (rt < rn || rt <= shoot_tol) {
                        z = trial;
                        res = res_t;
                        rn = rt;
                        advanced = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !advanced {
            return Err(Error::CycleCorrectorFailed("line search stalled".into()));
        }
    }
    Err(Error::CycleCorrectorFailed("shooting Newton did not converge".into()))
}

/// Integrates forward until the orbit crosses I' = 0 with I decreasing and
/// returns the crossing state.
fn slide_to_section(p: &Params, x0: State2, budget: f64) -> Option<State2> {
    let pc = *p;
    let f = move |_t: f64, y: &State2| model::rhs2(*y, &pc);
    let mut stepper = Dopri5::new(f, 0.0, x0, integ_opts(1e-9));
    let mut prev = model::rhs2(x0, p)[1];
    while stepper.t < budget {
        let step = stepper.step(budget).ok()?;
        let cur = model::rhs2(stepper.y, p)[1];
        if prev > 0.0 && cur <= 0.0 && stepper.y[1] > 0.1 {
            let mut lo = step.t_old;
            let mut hi = step.t_new;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if model::rhs2(step.dense(mid), p)[1] > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(step.dense(0.5 * (lo + hi)));
        }
        prev = cur;
    }
    None
}

/// Builds the small-amplitude cycle ejected at a Hopf point by correcting
/// the eigenplane ansatz with a pinned-amplitude shooting solve; the active
/// parameter is freed to absorb the amplitude constraint.
pub fn cycle_from_hopf(
    base: &Params,
    hb: &SpecialPoint,
    active: ActiveParam,
    amplitude: f64,
    mesh_n: usize,
) -> Result<Cycle> {
    if amplitude <= 0.0 {
        return Err(Error::InvalidParams("amplitude must be positive".into()));
    }
    let p_star = Params { gamma: hb.gamma, rho: hb.rho, ..*base };
    let x_star = hb.state;
    let j = jacobian_reduced(x_star, &p_star);
    let omega = hb.aux.get("omega").copied().map_or_else(
        || crate::contin::hopf_frequency(&j),
        Ok,
    )?;
    if omega <= 0.0 {
        return Err(Error::DegenerateHopf { det: det2(&j) });
    }

    // complex eigenvector for +i omega, normalized in the scaled metric
    let (qr, qi) = if j[0][1].abs() > 1e-14 {
        ([j[0][1], -j[0][0]], [0.0, omega])
    } else {
        ([-j[1][1], j[1][0]], [omega, 0.0])
    };
    let nrm = ((qr[0] / STATE_SCALE[0]).powi(2)
        + (qr[1] / STATE_SCALE[1]).powi(2)
        + (qi[0] / STATE_SCALE[0]).powi(2)
        + (qi[1] / STATE_SCALE[1]).powi(2))
    .sqrt();
    let qr = [qr[0] / nrm, qr[1] / nrm];
    let qi = [qi[0] / nrm, qi[1] / nrm];

    // start at the phase-condition root closest to the ansatz circle
    let mut best_theta = 0.0;
    let mut best = f64::INFINITY;
    for k in 0..64 {
        let th = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
        let x = [
            x_star[0] + amplitude * (qr[0] * th.cos() - qi[0] * th.sin()),
            x_star[1] + amplitude * (qr[1] * th.cos() - qi[1] * th.sin()),
        ];
        let f = model::rhs2(x, &p_star);
        if f[1].abs() < best {
            best = f[1].abs();
            best_theta = th;
        }
    }
    let x0 = [
        x_star[0] + amplitude * (qr[0] * best_theta.cos() - qi[0] * best_theta.sin()),
        x_star[1] + amplitude * (qr[1] * best_theta.cos() - qi[1] * best_theta.sin()),
    ];

    // pinned system: closure (2), phase, ||x0 - x*||_scaled = amplitude,
    // unknowns (x0, T, p_active)
    let shoot_tol = 1e-9;
    let mut prob = ShootProblem::new(p_star, active, 1, shoot_tol);
    let mut z = vec![x0[0], x0[1], 2.0 * std::f64::consts::PI / omega, p_star.active(active)];
    let sc = [STATE_SCALE[0], STATE_SCALE[1], T_SCALE, 1.0];
    let mut ok = false;
    for _ in 0..60 {
        use palc::Problem as _;
        let mut res3 = vec![0.0; 3];
        if prob.residual(&z, &mut res3).is_err() {
            break;
        }
        let ds = (z[0] - x_star[0]) / STATE_SCALE[0];
        let di = (z[1] - x_star[1]) / STATE_SCALE[1];
        let pin = ds * ds + di * di - amplitude * amplitude;
        let rn = res3.iter().fold(pin.abs(), |a, v| a.max(v.abs()));
        if rn <= shoot_tol {
            ok = true;
            break;
        }
        let jm = match prob.jacobian(&z) {
            Ok(m) => m,
            Err(_) => break,
        };
        let mut a = vec![0.0; 16];
        for r in 0..3 {
            for c in 0..4 {
                a[r * 4 + c] = jm[(r, c)] * sc[c];
            }
        }
        a[3 * 4] = 2.0 * ds;
        a[3 * 4 + 1] = 2.0 * di;
        let mut b = vec![-res3[0], -res3[1], -res3[2], -pin];
        if lu_solve_in_place(&mut a, &mut b, 4).is_err() {
            break;
        }
        for c in 0..4 {
            z[c] += b[c] * sc[c];
        }
        if !z.iter().all(|v| v.is_finite()) || z[2] <= 1.0 {
            break;
        }
    }
    if !ok {
        return Err(Error::CycleCorrectorFailed(
            "pinned Hopf-ansatz corrector did not converge".into(),
        ));
    }
    build_cycle(&mut prob, &z, mesh_n)
}

// ---------------------------------------------------------------------------
// branch continuation
// ---------------------------------------------------------------------------

/// Continues a cycle family in the active parameter by pseudo-arclength,
/// monitoring the branch fold (LPC) and period blow-up (HOM).
pub fn continue_cycles(start: &Cycle, active: ActiveParam, range: (f64, f64)) -> Result<CycleBranch> {
    continue_cycles_with(start, active, range, &CycleOpts::default())
}

pub fn continue_cycles_with(
    start: &Cycle,
    active: ActiveParam,
    range: (f64, f64),
    opts: &CycleOpts,
) -> Result<CycleBranch> {
    use palc::Problem as _;
    let (lo, hi) = (range.0.min(range.1), range.0.max(range.1));
    let base = start.params;
    let p0 = base.active(active);

    let mut m = if start.period > MULTI_SEGMENT_PERIOD { 4 } else { 1 };
    let mut prob = ShootProblem::new(base, active, m, opts.shoot_tol);
    let mut z = seed_from_cycle(start, m, p0);

    let settings = palc::Settings {
        h0: opts.h0,
        hmax: opts.hmax,
        hmin: 1e-10,
        tol: opts.shoot_tol,
        max_corrector_iters: 10,
        grow_after: 4,
        max_points: opts.max_cycles,
    };

    // radially outward orientation: amplitude grows away from the enclosed
    // equilibrium, which is the meaningful direction off a Hopf point
    let enclosed = enclosed_equilibrium(&prob.params_at(p0));
    let mut tangent = palc::tangent(&mut prob, &z, None)?;
    if let Some(eq) = enclosed {
        let rad = [
            (z[0] - eq[0]) / STATE_SCALE[0],
            (z[1] - eq[1]) / STATE_SCALE[1],
        ];
        let dot = tangent[0] * rad[0] + tangent[1] * rad[1];
        if dot < 0.0 {
            for v in tangent.iter_mut() {
                *v = -*v;
            }
        }
    }

    let mut cycles: Vec<Cycle> = vec![build_cycle(&mut prob, &z, opts.mesh_n)?];
    let mut tangents_p: Vec<f64> = vec![tangent[2 * m + 1]];
    let mut zs_hist: Vec<Vec<f64>> = vec![z.clone()];
    let mut truncated = false;
    let mut h = settings.h0;
    let mut successes = 0;
    let mut blowup_count = 0;
    let sc_now = prob.scales().to_vec();
    let mut zs = palc::to_scaled(&z, &sc_now);

    for _ in 0..opts.max_cycles {
        let pred: Vec<f64> = zs.iter().zip(&tangent).map(|(a, t)| a + h * t).collect();
        let corrected = palc::correct(&mut prob, &pred, &tangent, &settings)?;
        let accepted = match corrected {
            Some(z_new) => {
                if prob.validate(&z_new)? {
                    Some(z_new)
                } else {
                    None
                }
            }
            None => None,
        };
        match accepted {
            Some(z_new) => {
                let sc = prob.scales().to_vec();
                let zs_new = palc::to_scaled(&z_new, &sc);
                let mut secant: Vec<f64> = zs_new.iter().zip(&zs).map(|(a, b)| a - b).collect();
                let nrm = secant.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > 0.0 {
                    for v in secant.iter_mut() {
                        *v /= nrm;
                    }
                }
                let cyc = build_cycle(&mut prob, &z_new, opts.mesh_n)?;
                let period = cyc.period;
                let p_now = z_new[2 * m + 1];
                cycles.push(cyc);
                tangents_p.push(secant[2 * m + 1]);
                zs_hist.push(z_new.clone());
                zs = zs_new;
                tangent = secant;
                successes += 1;
                if successes >= settings.grow_after {
                    h = (h * 1.3).min(settings.hmax);
                    successes = 0;
                }
                if period >= opts.period_blowup_threshold {
                    blowup_count += 1;
                    if blowup_count >= 5 {
                        break;
                    }
                }
                if period >= 1.5 * opts.period_blowup_threshold {
                    break;
                }
                if p_now < lo || p_now > hi {
                    break;
                }
                if cycles.last().unwrap().amplitude() < 10.0 * MIN_AMPLITUDE {
                    break; // shrank back into a Hopf point
                }
                // escalate segmentation as the orbit stiffens near homoclinic
                if m == 1 && period > MULTI_SEGMENT_PERIOD {
                    let last = cycles.last().unwrap().clone();
                    m = 4;
                    prob = ShootProblem::new(base, active, m, opts.shoot_tol);
                    z = seed_from_cycle(&last, m, p_now);
                    let sc = prob.scales().to_vec();
                    zs = palc::to_scaled(&z, &sc);
                    let mut orient = vec![0.0; 2 * m + 2];
                    orient[2 * m] = 1.0; // period keeps growing
                    tangent = palc::tangent(&mut prob, &z, Some(&orient))?;
                }
            }
            None => {
                h *= 0.5;
                successes = 0;
                if h < settings.hmin {
                    if m == 1 {
                        // escalate once before giving up
                        let last = cycles.last().unwrap().clone();
                        m = 4;
                        prob = ShootProblem::new(base, active, m, opts.shoot_tol);
                        z = seed_from_cycle(&last, m, last.params.active(active));
                        let sc = prob.scales().to_vec();
                        zs = palc::to_scaled(&z, &sc);
                        tangent = palc::tangent(&mut prob, &z, Some(&tangent_padded(&tangent, m)))?;
                        h = settings.h0;
                        continue;
                    }
                    truncated = true;
                    break;
                }
            }
        }
    }

    let mut branch = CycleBranch { cycles, active, special: Vec::new(), truncated };

    // LPC: fold of the branch in the active parameter
    let lpcs = detect_lpc(&mut ShootProblem::new(base, active, 1, opts.shoot_tol), &branch, &tangents_p, &zs_hist, opts)?;
    branch.special.extend(lpcs);
    // HOM: period blow-up proxy
    if branch.cycles.iter().any(|c| c.period >= opts.period_blowup_threshold) {
        if let Some(hom) = homoclinic_proxy_with(&branch, opts) {
            branch.special.push(hom);
        }
    }
    Ok(branch)
}

fn tangent_padded(t: &[f64], m: usize) -> Vec<f64> {
    // old tangent was for 1 segment: [x0 (2), T, p]; replicate state block
    let mut out = vec![0.0; 2 * m + 2];
    out[0] = t[0];
    out[1] = t[1];
    out[2 * m] = t[t.len() - 2];
    out[2 * m + 1] = t[t.len() - 1];
    out
}

fn seed_from_cycle(c: &Cycle, m: usize, p_active: f64) -> Vec<f64> {
    let n = c.mesh.len() - 1;
    let mut z = Vec::with_capacity(2 * m + 2);
    for k in 0..m {
        let idx = k * n / m;
        z.push(c.mesh[idx][0]);
        z.push(c.mesh[idx][1]);
    }
    z.push(c.period);
    z.push(p_active);
    z
}

fn enclosed_equilibrium(p: &Params) -> Option<State2> {
    let eqs = model::endemic_equilibria(p).ok()?;
    // the cycle winds around the spiral equilibrium (highest I of the pair)
    eqs.last().map(|e| e.planar())
}

/// Localizes saddle-node-of-cycles points as folds of the branch in the
/// active parameter (the tangent parameter component changes sign there).
fn detect_lpc(
    _probe: &mut ShootProblem,
    branch: &CycleBranch,
    tangents_p: &[f64],
    zs_hist: &[Vec<f64>],
    opts: &CycleOpts,
) -> Result<Vec<SpecialPoint>> {
    use palc::Problem as _;
    let mut out = Vec::new();
    for k in 1..tangents_p.len() {
        if tangents_p[k - 1] * tangents_p[k] >= 0.0 {
            continue;
        }
        // parabola vertex through the parameter values around the fold
        let za = &zs_hist[k - 1];
        let zb = &zs_hist[k];
        let ca = &branch.cycles[k - 1];
        let cb = &branch.cycles[k];
        if za.len() != zb.len() {
            continue; // segment count changed inside the bracket
        }
        let m = (za.len() - 2) / 2;
        let base = ca.params;
        let active = branch.active;
        let mut prob = ShootProblem::new(base, active, m, opts.shoot_tol);
        let settings = palc::Settings {
            tol: opts.shoot_tol,
            max_corrector_iters: 10,
            ..Default::default()
        };
        let sc = prob.scales().to_vec();
        // bisection on the tangent parameter component in arclength
        let mut zs_lo = palc::to_scaled(za, &sc);
        let mut zs_hi = palc::to_scaled(zb, &sc);
        let mut t_lo = tangents_p[k - 1];
        let mut hold: Vec<f64> = za.clone();
        let dir: Vec<f64> = {
            let d: Vec<f64> = zs_hi.iter().zip(&zs_lo).map(|(a, b)| a - b).collect();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter().map(|v| v / n.max(1e-300)).collect()
        };
        for _ in 0..40 {
            let zs_mid: Vec<f64> =
                zs_lo.iter().zip(&zs_hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let z_mid = match palc::correct(&mut prob, &zs_mid, &dir, &settings)? {
                Some(z) => z,
                None => break,
            };
            let t_mid = palc::tangent(&mut prob, &z_mid, Some(&dir))?;
            hold = z_mid.clone();
            let tp = t_mid[2 * m + 1];
            if tp.abs() < 1e-12 {
                break;
            }
            let zs_m = palc::to_scaled(&z_mid, &sc);
            if t_lo * tp <= 0.0 {
                zs_hi = zs_m;
            } else {
                zs_lo = zs_m;
                t_lo = tp;
            }
            let gap: f64 = zs_hi
                .iter()
                .zip(&zs_lo)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if gap < 1e-12 {
                break;
            }
        }
        let p_fold = hold[2 * m + 1];
        let cyc = build_cycle(&mut prob, &hold, opts.mesh_n)?;
        let mut aux = BTreeMap::new();
        aux.insert("period".into(), cyc.period);
        aux.insert("multiplier".into(), cyc.multipliers[1].norm());
        aux.insert("amplitude".into(), cyc.amplitude());
        let pp = base.with_active(active, p_fold);
        out.push(SpecialPoint {
            kind: SpecialPointKind::LPC,
            gamma: pp.gamma,
            rho: pp.rho,
            state: [hold[0], hold[1]],
            aux,
        });
        let _ = (ca, cb);
    }
    Ok(out)
}

/// Floquet multipliers of a converged cycle: eigenvalues of the monodromy
/// matrix over one period, trivial one first.
pub fn floquet_multipliers(c: &Cycle) -> Result<[Complex64; 2]> {
    floquet_multipliers_tol(c, 1e-8)
}

pub(crate) fn floquet_multipliers_tol(c: &Cycle, shoot_tol: f64) -> Result<[Complex64; 2]> {
    let m = if c.period > MULTI_SEGMENT_PERIOD { 4 } else { 1 };
    let mut prob = ShootProblem::new(c.params, ActiveParam::Gamma, m, shoot_tol);
    let z = seed_from_cycle(c, m, c.params.gamma);
    prob.multipliers(&z)
}

/// Extrapolates the homoclinic parameter from the period blow-up tail of a
/// branch by fitting param(T) = param_hom + c exp(-sigma T), then verifies
/// the high-period orbit passes near the saddle. Returns None (rather than
/// an error) when the tail is unusable.
pub fn homoclinic_proxy(branch: &CycleBranch) -> Option<SpecialPoint> {
    homoclinic_proxy_with(branch, &CycleOpts::default())
}

fn homoclinic_proxy_with(branch: &CycleBranch, opts: &CycleOpts) -> Option<SpecialPoint> {
    let threshold = opts.period_blowup_threshold;
    let max_period = branch.cycles.iter().map(|c| c.period).fold(0.0, f64::max);
    if max_period < threshold {
        return None;
    }
    // last entries on the blow-up tail
    let tail: Vec<&Cycle> = branch
        .cycles
        .iter()
        .filter(|c| c.period >= 0.5 * threshold)
        .collect();
    let tail = if tail.len() > 5 { &tail[tail.len() - 5..] } else { &tail[..] };
    if tail.len() < 3 {
        return None;
    }
    // monotone period growth at the branch end
    if !tail.windows(2).all(|w| w[1].period > w[0].period) {
        return None;
    }
    let t_ref = tail.last().unwrap().period;
    let ts: Vec<f64> = tail.iter().map(|c| c.period - t_ref).collect();
    let ps: Vec<f64> = tail.iter().map(|c| c.params.active(branch.active)).collect();
    let n = ps.len();

    // initial estimates from the geometric tail
    let d_last = ps[n - 1] - ps[n - 2];
    let d_prev = ps[n - 2] - ps[n - 3];
    let (p_hom, fit_residual, sigma) = if d_last.abs() < 1e-14 || d_prev.abs() < 1e-14 {
        (ps[n - 1], 0.0, f64::NAN)
    } else {
        let r = d_last / d_prev;
        let sigma0 = if r > 0.0 && r < 1.0 {
            -(r.ln()) / (ts[n - 1] - ts[n - 2])
        } else {
            1e-3
        };
        let mut theta = [ps[n - 1] + d_last * (r / (1.0 - r)).max(-0.5), 0.0, sigma0.max(1e-6)];
        theta[1] = ps[n - 1] - theta[0];
        // Gauss-Newton on p_i = P + C exp(-sigma (T_i - T_ref))
        for _ in 0..60 {
            let mut jt_j = [[0.0f64; 3]; 3];
            let mut jt_r = [0.0f64; 3];
            for i in 0..n {
                let e = (-theta[2] * ts[i]).exp();
                let res = theta[0] + theta[1] * e - ps[i];
                let row = [1.0, e, -theta[1] * ts[i] * e];
                for a in 0..3 {
                    jt_r[a] += row[a] * res;
                    for b in 0..3 {
                        jt_j[a][b] += row[a] * row[b];
                    }
                }
            }
            // solve 3x3 normal equations with Levenberg damping
            let mut a = vec![
                jt_j[0][0] * (1.0 + 1e-10), jt_j[0][1], jt_j[0][2],
                jt_j[1][0], jt_j[1][1] * (1.0 + 1e-10), jt_j[1][2],
                jt_j[2][0], jt_j[2][1], jt_j[2][2] * (1.0 + 1e-10),
            ];
            let mut b = vec![-jt_r[0], -jt_r[1], -jt_r[2]];
            if lu_solve_in_place(&mut a, &mut b, 3).is_err() {
                break;
            }
            let step_norm = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
            theta[0] += b[0];
            theta[1] += b[1];
            theta[2] = (theta[2] + b[2]).max(1e-9);
            if step_norm < 1e-15 {
                break;
            }
        }
        let resid = (0..n)
            .map(|i| (theta[0] + theta[1] * (-theta[2] * ts[i]).exp() - ps[i]).abs())
            .fold(0.0, f64::max);
        (theta[0], resid, theta[2])
    };
    if !p_hom.is_finite() || fit_residual > 1e-3 {
        return None;
    }

    // the high-period orbit must pass close to the saddle e2
    let last = tail.last().unwrap();
    let eqs = model::endemic_equilibria(&last.params).ok()?;
    let saddle = eqs.iter().find(|e| e.stability == crate::model::Stability::Saddle)?;
    let sd = saddle.planar();
    let min_dist = last
        .mesh
        .iter()
        .map(|x| {
            let ds = (x[0] - sd[0]) / STATE_SCALE[0];
            let di = (x[1] - sd[1]) / STATE_SCALE[1];
            (ds * ds + di * di).sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    if min_dist > 1e-2 {
        return None;
    }

    let pp = last.params.with_active(branch.active, p_hom);
    let mut aux = BTreeMap::new();
    aux.insert("period".into(), last.period);
    aux.insert("fit_residual".into(), fit_residual);
    if sigma.is_finite() {
        aux.insert("sigma".into(), sigma);
    }
    Some(SpecialPoint {
        kind: SpecialPointKind::HOM,
        gamma: pp.gamma,
        rho: pp.rho,
        state: sd,
        aux,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeflow::{classify_orbit, FateKind};

    /// Stable cycle at (0.162, 0.004): land on it by forward integration,
    /// then polish with shooting.
    fn p7_cycle() -> Cycle {
        let p = Params::baseline(0.162, 0.004);
        let eqs = model::endemic_equilibria(&p).unwrap();
        let e1 = eqs.last().unwrap().planar();
        let x0 = [e1[0] + 5.0, e1[1] + 1.0];
        let samples = flow_samples(&p, x0, 4000.0, 64, &integ_opts(1e-8)).unwrap();
        let xg = *samples.last().unwrap();
        let j = jacobian_reduced(e1, &p);
        let tguess = 2.0 * std::f64::consts::PI / det2(&j).sqrt();
        refine_cycle(&p, xg, tguess, 100).unwrap()
    }

    #[test]
    fn stable_cycle_at_p7() {
        let c = p7_cycle();
        assert_eq!(c.stability, CycleStability::Stable);
        assert!((c.multipliers[0] - Complex64::new(1.0, 0.0)).norm() <= 1e-4);
        assert!(c.multipliers[1].norm() < 1.0);
        // closure of the mesh
        let first = c.mesh[0];
        let last = *c.mesh.last().unwrap();
        let d = ((first[0] - last[0]) / 1000.0).abs().max(((first[1] - last[1]) / 40.0).abs());
        assert!(d <= 1e-8, "mesh closure {d}");
    }

    #[test]
    fn mesh_doubling_keeps_period() {
        let c = p7_cycle();
        let c2 = refine_cycle(&c.params, c.mesh[0], c.period, 200).unwrap();
        assert!(((c.period - c2.period) / c.period).abs() < 1e-6);
        assert_eq!(c2.mesh.len(), 201);
    }

    #[test]
    fn floquet_tolerance_scaling() {
        let c = p7_cycle();
        let loose = floquet_multipliers_tol(&c, 1e-8).unwrap();
        let tight = floquet_multipliers_tol(&c, 1e-9).unwrap();
        assert!((loose[0] - 1.0).norm() <= 1e-4);
        assert!((tight[0] - 1.0).norm() <= 1e-5);
    }

    #[test]
    fn classify_orbit_agrees_with_shooting_period() {
        let c = p7_cycle();
        let fate = classify_orbit(&c.params, c.mesh[0], 8000.0).unwrap();
        match fate.kind {
            FateKind::ToCycle { period, mean_i } => {
                assert!(((period - c.period) / c.period).abs() < 1e-3);
                assert!(mean_i > 0.0);
            }
            other => panic!("expected ToCycle, got {other:?}"),
        }
    }

    #[test]
    fn unstable_cycle_at_p3_reverse_capture() {
        // in reverse time the unstable cycle attracts; classify the reverse
        // orbit, then polish the detected loop with shooting
        use crate::odeflow::{classify_orbit_against, known_equilibria, IntegratorOpts};
        let p = Params::baseline(0.392, 0.1825);
        let eqs = model::endemic_equilibria(&p).unwrap();
        let e1 = eqs.last().unwrap().planar();
        let known = known_equilibria(&p).unwrap();
        let fate = classify_orbit_against(
            &p,
            [e1[0] + 3.0, e1[1] + 0.5],
            40_000.0,
            &known,
            true,
            &IntegratorOpts::default(),
        )
        .unwrap();
        let period = match fate.kind {
            FateKind::ToCycle { period, .. } => period,
            other => panic!("reverse orbit should reach the unstable cycle, got {other:?}"),
        };
        // land a state on the loop by reverse integration, then refine
        let pc = p;
        let f = move |_t: f64, y: &State2| {
            let d = model::rhs2(*y, &pc);
            [-d[0], -d[1]]
        };
        let mut st = Dopri5::new(f, 0.0, [e1[0] + 3.0, e1[1] + 0.5], integ_opts(1e-9));
        while st.t < 30_000.0 {
            st.step(30_000.0).unwrap();
        }
        let c = refine_cycle(&p, st.y, period, 100).unwrap();
        assert_eq!(c.stability, CycleStability::Unstable);
        assert!(c.multipliers[1].norm() > 1.0);
        assert!((c.multipliers[0] - 1.0).norm() <= 1e-4);
    }

    #[test]
    fn refine_rejects_equilibrium_collapse() {
        let p = Params::baseline(0.392, 0.19);
        let eqs = model::endemic_equilibria(&p).unwrap();
        let e1 = eqs.last().unwrap().planar();
        // a guess exactly at the equilibrium has no cycle to converge to
        let r = refine_cycle(&p, e1, 400.0, 50);
        assert!(r.is_err());
    }

    #[test]
    fn homoclinic_proxy_requires_blowup() {
        let c = p7_cycle();
        let branch = CycleBranch {
            cycles: vec![c],
            active: ActiveParam::Rho,
            special: Vec::new(),
            truncated: false,
        };
        assert!(homoclinic_proxy(&branch).is_none());
    }
}

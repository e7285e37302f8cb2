//! Adaptive explicit integration of model orbits, omega-limit
//! classification, and phase-portrait field generation.
//!
//! The integrator is the Dormand-Prince 5(4) embedded pair with PI step-size
//! control and the standard quartic dense-output interpolant. Orbit fates
//! are decided by watching for capture near a known equilibrium or for
//! converged returns to the Poincare section I' = 0 (I decreasing).

use crate::error::{Error, Result};
use crate::model::{self, EquilibriumLabel, Params, State2, State3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default classification budget in model time units.
pub const DEFAULT_BUDGET: f64 = 10_000.0;
/// Default phase-portrait window in (S, I).
pub const DEFAULT_WINDOW: [[f64; 2]; 2] = [[0.0, 1000.0], [0.0, 40.0]];
/// Observation window length for equilibrium capture.
const CAPTURE_WINDOW: f64 = 200.0;
/// Scaled distance to an equilibrium that counts as captured.
const CAPTURE_TOL: f64 = 1e-5;
/// Scaled distance between successive section returns that counts as a cycle.
const RETURN_POS_TOL: f64 = 1e-6;
/// Relative period drift between successive returns that counts as a cycle.
const RETURN_PERIOD_TOL: f64 = 1e-4;
/// State scales making S and I comparable (used by every scaled metric here).
pub(crate) const STATE_SCALE: [f64; 2] = [1000.0, 40.0];

// Dormand-Prince 5(4) tableau.
const A21: f64 = 0.2;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const C2: f64 = 0.2;
const C3: f64 = 0.3;
const C4: f64 = 0.8;
const C5: f64 = 8.0 / 9.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const BETA_PI: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA_PI * 0.75;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const H_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct IntegratorOpts {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOpts {
    fn default() -> Self {
        IntegratorOpts { rel_tol: 1e-8, abs_tol: 1e-8, max_steps: 50_000_000 }
    }
}

/// One accepted step with its dense-output coefficients.
#[derive(Debug, Clone)]
pub(crate) struct Step<const N: usize> {
    pub t_old: f64,
    pub t_new: f64,
    rcont: [[f64; N]; 5],
}

impl<const N: usize> Step<N> {
    /// Interpolated state at `t` inside [t_old, t_new].
    pub fn dense(&self, t: f64) -> [f64; N] {
        let h = self.t_new - self.t_old;
        let theta = if h == 0.0 { 0.0 } else { (t - self.t_old) / h };
        let th1 = 1.0 - theta;
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = self.rcont[0][i]
                + theta
                    * (self.rcont[1][i]
                        + th1 * (self.rcont[2][i] + theta * (self.rcont[3][i] + th1 * self.rcont[4][i])));
        }
        out
    }
}

/// Dormand-Prince 5(4) stepper with FSAL and dense output.
pub(crate) struct Dopri5<const N: usize, F> {
    f: F,
    pub t: f64,
    pub y: [f64; N],
    k1: [f64; N],
    h: f64,
    facold: f64,
    opts: IntegratorOpts,
    pub accepted: usize,
    pub rejected: usize,
    steps_taken: usize,
}

impl<const N: usize, F: FnMut(f64, &[f64; N]) -> [f64; N]> Dopri5<N, F> {
    pub fn new(mut f: F, t0: f64, y0: [f64; N], opts: IntegratorOpts) -> Self {
        let k1 = f(t0, &y0);
        let mut s = Dopri5 {
            f,
            t: t0,
            y: y0,
            k1,
            h: 0.0,
            facold: 1e-4,
            opts,
            accepted: 0,
            rejected: 0,
            steps_taken: 0,
        };
        s.h = s.initial_step();
        s
    }

    fn sk(&self, i: usize, y1: &[f64; N]) -> f64 {
        self.opts.abs_tol + self.opts.rel_tol * self.y[i].abs().max(y1[i].abs())
    }

    fn initial_step(&mut self) -> f64 {
        let mut dnf = 0.0;
        let mut dny = 0.0;
        for i in 0..N {
            let sk = self.opts.abs_tol + self.opts.rel_tol * self.y[i].abs();
            dnf += (self.k1[i] / sk).powi(2);
            dny += (self.y[i] / sk).powi(2);
        }
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
        let mut y1 = [0.0; N];
        for i in 0..N {
            y1[i] = self.y[i] + h * self.k1[i];
        }
        let f1 = (self.f)(self.t + h, &y1);
        let mut der2 = 0.0;
        for i in 0..N {
            let sk = self.opts.abs_tol + self.opts.rel_tol * self.y[i].abs();
            der2 += ((f1[i] - self.k1[i]) / sk).powi(2);
        }
        der2 = der2.sqrt() / h;
        let der12 = der2.max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
        h = (100.0 * h).min(h1);
        h.max(1e-10)
    }

    /// Advances by one accepted step (retrying internally on rejections).
    pub fn step(&mut self, t_limit: f64) -> Result<Step<N>> {
        loop {
            self.steps_taken += 1;
            if self.steps_taken > self.opts.max_steps {
                return Err(Error::StiffnessSuspected { t: self.t });
            }
            if self.h < H_MIN {
                return Err(Error::StiffnessSuspected { t: self.t });
            }
            let mut h = self.h.min(t_limit - self.t);
            if h <= 0.0 {
                h = self.h;
            }
            let t = self.t;
            let y = self.y;
            let k1 = self.k1;

            let mut ys = [0.0; N];
            for i in 0..N {
                ys[i] = y[i] + h * A21 * k1[i];
            }
            let k2 = (self.f)(t + C2 * h, &ys);
            for i in 0..N {
                ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            let k3 = (self.f)(t + C3 * h, &ys);
            for i in 0..N {
                ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            let k4 = (self.f)(t + C4 * h, &ys);
            for i in 0..N {
                ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            let k5 = (self.f)(t + C5 * h, &ys);
            for i in 0..N {
                ys[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let k6 = (self.f)(t + h, &ys);
            let mut y_new = [0.0; N];
            for i in 0..N {
                y_new[i] =
                    y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            let k7 = (self.f)(t + h, &y_new);

            let mut err = 0.0;
            for i in 0..N {
                let e = h
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sk = self.sk(i, &y_new);
                err += (e / sk).powi(2);
            }
            err = (err / N as f64).sqrt();
            if !err.is_finite() {
                self.h *= 0.5;
                self.rejected += 1;
                continue;
            }

            let fac11 = err.powf(EXPO1);
            if err <= 1.0 {
                // accepted: assemble dense output
                self.facold = err.max(1e-4);
                let mut rcont = [[0.0; N]; 5];
                for i in 0..N {
                    let ydiff = y_new[i] - y[i];
                    let bspl = h * k1[i] - ydiff;
                    rcont[0][i] = y[i];
                    rcont[1][i] = ydiff;
                    rcont[2][i] = bspl;
                    rcont[3][i] = ydiff - h * k7[i] - bspl;
                    rcont[4][i] = h
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                }
                self.t = t + h;
                self.y = y_new;
                self.k1 = k7; // FSAL
                self.accepted += 1;
                let fac = (fac11 / self.facold.powf(BETA_PI) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                self.h = h / fac;
                return Ok(Step { t_old: t, t_new: self.t, rcont });
            }
            self.rejected += 1;
            self.h = h / (fac11 / SAFETY).min(1.0 / FAC_MIN);
        }
    }
}

/// An integrated orbit sampled at the accepted step points.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State3>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Integrates the full (S, I, R) system from `x0` to `t_end`.
pub fn integrate(p: &Params, x0: State3, t_end: f64, rel_tol: f64, abs_tol: f64) -> Result<Trajectory> {
    p.validate()?;
    if x0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("integrate initial state must be finite and nonnegative"));
    }
    for (name, tol) in [("rel_tol", rel_tol), ("abs_tol", abs_tol)] {
        if !(1e-12..=1e-3).contains(&tol) {
            return Err(Error::InvalidParams(format!("{name} must lie in [1e-12, 1e-3], got {tol}")));
        }
    }
    let p = *p;
    let opts = IntegratorOpts { rel_tol, abs_tol, ..Default::default() };
    let mut stepper = Dopri5::new(move |_t, y: &State3| model::rhs3(*y, &p), 0.0, x0, opts);
    let mut times = vec![0.0];
    let mut states = vec![x0];
    while stepper.t < t_end {
        let step = stepper.step(t_end)?;
        if step.t_new >= t_end {
            let yf = step.dense(t_end);
            times.push(t_end);
            states.push(yf);
            break;
        }
        times.push(step.t_new);
        states.push(stepper.y);
    }
    Ok(Trajectory {
        times,
        states,
        accepted_steps: stepper.accepted,
        rejected_steps: stepper.rejected,
    })
}

/// Where an orbit ends up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FateKind {
    ToEquilibrium(EquilibriumLabel),
    ToCycle { period: f64, mean_i: f64 },
    Undecided,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitFate {
    pub kind: FateKind,
    pub transient_time: f64,
}

fn scaled_dist(a: State2, b: State2) -> f64 {
    let ds = (a[0] - b[0]) / STATE_SCALE[0];
    let di = (a[1] - b[1]) / STATE_SCALE[1];
    ds.abs().max(di.abs())
}

pub(crate) fn known_equilibria(p: &Params) -> Result<Vec<(EquilibriumLabel, State2)>> {
    let mut eqs = vec![(EquilibriumLabel::E0, [p.lambda / p.mu, 0.0])];
    for e in model::endemic_equilibria(p)? {
        eqs.push((e.label, e.planar()));
    }
    Ok(eqs)
}

/// Classifies the forward orbit from `x0` within the time `budget`.
pub fn classify_orbit(p: &Params, x0: State2, budget: f64) -> Result<OrbitFate> {
    if x0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("classify_orbit initial state must be finite and nonnegative"));
    }
    let eqs = known_equilibria(p)?;
    classify_orbit_against(p, x0, budget, &eqs, false, &IntegratorOpts::default())
}

/// Shared classification core; `reverse` integrates the time-reversed field
/// (used by the cycle census to capture unstable cycles).
pub(crate) fn classify_orbit_against(
    p: &Params,
    x0: State2,
    budget: f64,
    eqs: &[(EquilibriumLabel, State2)],
    reverse: bool,
    opts: &IntegratorOpts,
) -> Result<OrbitFate> {
    let p = *p;
    let sign = if reverse { -1.0 } else { 1.0 };
    let f = move |_t: f64, y: &State2| {
        let d = model::rhs2(*y, &p);
        [sign * d[0], sign * d[1]]
    };
    let mut stepper = Dopri5::new(f, 0.0, x0, *opts);

    // equilibrium capture bookkeeping: the earliest time since which the
    // orbit has continuously stayed within tolerance of equilibrium k
    let mut near_since: Vec<Option<f64>> = vec![None; eqs.len()];
    for (k, (_, xe)) in eqs.iter().enumerate() {
        if scaled_dist(x0, *xe) <= CAPTURE_TOL {
            near_since[k] = Some(0.0);
        }
    }

    // Poincare-section returns: I' = 0 with I decreasing
    let mut returns: Vec<(f64, State2)> = Vec::new();
    let mut i_integral_marks: Vec<f64> = Vec::new();
    let mut i_integral = 0.0;

    let fwd = |y: &State2| model::rhs2(*y, &p);
    let mut prev_f2 = fwd(&x0)[1] * sign;

    while stepper.t < budget {
        let step = match stepper.step(budget) {
            Ok(s) => s,
            Err(e) => return Err(e),
        };
        let y1 = stepper.y;
        if !y1.iter().all(|v| v.is_finite()) || y1[0].abs() > 1e7 || y1[1].abs() > 1e7 {
            // escaped the physically meaningful region (possible in reverse time)
            return Ok(OrbitFate { kind: FateKind::Undecided, transient_time: stepper.t });
        }

        // accumulate integral of I over the step (Simpson on dense output)
        let tm = 0.5 * (step.t_old + step.t_new);
        let ym = step.dense(tm);
        i_integral += (step.t_new - step.t_old) / 6.0 * (step.dense(step.t_old)[1] + 4.0 * ym[1] + y1[1]);

        // equilibrium capture
        for (k, (label, xe)) in eqs.iter().enumerate() {
            // conservative: require both endpoints and midpoint inside
            let inside = scaled_dist(y1, *xe) <= CAPTURE_TOL && scaled_dist(ym, *xe) <= CAPTURE_TOL;
            match (inside, near_since[k]) {
                (true, None) => near_since[k] = Some(step.t_old),
                (false, Some(_)) => near_since[k] = None,
                _ => {}
            }
            if let Some(since) = near_since[k] {
                if stepper.t - since >= CAPTURE_WINDOW {
                    return Ok(OrbitFate {
                        kind: FateKind::ToEquilibrium(*label),
                        transient_time: since,
                    });
                }
            }
        }

        // section crossing: f2 changes sign from + to - within the step
        let f2_new = fwd(&y1)[1] * sign;
        if prev_f2 > 0.0 && f2_new <= 0.0 && y1[1] > 0.1 {
            let mut lo = step.t_old;
            let mut hi = step.t_new;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let g = fwd(&step.dense(mid))[1] * sign;
                if g > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t_cross = 0.5 * (lo + hi);
            let x_cross = step.dense(t_cross);
            // integral of I up to the crossing
            let frac = (t_cross - step.t_old) / (step.t_new - step.t_old);
            let partial = i_integral
                - (step.t_new - step.t_old) * (1.0 - frac) * 0.5 * (ym[1] + y1[1]); // coarse tail correction
            returns.push((t_cross, x_cross));
            i_integral_marks.push(partial);

            if returns.len() >= 3 {
                let n = returns.len();
                let (t2, x2) = returns[n - 1];
                let (t1, x1) = returns[n - 2];
                let (t0, x0r) = returns[n - 3];
                let period1 = t1 - t0;
                let period2 = t2 - t1;
                let pos_ok = scaled_dist(x2, x1) <= RETURN_POS_TOL && scaled_dist(x1, x0r) <= RETURN_POS_TOL;
                let per_ok = (period2 - period1).abs() <= RETURN_PERIOD_TOL * period2.abs()
                    && period2 > 0.0;
                if pos_ok && per_ok {
                    let mean_i = (i_integral_marks[n - 1] - i_integral_marks[n - 2]) / period2;
                    return Ok(OrbitFate {
                        kind: FateKind::ToCycle { period: period2, mean_i },
                        transient_time: t0,
                    });
                }
            }
        }
        prev_f2 = f2_new;
    }
    Ok(OrbitFate { kind: FateKind::Undecided, transient_time: budget })
}

/// A rectangular grid of orbit fates over an (S, I) window.
#[derive(Debug, Clone, Serialize)]
pub struct PortraitField {
    pub window: [[f64; 2]; 2],
    pub nx: usize,
    pub ny: usize,
    /// Row-major: index = iy * nx + ix, S varying fastest.
    pub fates: Vec<OrbitFate>,
}

impl PortraitField {
    pub fn node(&self, ix: usize, iy: usize) -> (f64, f64) {
        let s = self.window[0][0]
            + (self.window[0][1] - self.window[0][0]) * (ix as f64 + 0.5) / self.nx as f64;
        let i = self.window[1][0]
            + (self.window[1][1] - self.window[1][0]) * (iy as f64 + 0.5) / self.ny as f64;
        (s, i)
    }
}

/// Classifies every node of an `nx` x `ny` grid; per-cell failures are
/// recorded as Undecided rather than aborting the field.
pub fn phase_portrait(
    p: &Params,
    window: [[f64; 2]; 2],
    nx: usize,
    ny: usize,
    budget: f64,
) -> Result<PortraitField> {
    if nx == 0 || ny == 0 || nx > 200 || ny > 200 {
        return Err(Error::InvalidParams(format!("grid {nx}x{ny} outside 1..=200 per side")));
    }
    let eqs = known_equilibria(p)?;
    let opts = IntegratorOpts::default();
    let fates: Vec<OrbitFate> = (0..nx * ny)
        .into_par_iter()
        .map(|idx| {
            let ix = idx % nx;
            let iy = idx / nx;
            let s = window[0][0] + (window[0][1] - window[0][0]) * (ix as f64 + 0.5) / nx as f64;
            let i = window[1][0] + (window[1][1] - window[1][0]) * (iy as f64 + 0.5) / ny as f64;
            classify_orbit_against(p, [s.max(0.0), i.max(0.0)], budget, &eqs, false, &opts)
                .unwrap_or(OrbitFate { kind: FateKind::Undecided, transient_time: budget })
        })
        .collect();
    Ok(PortraitField { window, nx, ny, fates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Params;

    #[test]
    fn equilibrium_is_fixed_point() {
        let p = Params::baseline(0.3, 0.2);
        let traj = integrate(&p, [1000.0, 0.0, 0.0], 500.0, 1e-9, 1e-9).unwrap();
        for st in &traj.states {
            assert!((st[0] - 1000.0).abs() <= 1e-6);
            assert!(st[1].abs() <= 1e-9 && st[2].abs() <= 1e-9);
        }
    }

    #[test]
    fn orbit_approaches_disease_free_at_p5() {
        let p = Params::baseline(0.392, 0.173);
        let traj = integrate(&p, [1000.0, 1.0, 0.0], 5000.0, 1e-9, 1e-9).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last[0] - 1000.0).abs() < 1e-3);
        assert!(last[1].abs() < 1e-3 && last[2].abs() < 1e-3);
    }

    #[test]
    fn total_population_law_on_infection_free_axis() {
        // with I = 0 the disease terms vanish and summing the field gives
        // N' = lambda - mu N exactly
        let p = Params::baseline(0.2, 0.1);
        let x0 = [400.0, 0.0, 50.0];
        let n0: f64 = x0.iter().sum();
        let traj = integrate(&p, x0, 2000.0, 1e-9, 1e-9).unwrap();
        for (t, st) in traj.times.iter().zip(&traj.states) {
            let n = st[0] + st[1] + st[2];
            let expect = p.lambda / p.mu + (n0 - p.lambda / p.mu) * (-p.mu * t).exp();
            assert!(
                (n - expect).abs() <= 1e-6 * expect.abs(),
                "N law violated at t={t}: {n} vs {expect}"
            );
        }
    }

    #[test]
    fn total_population_balance_with_disease_deaths() {
        // summing the field gives N' = lambda - mu N - mu' I, so
        // N(t) = lam/mu + (N0 - lam/mu) e^{-mu t} - mu' e^{-mu t} Int_0^t e^{mu s} I ds;
        // the integral is accumulated by Simpson panels on dense output
        let p = Params::baseline(0.392, 0.19);
        let x0: State3 = [400.0, 30.0, 20.0];
        let n0: f64 = x0.iter().sum();
        let pc = p;
        let mut stepper = Dopri5::new(
            move |_t, y: &State3| model::rhs3(*y, &pc),
            0.0,
            x0,
            IntegratorOpts { rel_tol: 1e-10, abs_tol: 1e-10, ..Default::default() },
        );
        let mut quad = 0.0; // Int e^{mu s} I(s) ds
        let t_end = 1500.0;
        while stepper.t < t_end {
            let step = stepper.step(t_end).unwrap();
            let g = |t: f64| (p.mu * t).exp() * step.dense(t)[1];
            let (a, b) = (step.t_old, step.t_new);
            let n_panels = 4;
            for k in 0..n_panels {
                let lo = a + (b - a) * k as f64 / n_panels as f64;
                let hi = a + (b - a) * (k + 1) as f64 / n_panels as f64;
                quad += (hi - lo) / 6.0 * (g(lo) + 4.0 * g(0.5 * (lo + hi)) + g(hi));
            }
            let t = stepper.t;
            let n = stepper.y[0] + stepper.y[1] + stepper.y[2];
            let expect = p.lambda / p.mu
                + (n0 - p.lambda / p.mu) * (-p.mu * t).exp()
                - p.mu_prime * (-p.mu * t).exp() * quad;
            assert!(
                (n - expect).abs() <= 1e-6 * n.abs().max(1.0),
                "population balance violated at t={t}: {n} vs {expect}"
            );
        }
    }

    #[test]
    fn nonnegative_octant_invariant() {
        let p = Params::baseline(0.392, 0.19);
        for x0 in [[900.0, 5.0, 0.0], [100.0, 60.0, 10.0], [10.0, 0.5, 0.0]] {
            let traj = integrate(&p, x0, 3000.0, 1e-9, 1e-9).unwrap();
            for st in &traj.states {
                for v in st {
                    assert!(*v >= -10.0 * 1e-9, "component dipped to {v}");
                }
            }
        }
    }

    #[test]
    fn dense_output_consistent_with_endpoints() {
        let p = Params::baseline(0.3, 0.1);
        let pc = p;
        let mut stepper = Dopri5::new(
            move |_t, y: &State2| model::rhs2(*y, &pc),
            0.0,
            [800.0, 10.0],
            IntegratorOpts { rel_tol: 1e-9, abs_tol: 1e-9, ..Default::default() },
        );
        for _ in 0..50 {
            let y0 = stepper.y;
            let step = stepper.step(f64::MAX).unwrap();
            let d0 = step.dense(step.t_old);
            let d1 = step.dense(step.t_new);
            for i in 0..2 {
                assert!((d0[i] - y0[i]).abs() <= 1e-9 * (1.0 + y0[i].abs()));
                assert!((d1[i] - stepper.y[i]).abs() <= 1e-9 * (1.0 + stepper.y[i].abs()));
            }
            // midpoint stays near a fine re-integration from the step start
            let tm = 0.5 * (step.t_old + step.t_new);
            let mut fine = Dopri5::new(
                move |_t, y: &State2| model::rhs2(*y, &pc),
                step.t_old,
                y0,
                IntegratorOpts { rel_tol: 1e-12, abs_tol: 1e-12, ..Default::default() },
            );
            while fine.t < tm {
                fine.step(tm).unwrap();
            }
            let ym = step.dense(tm);
            for i in 0..2 {
                assert!(
                    (ym[i] - fine.y[i]).abs() <= 1e-6 * (1.0 + fine.y[i].abs()),
                    "dense midpoint off: {} vs {}",
                    ym[i],
                    fine.y[i]
                );
            }
        }
    }

    #[test]
    fn classify_exact_equilibrium() {
        let p = Params::baseline(0.392, 0.19);
        let fate = classify_orbit(&p, [1000.0, 0.0], 2000.0).unwrap();
        assert_eq!(fate.kind, FateKind::ToEquilibrium(EquilibriumLabel::E0));
        assert_eq!(fate.transient_time, 0.0);
    }

    #[test]
    fn classify_rejects_negative_state() {
        let p = Params::baseline(0.392, 0.19);
        assert!(classify_orbit(&p, [-1.0, 0.0], 100.0).is_err());
    }

    #[test]
    fn integrate_validates_tolerances() {
        let p = Params::baseline(0.3, 0.1);
        assert!(integrate(&p, [1.0, 1.0, 0.0], 1.0, 1e-2, 1e-9).is_err());
        assert!(integrate(&p, [1.0, 1.0, 0.0], 1.0, 1e-9, 1e-13).is_err());
    }

    #[test]
    fn portrait_rejects_oversized_grid() {
        let p = Params::baseline(0.3, 0.1);
        assert!(phase_portrait(&p, DEFAULT_WINDOW, 201, 10, 100.0).is_err());
    }
}

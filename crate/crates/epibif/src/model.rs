//! The saturated-incidence, saturated-treatment SIR vector field, its
//! Jacobian, the basic reproduction number, and equilibrium solvers.
//!
//! The R compartment receives but never feeds back, so the (S, I) subsystem
//! is closed; all stability analysis runs on the planar reduction and the R
//! coordinate is reconstructed as `alpha*I / (mu*(1 + rho*I))` when a full
//! state is reported.

use crate::error::{Error, Result};
use crate::numerics::{eig2, poly_real_roots};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub type State2 = [f64; 2];
pub type State3 = [f64; 3];
pub type Mat2 = [[f64; 2]; 2];

/// Eigenvalue real parts with magnitude at or below this are treated as
/// zero when classifying equilibria.
pub const TOL_HYPERBOLIC: f64 = 1e-8;

/// Model parameters. `gamma` is the susceptibles' cautiousness level and
/// `rho` the hospitals' bed-occupancy rate; both live in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub mu_prime: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params::baseline(0.0, 0.0)
    }
}

impl Params {
    /// The fixed baseline rates with a chosen (gamma, rho) pair.
    pub fn baseline(gamma: f64, rho: f64) -> Self {
        Params { beta: 0.05, lambda: 10.0, mu: 0.01, mu_prime: 0.1, alpha: 0.2, gamma, rho }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("mu_prime", self.mu_prime),
            ("alpha", self.alpha),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be strictly positive, got {v}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("rho", self.rho)] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidParams(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn active(&self, which: ActiveParam) -> f64 {
        match which {
            ActiveParam::Gamma => self.gamma,
            ActiveParam::Rho => self.rho,
        }
    }

    pub fn with_active(&self, which: ActiveParam, value: f64) -> Params {
        let mut p = *self;
        match which {
            ActiveParam::Gamma => p.gamma = value,
            ActiveParam::Rho => p.rho = value,
        }
        p
    }
}

/// Which of the two bifurcation parameters a continuation run varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActiveParam {
    Gamma,
    Rho,
}

impl std::fmt::Display for ActiveParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActiveParam::Gamma => write!(f, "gamma"),
            ActiveParam::Rho => write!(f, "rho"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    StableNode,
    StableSpiral,
    Saddle,
    UnstableNode,
    UnstableSpiral,
    NonHyperbolic,
}

impl Stability {
    pub fn is_attracting(self) -> bool {
        matches!(self, Stability::StableNode | Stability::StableSpiral)
    }
}

/// E0 is the disease-free equilibrium; E1..E3 are the endemic equilibria
/// labeled by descending infected count, matching the usual naming where
/// the large-I stable branch is e1 and the saddle below it is e2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquilibriumLabel {
    E0,
    E1,
    E2,
    E3,
}

#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    /// Full state (S, I, R) with R reconstructed from the planar solve.
    pub state: State3,
    pub params: Params,
    /// Spectrum of the reduced (S, I) Jacobian.
    pub eigenvalues: [Complex64; 2],
    pub stability: Stability,
    pub label: EquilibriumLabel,
}

impl EquilibriumPoint {
    pub fn planar(&self) -> State2 {
        [self.state[0], self.state[1]]
    }
}

#[inline]
pub(crate) fn rhs2(x: State2, p: &Params) -> State2 {
    let [s, i] = x;
    let incidence = p.beta * s * i / (1.0 + p.gamma * s);
    let treatment = p.alpha * i / (1.0 + p.rho * i);
    [
        p.lambda - p.mu * s - incidence,
        -(p.mu + p.mu_prime) * i + incidence - treatment,
    ]
}

#[inline]
pub(crate) fn rhs3(x: State3, p: &Params) -> State3 {
    let [s, i, r] = x;
    let d = rhs2([s, i], p);
    let treatment = p.alpha * i / (1.0 + p.rho * i);
    [d[0], d[1], -p.mu * r + treatment]
}

/// Time derivative of the full (S, I, R) state.
pub fn rhs_full(x: State3, p: &Params) -> Result<State3> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rhs_full state"));
    }
    Ok(rhs3(x, p))
}

/// Time derivative of the closed (S, I) subsystem.
pub fn rhs_reduced(x: State2, p: &Params) -> Result<State2> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rhs_reduced state"));
    }
    Ok(rhs2(x, p))
}

/// Analytic Jacobian of the reduced system.
pub fn jacobian_reduced(x: State2, p: &Params) -> Mat2 {
    let [s, i] = x;
    let den_s = 1.0 + p.gamma * s;
    let phi = s / den_s;
    let phi_p = 1.0 / (den_s * den_s);
    let den_i = 1.0 + p.rho * i;
    let psi_p = 1.0 / (den_i * den_i);
    [
        [-p.mu - p.beta * i * phi_p, -p.beta * phi],
        [p.beta * i * phi_p, -(p.mu + p.mu_prime) + p.beta * phi - p.alpha * psi_p],
    ]
}

pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn trace2(m: &Mat2) -> f64 {
    m[0][0] + m[1][1]
}

/// Derivative of `rhs_reduced` with respect to gamma or rho.
pub(crate) fn rhs_param_deriv(x: State2, p: &Params, which: ActiveParam) -> State2 {
    let [s, i] = x;
    match which {
        ActiveParam::Gamma => {
            let den = 1.0 + p.gamma * s;
            let d = p.beta * s * s * i / (den * den);
            [d, -d]
        }
        ActiveParam::Rho => {
            let den = 1.0 + p.rho * i;
            [0.0, p.alpha * i * i / (den * den)]
        }
    }
}

/// Entry-wise derivatives of the reduced Jacobian with respect to state and
/// parameters, used by the fold/Hopf defining systems (Jacobi's formula).
pub(crate) struct JacDerivs {
    pub d_s: Mat2,
    pub d_i: Mat2,
    pub d_gamma: Mat2,
    pub d_rho: Mat2,
}

pub(crate) fn jacobian_derivs(x: State2, p: &Params) -> JacDerivs {
    let [s, i] = x;
    let den_s = 1.0 + p.gamma * s;
    let phi_p = 1.0 / (den_s * den_s);
    let phi_pp = -2.0 * p.gamma / (den_s * den_s * den_s);
    let den_i = 1.0 + p.rho * i;
    let psi_pp = -2.0 * p.rho / (den_i * den_i * den_i);
    // partials of phi and phi' with respect to gamma
    let dphi_dg = -s * s / (den_s * den_s);
    let dphip_dg = -2.0 * s / (den_s * den_s * den_s);
    // partial of psi' with respect to rho
    let dpsip_dr = -2.0 * i / (den_i * den_i * den_i);
    JacDerivs {
        d_s: [
            [-p.beta * i * phi_pp, -p.beta * phi_p],
            [p.beta * i * phi_pp, p.beta * phi_p],
        ],
        d_i: [
            [-p.beta * phi_p, 0.0],
            [p.beta * phi_p, -p.alpha * psi_pp],
        ],
        d_gamma: [
            [-p.beta * i * dphip_dg, -p.beta * dphi_dg],
            [p.beta * i * dphip_dg, p.beta * dphi_dg],
        ],
        d_rho: [[0.0, 0.0], [0.0, -p.alpha * dpsip_dr]],
    }
}

/// Basic reproduction number beta*lambda / ((mu + gamma*lambda)(mu + mu' + alpha)).
pub fn r0(p: &Params) -> f64 {
    p.beta * p.lambda / ((p.mu + p.gamma * p.lambda) * (p.mu + p.mu_prime + p.alpha))
}

/// Reconstructs the recovered compartment at an endemic equilibrium.
pub fn reconstruct_r(i: f64, p: &Params) -> f64 {
    p.alpha * i / (p.mu * (1.0 + p.rho * i))
}

/// Stability class from a planar spectrum.
pub fn classify_equilibrium(eigenvalues: &[Complex64; 2]) -> Stability {
    if eigenvalues.iter().any(|e| e.re.abs() <= TOL_HYPERBOLIC) {
        return Stability::NonHyperbolic;
    }
    let spiral = eigenvalues.iter().any(|e| e.im != 0.0);
    let all_neg = eigenvalues.iter().all(|e| e.re < -TOL_HYPERBOLIC);
    let all_pos = eigenvalues.iter().all(|e| e.re > TOL_HYPERBOLIC);
    if spiral {
        if all_neg {
            Stability::StableSpiral
        } else {
            Stability::UnstableSpiral
        }
    } else if all_neg {
        Stability::StableNode
    } else if all_pos {
        Stability::UnstableNode
    } else {
        Stability::Saddle
    }
}

fn make_point(x: State2, p: &Params, label: EquilibriumLabel) -> EquilibriumPoint {
    let j = jacobian_reduced(x, p);
    let ev = eig2(j[0][0], j[0][1], j[1][0], j[1][1]);
    EquilibriumPoint {
        state: [x[0], x[1], reconstruct_r(x[1], p)],
        params: *p,
        eigenvalues: ev,
        stability: classify_equilibrium(&ev),
        label,
    }
}

/// The disease-free equilibrium e0 = (lambda/mu, 0, 0); stable exactly when
/// the basic reproduction number is below one.
pub fn disease_free_equilibrium(p: &Params) -> EquilibriumPoint {
    make_point([p.lambda / p.mu, 0.0], p, EquilibriumLabel::E0)
}

/// Candidate residual below which a refined endemic root is accepted.
const ENDEMIC_TOL: f64 = 1e-10;

/// All endemic equilibria (S > 0, I > 0), sorted by I ascending.
///
/// The equilibrium conditions reduce to a cubic in v = 1 + rho*I; real roots
/// with v > 1 are mapped back to (S, I) and refined by Newton. Labels run
/// E1, E2, E3 by descending I.
pub fn endemic_equilibria(p: &Params) -> Result<Vec<EquilibriumPoint>> {
    p.validate()?;
    let c = p.mu + p.mu_prime;
    let mut candidates: Vec<State2> = Vec::new();
    let mut cubic: Vec<f64> = Vec::new();

    if p.rho == 0.0 {
        // unsaturated treatment: the per-capita balance pins u = c + alpha
        let u = c + p.alpha;
        let den = p.beta - p.gamma * u;
        if den > 0.0 {
            let s = u / den;
            let i = (p.lambda - p.mu * s) / u;
            if s > 0.0 && i > 0.0 {
                candidates.push([s, i]);
            }
        }
    } else {
        // (lam*rho*v - (c v + alpha)(v - 1)) ((beta - gamma c) v - gamma alpha)
        //   = mu rho v (c v + alpha),  v = 1 + rho I
        let a_q = -c;
        let b_q = p.lambda * p.rho + c - p.alpha;
        let c_q = p.alpha;
        let d_l = p.beta - p.gamma * c;
        let e_l = -p.gamma * p.alpha;
        cubic = vec![
            a_q * d_l,
            a_q * e_l + b_q * d_l - p.mu * p.rho * c,
            b_q * e_l + c_q * d_l - p.mu * p.rho * p.alpha,
            c_q * e_l,
        ];
        let roots = match poly_real_roots(&cubic) {
            Ok(r) => r,
            Err(_) => return Err(Error::EndemicSolveFailed { coeffs: cubic }),
        };
        for v in roots {
            if v <= 1.0 {
                continue;
            }
            let i = (v - 1.0) / p.rho;
            let u = (c * v + p.alpha) / v;
            let den = p.beta - p.gamma * u;
            if den <= 0.0 {
                continue;
            }
            let s = u / den;
            if s > 0.0 {
                candidates.push([s, i]);
            }
        }
    }

    let mut points: Vec<State2> = Vec::new();
    for cand in candidates {
        match refine_equilibrium(cand, p) {
            Some(x) => points.push(x),
            None => return Err(Error::EndemicSolveFailed { coeffs: cubic }),
        }
    }
    // de-duplicate (a fold can surface the same double root twice)
    points.sort_by(|a, b| a[1].partial_cmp(&b[1]).unwrap());
    points.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-7 * (1.0 + b[0].abs()) && (a[1] - b[1]).abs() < 1e-7 * (1.0 + b[1].abs()));

    let n = points.len();
    Ok(points
        .into_iter()
        .enumerate()
        .map(|(k, x)| {
            // descending-I labels: highest I is E1
            let label = match n - 1 - k {
                0 => EquilibriumLabel::E1,
                1 => EquilibriumLabel::E2,
                _ => EquilibriumLabel::E3,
            };
            make_point(x, p, label)
        })
        .collect())
}

/// Newton-refines a candidate equilibrium of the reduced system.
pub(crate) fn refine_equilibrium(x0: State2, p: &Params) -> Option<State2> {
    let mut x = x0;
    for _ in 0..50 {
        let f = rhs2(x, p);
        let norm = f[0].abs().max(f[1].abs());
        if !norm.is_finite() {
            return None;
        }
        if norm <= ENDEMIC_TOL * 1e-2 {
            break;
        }
        let j = jacobian_reduced(x, p);
        let det = det2(&j);
        if det.abs() < 1e-300 {
            return None;
        }
        x[0] -= (j[1][1] * f[0] - j[0][1] * f[1]) / det;
        x[1] -= (-j[1][0] * f[0] + j[0][0] * f[1]) / det;
    }
    let f = rhs2(x, p);
    if f[0].abs().max(f[1].abs()) <= ENDEMIC_TOL && x[0] > 0.0 && x[1] > 0.0 {
        Some(x)
    } else {
        None
    }
}

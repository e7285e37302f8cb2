//! Small dense linear algebra, damped Newton iteration, and polynomial
//! root-finding shared by the equilibrium, continuation, and cycle solvers.
//!
//! Everything here is sized for the tiny systems this crate produces:
//! bordered continuation systems up to a handful of unknowns, 2x2 and 3x3
//! eigenproblems, and polynomials of degree at most four.

use crate::error::{Error, Result};
use num_complex::Complex64;

/// Pivot magnitude below which LU elimination reports a singular matrix.
pub const PIVOT_TOL: f64 = 1e-14;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Solves A x = b by LU factorization with partial pivoting.
///
/// Intended for the bordered continuation systems of this crate (n <= 8).
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.rows(), a.cols(), "solve_linear needs a square matrix");
    assert_eq!(a.rows(), b.len(), "dimension mismatch");
    debug_assert!(a.rows() <= 8, "bordered systems are tiny by construction");
    let mut lu = a.data.clone();
    let mut x = b.to_vec();
    lu_solve_in_place(&mut lu, &mut x, a.rows())?;
    Ok(x)
}

/// In-place LU solve on a row-major n x n matrix. Used directly by the
/// cycle solvers whose multiple-shooting systems exceed the bordered-size
/// contract of [`solve_linear`].
pub(crate) fn lu_solve_in_place(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for k in 0..n {
        // partial pivot
        let mut piv = k;
        let mut max = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > max {
                max = v;
                piv = i;
            }
        }
        if max < PIVOT_TOL {
            return Err(Error::SingularMatrix { pivot: max });
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            b.swap(k, piv);
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let factor = a[i * n + k] / pivot;
            a[i * n + k] = factor;
            for j in k + 1..n {
                a[i * n + j] -= factor * a[k * n + j];
            }
            b[i] -= factor * b[k];
        }
    }
    // back substitution
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= a[i * n + j] * b[j];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(())
}

/// Eigenvalues of a 2x2 or 3x3 matrix via the characteristic polynomial.
pub fn eigvals_small(a: &Matrix) -> Vec<Complex64> {
    assert_eq!(a.rows(), a.cols());
    match a.rows() {
        2 => eig2(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]).to_vec(),
        3 => eig3(a),
        n => panic!("eigvals_small supports n in {{2,3}}, got {n}"),
    }
}

/// Eigenvalues of [[a, b], [c, d]] from trace and determinant.
pub fn eig2(a: f64, b: f64, c: f64, d: f64) -> [Complex64; 2] {
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        // avoid cancellation: compute the larger-magnitude root first
        let q = if tr >= 0.0 { (tr + s) / 2.0 } else { (tr - s) / 2.0 };
        let other = if q.abs() > 0.0 { det / q } else { (tr - q.signum() * s) / 2.0 };
        [Complex64::new(q, 0.0), Complex64::new(other, 0.0)]
    } else {
        let im = (-disc).sqrt() / 2.0;
        let re = tr / 2.0;
        [Complex64::new(re, im), Complex64::new(re, -im)]
    }
}

fn eig3(a: &Matrix) -> Vec<Complex64> {
    // characteristic polynomial: l^3 - c2 l^2 + c1 l - c0
    let c2 = a[(0, 0)] + a[(1, 1)] + a[(2, 2)];
    let m00 = a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)];
    let m11 = a[(0, 0)] * a[(2, 2)] - a[(0, 2)] * a[(2, 0)];
    let m22 = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let c1 = m00 + m11 + m22;
    let c0 = a[(0, 0)] * m00 - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
        + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)]);

    let eval = |x: f64| ((x - c2) * x + c1) * x - c0;
    let deriv = |x: f64| (3.0 * x - 2.0 * c2) * x + c1;
    let polish = |mut x: f64| {
        for _ in 0..3 {
            let d = deriv(x);
            if d.abs() > 1e-300 {
                x -= eval(x) / d;
            }
        }
        x
    };

    // depressed cubic t^3 + p t + q with l = t + c2/3
    let shift = c2 / 3.0;
    let p = c1 - c2 * c2 / 3.0;
    let q = -2.0 * c2 * c2 * c2 / 27.0 + c1 * c2 / 3.0 - c0;
    let disc = -4.0 * p * p * p - 27.0 * q * q;

    if disc >= 0.0 && p < 0.0 {
        // three real roots, trigonometric form
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        let mut out: Vec<Complex64> = (0..3)
            .map(|k| {
                let t = m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
                Complex64::new(polish(t + shift), 0.0)
            })
            .collect();
        out.sort_by(|x, y| x.re.partial_cmp(&y.re).unwrap());
        out
    } else {
        // one real root via Cardano, complex pair by synthetic division
        let t = if p == 0.0 {
            (-q).cbrt()
        } else {
            let s = (q * q / 4.0 + p * p * p / 27.0).sqrt();
            let u = (-q / 2.0 + s).cbrt();
            let v = (-q / 2.0 - s).cbrt();
            u + v
        };
        let r = polish(t + shift);
        // divide l^3 - c2 l^2 + c1 l - c0 by (l - r)
        let b1 = r - c2;
        let b0 = r * b1 + c1;
        let pair = eig2(0.0, -b0, 1.0, -b1);
        vec![Complex64::new(r, 0.0), pair[0], pair[1]]
    }
}

/// Report returned by [`newton`].
#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub root: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Newton iteration with a step-halving line search (at most 8
/// halvings per step). Non-finite residual evaluations are reported as
/// failure, never propagated as a panic.
pub fn newton<F, J>(mut f: F, mut jac: J, x0: &[f64], tol: f64, max_iter: usize) -> NewtonReport
where
    F: FnMut(&[f64]) -> Vec<f64>,
    J: FnMut(&[f64]) -> Matrix,
{
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut fnorm = max_norm(&fx);
    if !fnorm.is_finite() {
        return NewtonReport { root: x, residual_norm: f64::INFINITY, iterations: 0, converged: false };
    }
    for it in 0..max_iter {
        if fnorm <= tol {
            return NewtonReport { root: x, residual_norm: fnorm, iterations: it, converged: true };
        }
        let j = jac(&x);
        if !j.is_finite() {
            return NewtonReport { root: x, residual_norm: fnorm, iterations: it, converged: false };
        }
        let neg: Vec<f64> = fx.iter().map(|v| -v).collect();
        let step = match solve_linear(&j, &neg) {
            Ok(s) => s,
            Err(_) => {
                return NewtonReport { root: x, residual_norm: fnorm, iterations: it, converged: false }
            }
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=8 {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi + lambda * si).collect();
            let ft = f(&trial);
            let fn_t = max_norm(&ft);
            if fn_t.is_finite() && (fn_t < fnorm || fn_t <= tol) {
                x = trial;
                fx = ft;
                fnorm = fn_t;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return NewtonReport { root: x, residual_norm: fnorm, iterations: it + 1, converged: false };
        }
    }
    let converged = fnorm <= tol;
    NewtonReport { root: x, residual_norm: fnorm, iterations: max_iter, converged }
}

/// Evaluates a polynomial given leading-coefficient-first `coeffs` at `x`.
pub fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

fn poly_eval_c(coeffs: &[f64], z: Complex64) -> Complex64 {
    coeffs.iter().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// All real roots of a polynomial (coefficients leading-first), ascending,
/// with multiplicities preserved. Each root is polished by Newton until
/// |p(r)| is below 1e-10 times the evaluation scale.
pub fn poly_real_roots(coeffs: &[f64]) -> Result<Vec<f64>> {
    let first = coeffs.iter().position(|c| c.abs() > 0.0).ok_or(Error::DegeneratePolynomial)?;
    let c = &coeffs[first..];
    let deg = c.len() - 1;
    if deg == 0 {
        return Err(Error::DegeneratePolynomial);
    }
    let mut roots = match deg {
        1 => vec![-c[1] / c[0]],
        2 => {
            let (a, b, cc) = (c[0], c[1], c[2]);
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                vec![]
            } else {
                let s = disc.sqrt();
                let q = -(b + b.signum() * s) / 2.0;
                let r1 = q / a;
                let r2 = if q.abs() > 0.0 { cc / q } else { -b / (2.0 * a) };
                vec![r1, r2]
            }
        }
        _ => durand_kerner_real(c),
    };

    // Newton polish against the original polynomial
    let deriv: Vec<f64> = c[..deg].iter().enumerate().map(|(i, &ci)| ci * (deg - i) as f64).collect();
    for r in roots.iter_mut() {
        for _ in 0..40 {
            let p = poly_eval(c, *r);
            let d = poly_eval(&deriv, *r);
            if d.abs() < 1e-300 || !p.is_finite() {
                break;
            }
            let step = p / d;
            *r -= step;
            if step.abs() <= 1e-15 * (1.0 + r.abs()) {
                break;
            }
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(roots)
}

/// Durand-Kerner iteration for all complex roots, filtered to near-real ones.
fn durand_kerner_real(c: &[f64]) -> Vec<f64> {
    let deg = c.len() - 1;
    let monic: Vec<f64> = c.iter().map(|v| v / c[0]).collect();
    // scale-aware initial guesses on a spiral
    let radius = 1.0 + monic.iter().skip(1).fold(0.0_f64, |m, v| m.max(v.abs()));
    let seed = Complex64::new(0.4, 0.9);
    let mut z: Vec<Complex64> = (0..deg).map(|k| seed.powu(k as u32 + 1) * radius).collect();
    for _ in 0..400 {
        let mut delta_max = 0.0_f64;
        for i in 0..deg {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..deg {
                if j != i {
                    denom *= z[i] - z[j];
                }
            }
            if denom.norm() < 1e-300 {
                continue;
            }
            let step = poly_eval_c(&monic, z[i]) / denom;
            z[i] -= step;
            delta_max = delta_max.max(step.norm());
        }
        if delta_max < 1e-14 * radius {
            break;
        }
    }
    z.iter()
        .filter(|r| r.im.abs() <= 1e-6 * (1.0 + r.re.abs()))
        .map(|r| r.re)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solve_identity() {
        let a = Matrix::identity(3);
        let x = solve_linear(&a, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn solve_diagonal() {
        let a = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let x = solve_linear(&a, &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_singular_reports_pivot() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        match solve_linear(&a, &[1.0, 2.0]) {
            Err(Error::SingularMatrix { pivot }) => assert!(pivot < 1e-14),
            other => panic!("expected SingularMatrix, got {other:?}"),
        }
    }

    #[test]
    fn solve_residual_bound_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(2..=5);
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = rng.gen_range(-1.0..1.0);
                }
                a[(i, i)] += 3.0; // keep well conditioned
            }
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = solve_linear(&a, &b).unwrap();
            let bnorm = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                let mut ax = 0.0;
                for j in 0..n {
                    ax += a[(i, j)] * x[j];
                }
                assert!((ax - b[i]).abs() <= 1e-12 * (1.0 + bnorm));
            }
        }
    }

    #[test]
    fn eig2_rotation() {
        let ev = eig2(0.0, -1.0, 1.0, 0.0);
        assert!((ev[0].im.abs() - 1.0).abs() < 1e-14 && ev[0].re.abs() < 1e-14);
        assert!((ev[1].im.abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig2_triangular() {
        let ev = eig2(-0.01, 3.7, 0.0, -0.25);
        let mut res: Vec<f64> = ev.iter().map(|e| e.re).collect();
        res.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((res[0] + 0.25).abs() < 1e-14);
        assert!((res[1] + 0.01).abs() < 1e-14);
        assert!(ev.iter().all(|e| e.im == 0.0));
    }

    #[test]
    fn eig3_symmetric_real_and_char_poly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut a = Matrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..=i {
                    let v = rng.gen_range(-2.0..2.0);
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
            let ev = eigvals_small(&a);
            let tr = a[(0, 0)] + a[(1, 1)] + a[(2, 2)];
            let sum: Complex64 = ev.iter().sum();
            assert!(ev.iter().all(|e| e.im.abs() < 1e-9), "symmetric matrix has real spectrum");
            assert!((sum.re - tr).abs() < 1e-10);
            // characteristic polynomial evaluates to ~0 at each eigenvalue
            for e in &ev {
                let l = e.re;
                let m = Matrix::from_rows(&[
                    &[a[(0, 0)] - l, a[(0, 1)], a[(0, 2)]],
                    &[a[(1, 0)], a[(1, 1)] - l, a[(1, 2)]],
                    &[a[(2, 0)], a[(2, 1)], a[(2, 2)] - l],
                ]);
                let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                    - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                    + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
                assert!(det.abs() <= 1e-9, "char poly residual {det}");
            }
        }
    }

    #[test]
    fn eigvals_trace_det_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let a = Matrix::from_rows(&[
                &[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                &[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            ]);
            let ev = eigvals_small(&a);
            let tr = a[(0, 0)] + a[(1, 1)];
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            let sum = ev[0] + ev[1];
            let prod = ev[0] * ev[1];
            assert!((sum.re - tr).abs() < 1e-10 && sum.im.abs() < 1e-10);
            assert!((prod.re - det).abs() <= 1e-10 * (1.0 + det.abs()));
        }
    }

    #[test]
    fn newton_sqrt() {
        let rep = newton(
            |x| vec![x[0] * x[0] - 4.0],
            |x| Matrix::from_rows(&[&[2.0 * x[0]]]),
            &[3.0],
            1e-12,
            50,
        );
        assert!(rep.converged);
        assert!((rep.root[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn newton_no_real_root() {
        let rep = newton(
            |x| vec![x[0] * x[0] + 1.0],
            |x| Matrix::from_rows(&[&[2.0 * x[0]]]),
            &[1.0],
            1e-12,
            40,
        );
        assert!(!rep.converged);
    }

    #[test]
    fn newton_row_scaling_invariance() {
        // scaling F by a positive constant moves the root by <= tol
        let f = |x: &[f64]| vec![(x[0] - 1.3) * (x[0] + 2.0)];
        let j = |x: &[f64]| Matrix::from_rows(&[&[2.0 * x[0] + 0.7]]);
        let r1 = newton(f, j, &[2.0], 1e-12, 60);
        let fs = |x: &[f64]| vec![250.0 * (x[0] - 1.3) * (x[0] + 2.0)];
        let js = |x: &[f64]| Matrix::from_rows(&[&[250.0 * (2.0 * x[0] + 0.7)]]);
        let r2 = newton(fs, js, &[2.0], 1e-12, 60);
        assert!(r1.converged && r2.converged);
        assert!((r1.root[0] - r2.root[0]).abs() <= 1e-12);
    }

    #[test]
    fn roots_quadratic() {
        let r = poly_real_roots(&[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(r.len(), 2);
        assert!((r[0] + 1.0).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roots_double_root_multiplicity() {
        // (x-2)^2 (x+1) = x^3 - 3x^2 + 4
        let r = poly_real_roots(&[1.0, -3.0, 0.0, 4.0]).unwrap();
        assert_eq!(r.len(), 3);
        assert!((r[0] + 1.0).abs() < 1e-8);
        assert!((r[1] - 2.0).abs() < 1e-6 && (r[2] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn roots_degree_zero_is_error() {
        assert!(poly_real_roots(&[5.0]).is_err());
        assert!(poly_real_roots(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn roots_random_cubics_match_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let mut rs: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lead = rng.gen_range(0.5..2.0);
            // expand lead*(x-r0)(x-r1)(x-r2)
            let c = [
                lead,
                -lead * (rs[0] + rs[1] + rs[2]),
                lead * (rs[0] * rs[1] + rs[0] * rs[2] + rs[1] * rs[2]),
                -lead * rs[0] * rs[1] * rs[2],
            ];
            let out = poly_real_roots(&c).unwrap();
            assert_eq!(out.len(), 3);
            for (a, b) in rs.iter().zip(&out) {
                assert!((a - b).abs() < 1e-9, "expected {a}, got {b}");
            }
        }
    }

    #[test]
    fn roots_quartic() {
        // (x^2+1)(x-1)(x-3) = x^4 -4x^3 +4x^2 -4x +3
        let r = poly_real_roots(&[1.0, -4.0, 4.0, -4.0, 3.0]).unwrap();
        assert_eq!(r.len(), 2);
        assert!((r[0] - 1.0).abs() < 1e-9 && (r[1] - 3.0).abs() < 1e-9);
    }
}

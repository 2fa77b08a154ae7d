//! The linearized operators `L_+ = -Delta + 1 + V + 2 Q phi_{Q .}` and
//! `L_- = -Delta + 1 + V` restricted to a spherical-harmonic sector `ell`.
//!
//! Matrices are stored as `S = M L` with `M` the diagonal mass of
//! [`RadialLaplacian`]; `S` is symmetric up to the nonlocal quadrature.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ground_state::GroundStateBundle;
use crate::numerics::{fit_line, quad};
use crate::radial_core::{sector_potential, Cumulative, Parity, RadialFn, RadialGrid, RadialLaplacian, OMEGA3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

#[derive(Debug, Clone)]
pub struct SectorOperator {
    pub ell: usize,
    pub sign: Sign,
    pub grid: Arc<RadialGrid>,
    /// `M L` as assembled; the nonlocal quadrature makes it slightly non-symmetric
    pub full: DMatrix<f64>,
    /// symmetric part of `full`, used for spectral work
    pub sym: DMatrix<f64>,
    pub mass: Vec<f64>,
}

/// `Gamma_ell(t)` from its definition as a Legendre coefficient.
pub fn gamma_coeff(ell: usize, t: f64) -> Result<f64> {
    check_ratio(t)?;
    let c = (2 * ell + 1) as f64 / (2.0 * ((ell + 1) * (ell + 1)) as f64);
    let v = quad(|eta| legendre(ell, eta) / (1.0 + t * t - 2.0 * t * eta), -1.0, 1.0, 1e-14)?;
    Ok(c * v)
}

/// `Gamma_ell(t)` from the positive integrand obtained by Rodrigues' formula.
pub fn gamma_coeff_positive(ell: usize, t: f64) -> Result<f64> {
    check_ratio(t)?;
    let n = ell as i32;
    let c = (2 * ell + 1) as f64 / (2.0 * ((ell + 1) * (ell + 1)) as f64) / t;
    let z = (1.0 + t * t) / (2.0 * t);
    let v = quad(
        |eta| {
            let q = (1.0 - eta * eta) / (2.0 * (z - eta));
            q.powi(n) / (2.0 * (z - eta))
        },
        -1.0,
        1.0,
        1e-14,
    )?;
    Ok(c * v)
}

fn check_ratio(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return invalid(format!("ratio must lie in (0, 1), got {t}"));
    }
    Ok(())
}

fn legendre(n: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return p0;
    }
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

impl SectorOperator {
    /// Assemble from the ground state `q` and its potential `v = phi_{q^2}`.
    pub fn from_profiles(q: &RadialFn, v: &RadialFn, ell: usize, sign: Sign) -> Result<Self> {
        if !q.grid.compatible(&v.grid) {
            return invalid("grid mismatch between Q and V");
        }
        let grid = q.grid.clone();
        let n = grid.n;
        let lap = RadialLaplacian::new(&grid, ell);
        let mass = lap.mass.clone();
        let mut full = DMatrix::<f64>::zeros(n, n);
        let bw = lap.stiffness.kl;
        for i in 0..n {
            for j in i.saturating_sub(bw)..(i + bw + 1).min(n) {
                full[(i, j)] = lap.stiffness.get(i, j);
            }
            full[(i, i)] += mass[i] * (1.0 + v.re[i]);
        }
        if sign == Sign::Plus {
            let cum = Cumulative::new(&grid, Parity::Odd);
            let c = cum.dense(n);
            let tot = cum.total_weights(n);
            let l = ell as i32;
            let k = -OMEGA3 / (ell as f64 + 1.0);
            let r = &grid.r;
            let sin: Vec<f64> = (0..n).map(|j| r[j].powi(l + 3) * q.re[j]).collect();
            let sout: Vec<f64> = (0..n).map(|j| r[j].powi(1 - l) * q.re[j]).collect();
            for i in 0..n {
                let a = 2.0 * q.re[i] * k * mass[i];
                let (ri_in, ri_out) = (r[i].powi(-l - 2), r[i].powi(l));
                let ci = &c[i];
                for j in 0..n {
                    full[(i, j)] += a * (ri_in * ci[j] * sin[j] + ri_out * (tot[j] - ci[j]) * sout[j]);
                }
            }
        }
        let sym = (&full + full.transpose()) * 0.5;
        Ok(SectorOperator { ell, sign, grid, full, sym, mass })
    }

    pub fn parity(&self) -> Parity {
        Parity::of_power(self.ell as i32)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let y = &self.full * DVector::from_column_slice(x);
        (0..x.len()).map(|i| y[i] / self.mass[i]).collect()
    }

    pub fn apply(&self, f: &RadialFn) -> RadialFn {
        f.with_values(self.matvec(&f.re), self.parity())
    }

    /// `max |S_ij - S_ji| / max |S_ij|` for the assembled `M L`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.full.nrows();
        let mut d: f64 = 0.0;
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                d = d.max((self.full[(i, j)] - self.full[(j, i)]).abs());
                m = m.max(self.full[(i, j)].abs());
            }
        }
        d / m
    }
}

pub fn assemble_sector(b: &GroundStateBundle, ell: usize, sign: Sign) -> Result<SectorOperator> {
    SectorOperator::from_profiles(&b.q, &b.v, ell, sign)
}

/// Matrix-free `L_{+/-}` on sector `ell` using the fast sector potential.
pub fn apply_matrix_free(q: &RadialFn, v: &RadialFn, f: &RadialFn, ell: usize, sign: Sign) -> RadialFn {
    let lap = RadialLaplacian::new(&q.grid, ell);
    let mut out = lap.apply(&f.re);
    for i in 0..out.len() {
        out[i] += (1.0 + v.re[i]) * f.re[i];
    }
    if sign == Sign::Plus {
        let p = sector_potential(&q.mul(f), ell);
        for i in 0..out.len() {
            out[i] += 2.0 * q.re[i] * p.re[i];
        }
    }
    f.with_values(out, Parity::of_power(ell as i32))
}

#[derive(Debug, Clone)]
pub struct SectorSolution {
    pub u: RadialFn,
    /// `||L u - f|| / ||f||` after removing the kernel component
    pub residual: f64,
    /// fitted `delta` in `|u| ~ C e^{-delta r}`
    pub tail_rate: f64,
}

/// Solve `L u = f` on the sector with `u` orthogonal to `constraints`.
///
/// When constraints are given, `f` must be orthogonal to them as well (they are
/// the kernel directions); otherwise a near-singular error reports the worst
/// normalized inner product.
pub fn solve_sector(op: &SectorOperator, f: &RadialFn, constraints: &[RadialFn]) -> Result<SectorSolution> {
    let n = op.grid.n;
    if f.re.len() != n {
        return invalid("right-hand side on a different grid");
    }
    let fnorm = f.norm();
    let tol = 1e-6;
    for k in constraints {
        let ip = crate::radial_core::inner(f, k) / (fnorm.max(1e-300) * k.norm());
        if ip.abs() > tol {
            return Err(Error::NearSingularRhs { inner: ip, tol });
        }
    }
    let nc = constraints.len();
    let dim = n + nc;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    a.view_mut((0, 0), (n, n)).copy_from(&op.full);
    for (c, k) in constraints.iter().enumerate() {
        for i in 0..n {
            let v = op.mass[i] * k.re[i];
            a[(i, n + c)] = v;
            a[(n + c, i)] = v;
        }
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        rhs[i] = op.mass[i] * f.re[i];
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver(format!("singular sector matrix (ell = {})", op.ell)))?;
    let mut u: Vec<f64> = sol.as_slice()[..n].to_vec();
    // Gram-Schmidt against the declared kernel in the operator pairing
    for k in constraints {
        let num: f64 = (0..n).map(|i| op.mass[i] * u[i] * k.re[i]).sum();
        let den: f64 = (0..n).map(|i| op.mass[i] * k.re[i] * k.re[i]).sum();
        for i in 0..n {
            u[i] -= num / den * k.re[i];
        }
    }
    let u = f.with_values(u, op.parity());
    let lu = op.apply(&u);
    let mut res = lu.axpby(1.0, f, -1.0);
    for k in constraints {
        let c = crate::radial_core::inner(&res, k) / k.norm2();
        res = res.axpby(1.0, k, -c);
    }
    let residual = res.norm() / fnorm.max(1e-300);
    let tail_rate = tail_decay_rate(&u);
    Ok(SectorSolution { u, residual, tail_rate })
}

/// Fitted `delta` in `|u(r)| ~ C e^{-delta r}` over the outer part of the
/// region where `|u|` is above round-off.
pub fn tail_decay_rate(u: &RadialFn) -> f64 {
    let peak = u.max_abs();
    if peak == 0.0 {
        return f64::INFINITY;
    }
    let g = &u.grid;
    let imax = (0..g.n).rev().find(|&i| u.re[i].abs() > 1e-11 * peak).unwrap_or(0);
    let r_hi = g.r[imax];
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..=imax)
        .filter(|&i| g.r[i] > 0.5 * r_hi && u.re[i] != 0.0)
        .map(|i| (g.r[i], u.re[i].abs().ln()))
        .unzip();
    match fit_line(&xs, &ys) {
        Ok(fit) => -fit.slope,
        Err(_) => f64::NAN,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenReport {
    pub lowest: f64,
    /// converged Ritz values from the bottom of the spectrum, ascending
    pub ritz: Vec<f64>,
    pub shift: f64,
    pub iterations: usize,
}

/// Lowest eigenvalue of `L` on the weighted complement of `deflate`, by
/// shift-invert Lanczos with full reorthogonalization. The shift is lowered
/// until `B - shift` admits a Cholesky factor, which certifies it lies below
/// the spectrum.
pub fn lowest_eigenvalue(op: &SectorOperator, deflate: &[RadialFn]) -> Result<EigenReport> {
    let n = op.grid.n;
    let b = projected_matrix(op, deflate);
    let mut shift = -1.0;
    let mut chol = None;
    for _ in 0..60 {
        let mut m = b.clone();
        for i in 0..n {
            m[(i, i)] -= shift;
        }
        if let Some(c) = m.cholesky() {
            chol = Some(c);
            break;
        }
        shift = 2.0 * shift - 1.0;
    }
    let chol = chol.ok_or_else(|| Error::Solver("no shift below the spectrum found".into()))?;

    let max_steps = 400.min(n);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(max_steps);
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut v = DVector::from_iterator(n, (0..n).map(|i| (1.0 + op.grid.r[i]) * (-0.5 * op.grid.r[i]).exp()));
    v /= v.norm();
    let mut history = Vec::new();
    for step in 0..max_steps {
        basis.push(v.clone());
        let mut w = chol.solve(&v);
        let a = w.dot(&v);
        alpha.push(a);
        for q in &basis {
            let c = w.dot(q);
            w.axpy(-c, q, 1.0);
        }
        for q in &basis {
            let c = w.dot(q);
            w.axpy(-c, q, 1.0);
        }
        let bnext = w.norm();
        let k = alpha.len();
        if k >= 3 {
            let mut t = DMatrix::<f64>::zeros(k, k);
            for i in 0..k {
                t[(i, i)] = alpha[i];
                if i + 1 < k {
                    t[(i, i + 1)] = beta[i];
                    t[(i + 1, i)] = beta[i];
                }
            }
            let eig = t.symmetric_eigen();
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
            let top = idx[0];
            let theta = eig.eigenvalues[top];
            let err = (bnext * eig.eigenvectors[(k - 1, top)]).abs();
            history.push(err / theta);
            if err <= 1e-12 * theta || bnext < 1e-14 || step + 1 == max_steps {
                if err > 1e-8 * theta {
                    return Err(Error::Convergence {
                        what: "lowest eigenvalue".into(),
                        iterations: step + 1,
                        residual: err / theta,
                        history,
                    });
                }
                let ritz: Vec<f64> = idx
                    .iter()
                    .filter(|&&j| (bnext * eig.eigenvectors[(k - 1, j)]).abs() <= 1e-8 * eig.eigenvalues[j].abs())
                    .map(|&j| shift + 1.0 / eig.eigenvalues[j])
                    .collect();
                return Ok(EigenReport { lowest: shift + 1.0 / theta, ritz, shift, iterations: step + 1 });
            }
        }
        beta.push(bnext);
        v = w / bnext;
    }
    unreachable!()
}

/// `M^{-1/2} S M^{-1/2}` with the `deflate` directions (in that frame) pushed
/// to the top of the spectrum.
fn projected_matrix(op: &SectorOperator, deflate: &[RadialFn]) -> DMatrix<f64> {
    let n = op.grid.n;
    let sq: Vec<f64> = op.mass.iter().map(|m| m.sqrt()).collect();
    let mut b = op.sym.clone();
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] /= sq[i] * sq[j];
        }
    }
    if deflate.is_empty() {
        return b;
    }
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    for d in deflate {
        let mut x = DVector::from_iterator(n, (0..n).map(|i| sq[i] * d.re[i]));
        for q in &dirs {
            let c = x.dot(q);
            x.axpy(-c, q, 1.0);
        }
        let nx = x.norm();
        if nx > 0.0 {
            dirs.push(x / nx);
        }
    }
    let k = dirs.len();
    let d = DMatrix::from_columns(&dirs);
    let bd = &b * &d;
    let dbd = d.transpose() * &bd;
    let top = b.diagonal().max().abs() + 1.0;
    let mut out = b - &bd * d.transpose() - &d * bd.transpose() + &d * dbd * d.transpose();
    out += &d * d.transpose() * top;
    debug_assert_eq!(k, d.ncols());
    // restore exact symmetry lost to round-off
    let t = out.transpose();
    (out + t) * 0.5
}

/// Dense symmetric eigenvalues of the deflated pencil, ascending; used as an
/// oracle for [`lowest_eigenvalue`].
pub fn dense_eigenvalues(op: &SectorOperator, deflate: &[RadialFn]) -> Vec<f64> {
    let b = projected_matrix(op, deflate);
    let mut ev: Vec<f64> = b.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_zero_at_half_is_ln3() {
        let g = gamma_coeff(0, 0.5).unwrap();
        assert!((g - 3f64.ln()).abs() < 1e-12);
        let h = gamma_coeff_positive(0, 0.5).unwrap();
        assert!((h - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_closed_form_ell_zero() {
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let exact = ((1.0 + t) / (1.0 - t)).ln() / (2.0 * t);
            assert!((gamma_coeff(0, t).unwrap() - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_representations_agree_and_decrease() {
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let mut prev = f64::INFINITY;
            for ell in 0..=11 {
                let a = gamma_coeff(ell, t).unwrap();
                let b = gamma_coeff_positive(ell, t).unwrap();
                assert!((a - b).abs() < 1e-8, "ell={ell} t={t} {a} {b}");
                assert!(b > 0.0 && b < prev, "ell={ell} t={t}");
                prev = b;
            }
        }
    }

    #[test]
    fn gamma_rejects_bad_ratio() {
        assert!(gamma_coeff(0, 0.0).is_err());
        assert!(gamma_coeff(1, 1.0).is_err());
        assert!(gamma_coeff_positive(1, -0.3).is_err());
    }

    #[test]
    fn legendre_values() {
        assert_eq!(legendre(0, 0.3), 1.0);
        assert!((legendre(2, 0.5) - (-0.125)).abs() < 1e-15);
        assert!((legendre(3, 1.0) - 1.0).abs() < 1e-15);
    }

    use crate::ground_state::test_bundle;
    use crate::radial_core::inner;

    #[test]
    fn sector_matrices_nearly_symmetric() {
        let b = test_bundle();
        for ell in 0..3 {
            for sign in [Sign::Plus, Sign::Minus] {
                let op = assemble_sector(b, ell, sign).unwrap();
                let d = op.symmetry_defect();
                assert!(d < 1e-8, "ell={ell} {sign:?} defect {d}");
            }
        }
    }

    #[test]
    fn dense_matches_matrix_free() {
        let b = test_bundle();
        for ell in 0..4 {
            let f = RadialFn::from_fn(&b.grid, Parity::of_power(ell as i32), |r| {
                r.powi(ell as i32) * (-0.7 * r * r).exp() * (1.0 + r)
            });
            for sign in [Sign::Plus, Sign::Minus] {
                let op = assemble_sector(b, ell, sign).unwrap();
                let a = op.apply(&f);
                let m = apply_matrix_free(&b.q, &b.v, &f, ell, sign);
                let err = a.axpby(1.0, &m, -1.0).norm() / m.norm();
                assert!(err < 1e-10, "ell={ell} {sign:?} {err}");
            }
        }
    }

    #[test]
    fn solve_reproduces_rho() {
        let b = test_bundle();
        let op = assemble_sector(b, 0, Sign::Plus).unwrap();
        let f = b.q.mul_rpow(2).scale(-1.0);
        let sol = solve_sector(&op, &f, &[]).unwrap();
        assert!(sol.residual < 1e-8, "{}", sol.residual);
        let err = sol.u.axpby(1.0, &b.rho, -1.0).norm() / b.rho.norm();
        assert!(err < 1e-6, "{err}");
        assert!(sol.tail_rate > 0.5, "{}", sol.tail_rate);
    }

    #[test]
    fn constrained_solve_in_minus_sector() {
        let b = test_bundle();
        let op = assemble_sector(b, 0, Sign::Minus).unwrap();
        let f = b.lq.scale(-4.0);
        let sol = solve_sector(&op, &f, &[b.q.clone()]).unwrap();
        assert!(sol.residual < 1e-8, "{}", sol.residual);
        let r2q = b.q.mul_rpow(2);
        let c = inner(&r2q, &b.q) / b.q.norm2();
        let want = r2q.axpby(1.0, &b.q, -c);
        let err = sol.u.axpby(1.0, &want, -1.0).norm() / want.norm();
        assert!(err < 1e-5, "{err}");
        assert!(inner(&sol.u, &b.q).abs() < 1e-10 * want.norm() * b.q.norm());
    }

    #[test]
    fn kernel_violation_is_reported() {
        let b = test_bundle();
        let op = assemble_sector(b, 0, Sign::Minus).unwrap();
        match solve_sector(&op, &b.q, &[b.q.clone()]) {
            Err(Error::NearSingularRhs { inner, .. }) => assert!((inner - 1.0).abs() < 1e-12),
            other => panic!("expected near-singular error, got {other:?}"),
        }
    }

    #[test]
    fn plus_sector_one_solve_against_derivative() {
        let b = test_bundle();
        let op = assemble_sector(b, 1, Sign::Plus).unwrap();
        let dq = b.q.derivative();
        // r Q is orthogonal to Q' up to the identity (xQ, grad Q) = -2 ||Q||^2,
        // so use a right-hand side built to be orthogonal
        let g = RadialFn::from_fn(&b.grid, Parity::Odd, |r| r * (-r * r / 2.0).exp());
        let c = inner(&g, &dq) / dq.norm2();
        let f = g.axpby(1.0, &dq, -c);
        let sol = solve_sector(&op, &f, &[dq.clone()]).unwrap();
        assert!(sol.residual < 1e-8, "{}", sol.residual);
        assert!(sol.tail_rate > 0.5);
    }

    #[test]
    fn coercivity_on_deflated_sectors() {
        let b = test_bundle();
        let lm0 = assemble_sector(b, 0, Sign::Minus).unwrap();
        let e = lowest_eigenvalue(&lm0, &[b.q.clone()]).unwrap();
        let dense = dense_eigenvalues(&lm0, &[b.q.clone()]);
        assert!(e.lowest > 0.0 && (e.lowest - dense[0]).abs() < 1e-8 * dense[0].abs().max(1.0));

        let lp1 = assemble_sector(b, 1, Sign::Plus).unwrap();
        let dq = b.q.derivative();
        let e = lowest_eigenvalue(&lp1, &[dq.clone()]).unwrap();
        let dense = dense_eigenvalues(&lp1, &[dq]);
        assert!(e.lowest > 0.1, "{}", e.lowest);
        assert!((e.lowest - dense[0]).abs() < 1e-8 * dense[0].abs().max(1.0));

        let lp2 = assemble_sector(b, 2, Sign::Plus).unwrap();
        let e = lowest_eigenvalue(&lp2, &[]).unwrap();
        assert!(e.lowest > 0.0, "{}", e.lowest);
    }

    #[test]
    fn undeflated_kernels_are_near_zero() {
        let b = test_bundle();
        let lm0 = assemble_sector(b, 0, Sign::Minus).unwrap();
        let e = dense_eigenvalues(&lm0, &[]);
        assert!(e[0].abs() < 1e-6, "{}", e[0]);
        let lp1 = assemble_sector(b, 1, Sign::Plus).unwrap();
        let e = dense_eigenvalues(&lp1, &[]);
        assert!(e[0].abs() < 1e-4, "{}", e[0]);
        assert!(e[1] > 0.1);
    }

    #[test]
    fn plus_radial_sector_has_negative_direction() {
        let b = test_bundle();
        let lp0 = assemble_sector(b, 0, Sign::Plus).unwrap();
        let e = lowest_eigenvalue(&lp0, &[]).unwrap();
        assert!(e.lowest < 0.0);
        let dense = dense_eigenvalues(&lp0, &[]);
        assert!(dense.iter().any(|v| *v < 0.0));
        assert!((e.lowest - dense[0]).abs() < 1e-8 * dense[0].abs());
    }
}

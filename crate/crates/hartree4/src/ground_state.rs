//! Ground state `Q` of `Delta Q - phi_{Q^2} Q = Q`, the root-space element
//! `rho` with `L_+ rho = -r^2 Q`, and the scalar constants derived from them.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearized_ops::{solve_sector, Sign, SectorOperator};
use crate::numerics::{bulirsch_stoer, OdeOptions};
use crate::radial_core::{
    apply_lambda, inner, make_grid, radial_newton_potential, Parity, RadialFn, RadialGrid, RadialLaplacian, OMEGA3,
    POISSON,
};

/// Default radial grid: `[0, 20]` with 2048 cells.
pub const DEFAULT_R_MAX: f64 = 20.0;
pub const DEFAULT_N: usize = 2048;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroundStateOptions {
    /// stop when `||Delta Q - V Q - Q|| < tol ||Q||`
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GroundStateOptions {
    fn default() -> Self {
        GroundStateOptions { tol: 1e-10, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct GroundStateBundle {
    pub grid: Arc<RadialGrid>,
    pub q: RadialFn,
    pub rho: RadialFn,
    pub lq: RadialFn,
    pub l2q: RadialFn,
    pub l3q: RadialFn,
    /// `phi_{Q^2}`
    pub v: RadialFn,
    pub mass_q: f64,
    pub xq_norm2: f64,
    pub q_rho: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub r_max: f64,
    pub n: usize,
    pub mass_q: f64,
    pub xq_norm2: f64,
    pub q_rho: f64,
    pub residual: f64,
    pub iterations: usize,
}

pub fn default_grid() -> Result<Arc<RadialGrid>> {
    make_grid(DEFAULT_R_MAX, DEFAULT_N)
}

/// Relative residual `||Delta Q - V Q - Q|| / ||Q||` of the discrete equation.
pub fn equation_residual(lap: &RadialLaplacian, q: &RadialFn, v: &RadialFn) -> f64 {
    let aq = lap.apply(&q.re);
    let res: Vec<f64> = (0..q.re.len()).map(|i| aq[i] + q.re[i] + v.re[i] * q.re[i]).collect();
    q.with_values(res, Parity::Even).norm() / q.norm()
}

/// Petviashvili iteration `Q <- s^{3/2} (-Delta + 1)^{-1} (-V Q)` with the
/// stabilizing factor `s = <Q, (-Delta+1) Q> / <Q, -V Q>`.
pub fn solve_profile(grid: &Arc<RadialGrid>, opts: &GroundStateOptions) -> Result<(RadialFn, RadialFn, f64, usize)> {
    let lap = RadialLaplacian::new(grid, 0);
    let m = &lap.mass;
    let mut band = lap.shifted_band(1.0, None);
    let bmat = band.clone();
    band.factor()?;
    let mut q = RadialFn::from_fn(grid, Parity::Even, |r| 3.0 * (-r * r / 4.0).exp());
    let mut history = Vec::new();
    for it in 0..opts.max_iter {
        let v = radial_newton_potential(&q.mul(&q))?.phi;
        let res = equation_residual(&lap, &q, &v);
        history.push(res);
        if res < opts.tol {
            return Ok((q, v, res, it));
        }
        let nq: Vec<f64> = (0..grid.n).map(|i| -v.re[i] * q.re[i]).collect();
        let rhs: Vec<f64> = (0..grid.n).map(|i| m[i] * nq[i]).collect();
        let bq = bmat.matvec(&q.re);
        let num: f64 = (0..grid.n).map(|i| q.re[i] * bq[i]).sum();
        let den: f64 = (0..grid.n).map(|i| q.re[i] * rhs[i]).sum();
        if !(den > 0.0) {
            return Err(Error::Solver("Petviashvili factor lost positivity".into()));
        }
        let s = (num / den).powf(1.5);
        let u = band.solve(&rhs);
        q = q.with_values(u.iter().map(|x| s * x).collect(), Parity::Even);
    }
    Err(Error::Convergence {
        what: "ground state".into(),
        iterations: opts.max_iter,
        residual: *history.last().unwrap_or(&f64::NAN),
        history,
    })
}

pub fn solve_ground_state(grid: &Arc<RadialGrid>, opts: &GroundStateOptions) -> Result<GroundStateBundle> {
    let coarse = GroundStateOptions { tol: opts.tol.max(1e-7), ..*opts };
    let (q, v, residual, iterations) = solve_profile(grid, &coarse)?;
    let (q, v, residual, iterations) = if residual < opts.tol {
        (q, v, residual, iterations)
    } else {
        polish(q, v, opts, iterations)?
    };
    let lq = apply_lambda(&q, 1)?;
    let l2q = apply_lambda(&q, 2)?;
    let l3q = apply_lambda(&q, 3)?;
    let mass_q = q.norm2();
    let xq_norm2 = q.mul_rpow(1).norm2();
    let mut b = GroundStateBundle {
        grid: grid.clone(),
        rho: RadialFn::zeros(grid, Parity::Even),
        q,
        lq,
        l2q,
        l3q,
        v,
        mass_q,
        xq_norm2,
        q_rho: f64::NAN,
        residual,
        iterations,
    };
    b.rho = solve_rho(&b)?;
    b.q_rho = inner(&b.q, &b.rho);
    Ok(b)
}

/// Chord iterations `Q <- Q - L_+^{-1} F(Q)` with `L_+` frozen at the
/// starting profile, where `F(Q) = -Delta Q + Q + phi_{Q^2} Q`.
fn polish(
    mut q: RadialFn,
    mut v: RadialFn,
    opts: &GroundStateOptions,
    start: usize,
) -> Result<(RadialFn, RadialFn, f64, usize)> {
    let grid = q.grid.clone();
    let lap = RadialLaplacian::new(&grid, 0);
    let op = SectorOperator::from_profiles(&q, &v, 0, Sign::Plus)?;
    let lu = op.full.clone().lu();
    let mut history = Vec::new();
    for it in 0..30 {
        let aq = lap.apply(&q.re);
        let f = nalgebra::DVector::from_iterator(
            grid.n,
            (0..grid.n).map(|i| lap.mass[i] * (aq[i] + q.re[i] + v.re[i] * q.re[i])),
        );
        let d = lu.solve(&f).ok_or_else(|| Error::Solver("singular linearized operator".into()))?;
        q = q.with_values((0..grid.n).map(|i| q.re[i] - d[i]).collect(), Parity::Even);
        v = radial_newton_potential(&q.mul(&q))?.phi;
        let res = equation_residual(&lap, &q, &v);
        history.push(res);
        if res < opts.tol {
            return Ok((q, v, res, start + it + 1));
        }
    }
    Err(Error::Convergence {
        what: "ground state polish".into(),
        iterations: 30,
        residual: *history.last().unwrap_or(&f64::NAN),
        history,
    })
}

/// `rho` with `L_+ rho = -r^2 Q` on the radial sector.
pub fn solve_rho(b: &GroundStateBundle) -> Result<RadialFn> {
    let op = SectorOperator::from_profiles(&b.q, &b.v, 0, Sign::Plus)?;
    let f = b.q.mul_rpow(2).scale(-1.0);
    let sol = solve_sector(&op, &f, &[])?;
    if sol.residual > 1e-6 {
        return Err(Error::Solver(format!("rho solve residual {:.3e}", sol.residual)));
    }
    Ok(sol.u)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub mass: f64,
    pub grad_q_norm2: f64,
    pub grad_phi_norm2: f64,
    /// `||grad Q||^2 - ||grad phi||^2 / (4 pi^2) + ||Q||^2`, relative to `||Q||^2`
    pub identity_defect: f64,
    /// the same with the constant `1/(2 pi^2)`
    pub identity_defect_alt: f64,
    /// `(||grad Q||^2 - ||Q||^2) / ||Q||^2`
    pub pohozaev_defect: f64,
    /// `1/2 ||grad Q||^2 - ||grad phi||^2 / (16 pi^2)`, the Hamiltonian of the flow
    pub energy: f64,
    /// `1/2 ||grad Q||^2 - ||grad phi||^2 / (8 pi^2)`
    pub energy_alt: f64,
    /// relative residual of `Delta V = 4 pi^2 Q^2` away from the outer edge
    pub poisson_residual: f64,
}

pub fn energy_report(b: &GroundStateBundle) -> EnergyReport {
    let g = &b.grid;
    let dq = b.q.derivative();
    let grad_q_norm2 = dq.norm2();
    let dphi = b.v.derivative();
    let r_end = g.r_max;
    let tail = 2.0 * b.mass_q * b.mass_q / (r_end * r_end);
    let grad_phi_norm2 = dphi.norm2() + OMEGA3 * tail;
    let m = b.mass_q;
    let c1 = 1.0 / (4.0 * PI * PI);
    let c2 = 1.0 / (2.0 * PI * PI);
    let lap = crate::radial_core::laplacian_fd(&b.v);
    let cut = 0.9 * g.r_max;
    let res: Vec<f64> =
        (0..g.n).map(|i| if g.r[i] < cut { lap.re[i] - POISSON * b.q.re[i] * b.q.re[i] } else { 0.0 }).collect();
    let q2 = b.q.mul(&b.q).scale(POISSON);
    EnergyReport {
        mass: m,
        grad_q_norm2,
        grad_phi_norm2,
        identity_defect: (grad_q_norm2 - c1 * grad_phi_norm2 + m) / m,
        identity_defect_alt: (grad_q_norm2 - c2 * grad_phi_norm2 + m) / m,
        pohozaev_defect: (grad_q_norm2 - m) / m,
        energy: 0.5 * grad_q_norm2 - grad_phi_norm2 / (16.0 * PI * PI),
        energy_alt: 0.5 * grad_q_norm2 - grad_phi_norm2 / (8.0 * PI * PI),
        poisson_residual: b.q.with_values(res, Parity::Even).norm() / q2.norm(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub residual: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RootReport {
    pub checks: Vec<IdentityCheck>,
    pub all_pass: bool,
}

fn check(name: &str, residual: f64, tol: f64) -> IdentityCheck {
    IdentityCheck { name: name.into(), residual, tol, pass: residual.abs() < tol }
}

// Operator identities are measured on r < 0.9 r_max: the discrete operators
// impose a zero outer boundary, so the last few nodes see the truncated tail.
pub(crate) fn rel(a: &RadialFn, b: &RadialFn, scale: f64) -> f64 {
    let cut = 0.9 * a.grid.r_max;
    let d: Vec<f64> = a
        .re
        .iter()
        .zip(&b.re)
        .zip(&a.grid.r)
        .map(|((x, y), r)| if *r < cut { (x - y) * (x - y) } else { 0.0 })
        .collect();
    (OMEGA3 * a.grid.integrate(&d)).sqrt() / scale
}

/// Residuals of the root-space identities; each is relative to the norm of the
/// larger side.
pub fn verify_root_identities(b: &GroundStateBundle) -> Result<RootReport> {
    let tol = 1e-5;
    let q = &b.q;
    let dq = q.derivative();
    let lm0 = SectorOperator::from_profiles(q, &b.v, 0, Sign::Minus)?;
    let lp0 = SectorOperator::from_profiles(q, &b.v, 0, Sign::Plus)?;
    let lm1 = SectorOperator::from_profiles(q, &b.v, 1, Sign::Minus)?;
    let lp1 = SectorOperator::from_profiles(q, &b.v, 1, Sign::Plus)?;
    let r2q = q.mul_rpow(2);
    let rq = q.mul_rpow(1);
    let zero0 = RadialFn::zeros(&b.grid, Parity::Even);
    let zero1 = RadialFn::zeros(&b.grid, Parity::Odd);
    let mut checks = vec![
        check("L- Q = 0", rel(&lm0.apply(q), &zero0, q.norm()), 1e-8),
        check("L+ dQ = 0 (ell = 1)", rel(&lp1.apply(&dq), &zero1, dq.norm()), tol),
        check("L+ LQ = -2Q", rel(&lp0.apply(&b.lq), &q.scale(-2.0), 2.0 * q.norm()), tol),
        check("L- (r^2 Q) = -4 LQ", rel(&lm0.apply(&r2q), &b.lq.scale(-4.0), 4.0 * b.lq.norm()), tol),
        check("L- (r Q) = -2 Q' (ell = 1)", rel(&lm1.apply(&rq), &dq.scale(-2.0), 2.0 * dq.norm()), tol),
        check("L+ rho = -r^2 Q", rel(&lp0.apply(&b.rho), &r2q.scale(-1.0), r2q.norm()), tol),
        check("(Q, LQ) = 0", inner(q, &b.lq) / (q.norm() * b.lq.norm()), tol),
        check("(xQ, grad Q) = -2 ||Q||^2", (inner(&rq, &dq) + 2.0 * b.mass_q) / b.mass_q, tol),
    ];
    checks.push(check("(Q, rho) = -1/2 ||xQ||^2", (b.q_rho + 0.5 * b.xq_norm2) / b.xq_norm2, tol));
    let all_pass = checks.iter().all(|c| c.pass);
    Ok(RootReport { checks, all_pass })
}

impl GroundStateBundle {
    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            r_max: self.grid.r_max,
            n: self.grid.n,
            mass_q: self.mass_q,
            xq_norm2: self.xq_norm2,
            q_rho: self.q_rho,
            residual: self.residual,
            iterations: self.iterations,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, f) in self.profiles() {
            fs::write(dir.join(format!("{name}.csv")), f.to_csv())?;
        }
        let text = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<GroundStateBundle> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let man: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let grid = make_grid(man.r_max, man.n)?;
        let read = |name: &str| -> Result<RadialFn> {
            let f = RadialFn::from_csv(&fs::read_to_string(dir.join(format!("{name}.csv")))?)?;
            if !f.grid.compatible(&grid) {
                return Err(Error::Format(format!("{name}.csv is on a different grid")));
            }
            Ok(RadialFn { grid: grid.clone(), ..f })
        };
        Ok(GroundStateBundle {
            q: read("q")?,
            rho: read("rho")?,
            lq: read("lq")?,
            l2q: read("l2q")?,
            l3q: read("l3q")?,
            v: read("v")?,
            grid,
            mass_q: man.mass_q,
            xq_norm2: man.xq_norm2,
            q_rho: man.q_rho,
            residual: man.residual,
            iterations: man.iterations,
        })
    }

    fn profiles(&self) -> [(&'static str, &RadialFn); 6] {
        [("q", &self.q), ("rho", &self.rho), ("lq", &self.lq), ("l2q", &self.l2q), ("l3q", &self.l3q), ("v", &self.v)]
    }

    /// Cubic interpolation of a profile at radius `r` (zero beyond the grid).
    pub fn sample(f: &RadialFn, r: f64) -> f64 {
        interp_profile(f, r)
    }
}

/// Cubic Lagrange interpolation of a radial profile, using the parity ghosts
/// at the origin and zero beyond `r_max`.
pub fn interp_profile(f: &RadialFn, r: f64) -> f64 {
    let g = &f.grid;
    let r = r.abs();
    if r >= g.r_max {
        return 0.0;
    }
    let x = r / g.h - 0.5;
    let i0 = x.floor() as isize - 1;
    let s = f.parity.sign().unwrap_or(1.0);
    let val = |j: isize| -> f64 {
        if j < 0 {
            s * f.re[(-j - 1) as usize]
        } else if (j as usize) < g.n {
            f.re[j as usize]
        } else {
            0.0
        }
    };
    let t = x - (i0 + 1) as f64;
    let (p0, p1, p2, p3) = (val(i0), val(i0 + 1), val(i0 + 2), val(i0 + 3));
    // nodes at -1, 0, 1, 2 relative to i0 + 1
    let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
    let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
    let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
    let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
    w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3
}

#[derive(Debug, Clone, Serialize)]
pub struct ShootingResult {
    /// `||Q||^2`, invariant under the scaling that normalizes the eigenvalue
    pub mass: f64,
    /// `||x Q||^2` for the unit-eigenvalue ground state
    pub xq_norm2: f64,
    /// `Q(0)` for the unit-eigenvalue ground state
    pub q0: f64,
    /// radius where the shot trajectory leaves the ground state
    pub r_end: f64,
}

enum Shot {
    Under,
    Over,
}

/// Independent shooting solution of the radial system `Delta Q = psi Q`,
/// `Delta psi = 4 pi^2 Q^2` with `Q(0) = 1`, bisecting on `psi(0)`.
pub fn shooting_oracle() -> Result<ShootingResult> {
    let shoot = |s: f64| -> Result<(Shot, f64, [f64; 6])> {
        let r0 = 1e-3;
        let a = s / 8.0;
        let bq = POISSON / 8.0;
        let c = (s * a + bq) / 24.0;
        let d = POISSON * 2.0 * a / 24.0;
        let y0 = [
            1.0 + a * r0 * r0 + c * r0.powi(4),
            2.0 * a * r0 + 4.0 * c * r0.powi(3),
            s + bq * r0 * r0 + d * r0.powi(4),
            2.0 * bq * r0 + 4.0 * d * r0.powi(3),
            r0.powi(4) / 4.0,
            r0.powi(6) / 6.0,
        ];
        let rhs = |r: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = y[2] * y[0] - 3.0 * y[1] / r;
            dy[2] = y[3];
            dy[3] = POISSON * y[0] * y[0] - 3.0 * y[3] / r;
            dy[4] = r.powi(3) * y[0] * y[0];
            dy[5] = r.powi(5) * y[0] * y[0];
        };
        let mut outcome = None;
        let mut last = (r0, [0.0; 6]);
        let opts = OdeOptions { rtol: 1e-13, atol: 1e-16, h0: 1e-3, max_steps: 1_000_000 };
        let res = bulirsch_stoer(rhs, r0, &y0, &[60.0], &opts, |r, y| {
            if y[0] < 0.0 {
                outcome = Some(Shot::Under);
                return Err(Error::Precondition("shot".into()));
            }
            if y[1] > 0.0 {
                outcome = Some(Shot::Over);
                return Err(Error::Precondition("shot".into()));
            }
            last = (r, [y[0], y[1], y[2], y[3], y[4], y[5]]);
            Ok(())
        });
        match (res, outcome) {
            (Err(Error::Precondition(_)), Some(o)) => Ok((o, last.0, last.1)),
            (Ok(_), _) => Ok((Shot::Over, last.0, last.1)),
            (Err(e), _) => Err(e),
        }
    };
    // bracket psi(0)
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut k = 0;
    while matches!(shoot(lo)?.0, Shot::Over) {
        lo *= 2.0;
        k += 1;
        if k > 60 {
            return Err(Error::Solver("no undershoot found".into()));
        }
    }
    while matches!(shoot(hi)?.0, Shot::Under) {
        hi *= 2.0;
        k += 1;
        if k > 120 {
            return Err(Error::Solver("no overshoot found".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match shoot(mid)?.0 {
            Shot::Under => lo = mid,
            Shot::Over => hi = mid,
        }
    }
    let est = |s: f64| -> Result<(f64, f64, f64, f64)> {
        let (_, r, y) = shoot(s)?;
        let e = y[2] + OMEGA3 * y[4] / (r * r);
        Ok((OMEGA3 * y[4], e * OMEGA3 * y[5], 1.0 / e, r))
    };
    let a = est(lo)?;
    let b = est(hi)?;
    Ok(ShootingResult {
        mass: 0.5 * (a.0 + b.0),
        xq_norm2: 0.5 * (a.1 + b.1),
        q0: 0.5 * (a.2 + b.2),
        r_end: a.3.min(b.3),
    })
}

/// `Q_w(r) = w^2 Q(w r)` sampled on `grid`.
pub fn rescaled_profile(q: &RadialFn, w: f64, grid: &Arc<RadialGrid>) -> RadialFn {
    RadialFn::from_fn(grid, Parity::Even, |r| w * w * interp_profile(q, w * r))
}

/// Shared bundle on a moderate grid for unit tests across modules.
#[cfg(test)]
pub(crate) fn test_bundle() -> &'static GroundStateBundle {
    static B: std::sync::OnceLock<GroundStateBundle> = std::sync::OnceLock::new();
    B.get_or_init(|| {
        let g = make_grid(16.0, 1024).unwrap();
        solve_ground_state(&g, &GroundStateOptions::default()).unwrap()
    })
}

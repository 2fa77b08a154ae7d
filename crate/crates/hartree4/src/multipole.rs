//! Multipole expansion of the inverse-square kernel in R^4.
//!
//! `1/|alpha - zeta|^2 = sum_n F_n(alpha, zeta)` with `F_n` homogeneous of
//! degree `-n-1` in `alpha` and `n-1` in `zeta`. In four dimensions the
//! generating function is that of the Chebyshev polynomials of the second
//! kind, which gives the three-term recurrence used here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::ground_state::interp_profile;
use crate::numerics::{fd_weights, loglog_slope};
use crate::radial_core::{radial_newton_potential, Potential, RadialFn, OMEGA3};
use crate::vec4::{self, Vec4};

/// Highest order accepted by [`laplacian_f_check`].
pub const MAX_CHECK_ORDER: usize = 8;

/// Window of `|y|` (in units of the soliton scale) over which truncation
/// errors are sampled; also capped by `a / 3`. The remainder at `|y| = R`
/// behaves like `R^N / (a - R)^{N+2}`, so a window growing with `a` would hide
/// the order; `R = 1` keeps the pre-asymptotic bias of the fitted slope on
/// `a >= 8` below 0.15.
pub const CORE_RADIUS: f64 = 1.0;

/// `F_n(alpha, zeta)` for `n >= 1`.
pub fn eval_f(n: usize, alpha: &Vec4, zeta: &Vec4) -> Result<f64> {
    if n == 0 {
        return invalid("multipole order starts at 1");
    }
    let a2 = vec4::norm2(alpha);
    if a2 == 0.0 {
        return invalid("alpha must be non-zero");
    }
    let s = vec4::dot(zeta, alpha);
    let q = vec4::norm2(zeta) * a2;
    // P_1 = 1, P_2 = 2s, P_{k+1} = 2s P_k - q P_{k-1}; F_n = P_n / |alpha|^{2n}
    let (mut p0, mut p1) = (1.0, 2.0 * s);
    let mut out = if n == 1 { p0 } else { p1 };
    for _ in 2..n {
        let p2 = 2.0 * s * p1 - q * p0;
        p0 = p1;
        p1 = p2;
        out = p1;
    }
    Ok(out / a2.powi(n as i32))
}

/// Partial sum `sum_{n <= order} F_n(alpha, zeta)`.
pub fn partial_sum(order: usize, alpha: &Vec4, zeta: &Vec4) -> Result<f64> {
    (1..=order).map(|n| eval_f(n, alpha, zeta)).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct LaplacianReport {
    pub n: usize,
    pub samples: usize,
    /// `max |Delta_zeta F_n|` divided by the magnitude of the cancelling
    /// stencil terms
    pub max_residual: f64,
    pub pass: bool,
}

/// Finite-difference Laplacian of `F_n` in `zeta` at random sample points.
/// The 9-point stencil is exact on polynomials of degree 9, so what remains
/// is round-off.
pub fn laplacian_f_check(n: usize, samples: usize, seed: u64) -> Result<LaplacianReport> {
    if n == 0 || n > MAX_CHECK_ORDER {
        return Err(Error::UnsupportedOrder { what: "harmonicity check".into(), order: n, max: MAX_CHECK_ORDER });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<f64> = (-4..=4).map(|k| k as f64).collect();
    let w2 = fd_weights(0.0, &offsets, 2).swap_remove(2);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let alpha: Vec4 = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
        let an = vec4::norm(&alpha).max(0.5);
        let zeta: Vec4 = std::array::from_fn(|_| rng.gen_range(-0.5..0.5) * an);
        let h = 0.05 * an;
        let (mut lap, mut mag) = (0.0, 0.0);
        for axis in 0..4 {
            for (k, w) in w2.iter().enumerate() {
                let p = vec4::axpy(&zeta, offsets[k] * h, &vec4::unit(axis));
                let v = w * eval_f(n, &alpha, &p)? / (h * h);
                lap += v;
                mag += v.abs();
            }
        }
        if mag > 0.0 {
            worst = worst.max(lap.abs() / mag);
        }
    }
    Ok(LaplacianReport { n, samples, max_residual: worst, pass: worst < 1e-6 })
}

/// Relative placement of a source soliton `k` seen from soliton `j`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Geometry {
    /// `alpha_jk = alpha_j - alpha_k`
    pub alpha: Vec4,
    pub lam_j: f64,
    pub lam_k: f64,
}

impl Geometry {
    pub fn new(alpha: Vec4, lam_j: f64, lam_k: f64) -> Result<Self> {
        if vec4::norm2(&alpha) == 0.0 {
            return invalid("alpha_jk must be non-zero");
        }
        if !(lam_j > 0.0 && lam_k > 0.0) {
            return invalid("scales must be positive");
        }
        Ok(Geometry { alpha, lam_j, lam_k })
    }
}

/// `omega_3 int dens r^3 dr`
pub fn density_mass(dens: &RadialFn) -> f64 {
    OMEGA3 * dens.grid.integrate(&dens.re)
}

/// `psi^{(n)}(y) = -lam_j^{-2} int dens(xi) F_n(alpha, xi/lam_k - y/lam_j) dxi`.
///
/// For radial `dens` the mean-value property of the harmonic `F_n` collapses
/// the integral to `-lam_j^{-2} M F_n(alpha, -y/lam_j)`.
pub fn psi_moment(n: usize, dens: &RadialFn, geom: &Geometry, y: &Vec4) -> Result<f64> {
    let m = density_mass(dens);
    psi_from_mass(n, m, geom, y)
}

fn psi_from_mass(n: usize, mass: f64, geom: &Geometry, y: &Vec4) -> Result<f64> {
    let g = Geometry::new(geom.alpha, geom.lam_j, geom.lam_k)?;
    let w = vec4::scale(-1.0 / g.lam_j, y);
    Ok(-mass / (g.lam_j * g.lam_j) * eval_f(n, &g.alpha, &w)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncatedPotential {
    pub value: f64,
    /// contribution of each order `1..=N`
    pub terms: Vec<f64>,
}

/// `phi^{(N)} = sum_{n <= N} psi^{(n)}`.
pub fn truncated_potential(order: usize, dens: &RadialFn, geom: &Geometry, y: &Vec4) -> Result<TruncatedPotential> {
    let m = density_mass(dens);
    Geometry::new(geom.alpha, geom.lam_j, geom.lam_k)?;
    let terms = (1..=order).map(|n| psi_from_mass(n, m, geom, y)).collect::<Result<Vec<_>>>()?;
    Ok(TruncatedPotential { value: terms.iter().sum(), terms })
}

/// The untruncated interaction `(lam_k/lam_j)^2 phi_dens(lam_k (alpha + y/lam_j))`
/// from the radial potential; beyond the grid the exterior field `-M/r^2` is
/// exact for a density supported on the grid.
pub fn direct_potential(pot: &Potential, geom: &Geometry, y: &Vec4) -> f64 {
    let x = vec4::axpy(&geom.alpha, 1.0 / geom.lam_j, y);
    let r = geom.lam_k * vec4::norm(&x);
    let g = &pot.phi.grid;
    let phi = if r < g.r[g.n - 1] { interp_profile(&pot.phi, r) } else { -pot.mass / (r * r) };
    (geom.lam_k / geom.lam_j).powi(2) * phi
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderFit {
    pub order: usize,
    pub separations: Vec<f64>,
    /// max over the sampled core of `|phi^{(N)} - phi|`
    pub errors: Vec<f64>,
    pub slope: f64,
    pub slope_stderr: f64,
    /// slope +/- two standard errors
    pub band: (f64, f64),
    pub core_radius: f64,
}

/// Sample points in the ball `|y| <= radius`.
fn core_samples(radius: f64) -> Vec<Vec4> {
    let s = 0.5;
    let dirs: [Vec4; 6] = [
        [1.0, 0.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0],
        [-s, s, s, s],
        [s, -s, s, -s],
    ];
    let mut out = vec![vec4::ZERO];
    for k in 1..=4 {
        let r = radius * k as f64 / 4.0;
        out.extend(dirs.iter().map(|d| vec4::scale(r, d)));
    }
    out
}

/// Fit the decay of the truncation error of `phi^{(N)}` against the
/// separation `a = |alpha_jk|`, with `y` restricted to the soliton core.
pub fn truncation_order_fit(order: usize, dens: &RadialFn, separations: &[f64]) -> Result<OrderFit> {
    if separations.len() < 4 {
        return Err(Error::Fit("need at least four separations".into()));
    }
    let (lo, hi) = separations.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &a| (l.min(a), h.max(a)));
    if !(lo > 0.0) || hi / lo < 4.0 {
        return Err(Error::Fit("separations must be positive and span a factor of 4".into()));
    }
    let pot = radial_newton_potential(dens)?;
    let mut errors = Vec::with_capacity(separations.len());
    for &a in separations {
        let geom = Geometry::new([a, 0.0, 0.0, 0.0], 1.0, 1.0)?;
        let mut worst: f64 = 0.0;
        for y in core_samples(CORE_RADIUS.min(a / 3.0)) {
            let approx = truncated_potential(order, dens, &geom, &y)?.value;
            worst = worst.max((approx - direct_potential(&pot, &geom, &y)).abs());
        }
        errors.push(worst);
    }
    let fit = loglog_slope(separations, &errors)?;
    Ok(OrderFit {
        order,
        separations: separations.to_vec(),
        errors,
        slope: fit.slope,
        slope_stderr: fit.slope_stderr,
        band: (fit.slope - 2.0 * fit.slope_stderr, fit.slope + 2.0 * fit.slope_stderr),
        core_radius: CORE_RADIUS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground_state::test_bundle;
    use proptest::prelude::*;

    fn printed(n: usize, a: &Vec4, z: &Vec4) -> f64 {
        let an = vec4::norm2(a);
        let s = vec4::dot(z, a);
        let q = vec4::norm2(z) * an;
        match n {
            1 => 1.0 / an,
            2 => 2.0 * s / an.powi(2),
            3 => (4.0 * s * s - q) / an.powi(3),
            4 => (8.0 * s.powi(3) - 4.0 * s * q) / an.powi(4),
            5 => (16.0 * s.powi(4) - 12.0 * s * s * q + q * q) / an.powi(5),
            _ => unreachable!(),
        }
    }

    #[test]
    fn matches_printed_forms() {
        let a = [1.3, -0.4, 2.0, 0.7];
        let z = [0.2, 0.5, -0.3, 0.1];
        for n in 1..=5 {
            let v = eval_f(n, &a, &z).unwrap();
            assert!((v - printed(n, &a, &z)).abs() <= 1e-15 * printed(n, &a, &z).abs().max(1e-3));
        }
        assert_eq!(eval_f(1, &[2.0, 0.0, 0.0, 0.0], &[9.0, 1.0, 0.0, 0.0]).unwrap(), 0.25);
        assert_eq!(eval_f(3, &vec4::unit(0), &vec4::unit(0)).unwrap(), 3.0);
    }

    #[test]
    fn rejects_zero_alpha_and_order() {
        assert!(eval_f(2, &vec4::ZERO, &vec4::unit(0)).is_err());
        assert!(eval_f(0, &vec4::unit(0), &vec4::unit(0)).is_err());
    }

    #[test]
    fn series_converges_geometrically() {
        let a = [2.0, 1.0, -1.0, 0.5];
        let an = vec4::norm(&a);
        let z = vec4::scale(an / 4.0 / vec4::norm(&[0.3, 0.9, 0.1, -0.2]), &[0.3, 0.9, 0.1, -0.2]);
        let exact = 1.0 / vec4::norm2(&vec4::sub(&a, &z));
        let errs: Vec<f64> = (1..=24).map(|n| (partial_sum(n, &a, &z).unwrap() - exact).abs()).collect();
        // the tail ratio of the Chebyshev series tends to |zeta|/|alpha|
        let ratio = errs[20] / errs[19];
        assert!(ratio < 0.3, "{ratio}");
        assert!(errs[23] < 1e-12 * exact);
    }

    #[test]
    fn harmonic_in_zeta() {
        for n in 1..=MAX_CHECK_ORDER {
            let rep = laplacian_f_check(n, 100, 7).unwrap();
            assert!(rep.pass, "n={n} {}", rep.max_residual);
        }
        assert!(laplacian_f_check(2, 10, 1).unwrap().max_residual < 1e-14);
        assert!(laplacian_f_check(9, 10, 1).is_err());
    }

    #[test]
    fn psi_moments_of_ground_state_density() {
        let b = test_bundle();
        let dens = b.q.mul(&b.q);
        let geom = Geometry::new([10.0, 0.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let p1 = psi_moment(1, &dens, &geom, &[0.3, 0.1, 0.0, 0.0]).unwrap();
        assert!((p1 + b.mass_q / 100.0).abs() < 1e-12 * b.mass_q);
        assert_eq!(psi_moment(2, &dens, &geom, &vec4::ZERO).unwrap(), 0.0);
        let zero = dens.scale(0.0);
        assert_eq!(truncated_potential(3, &zero, &geom, &[1.0, 0.0, 0.0, 0.0]).unwrap().value, 0.0);
        let t1 = truncated_potential(1, &dens, &geom, &vec4::ZERO).unwrap();
        assert_eq!(t1.value, p1);
        assert!(psi_moment(1, &dens, &Geometry { alpha: vec4::ZERO, lam_j: 1.0, lam_k: 1.0 }, &vec4::ZERO).is_err());
    }

    #[test]
    fn psi_moment_matches_lattice_quadrature() {
        // brute-force 4D lattice sum of the defining integral
        let b = test_bundle();
        let dens = b.q.mul(&b.q);
        let geom = Geometry::new([6.0, 2.0, 0.0, -1.0], 1.3, 0.8).unwrap();
        let y = [0.7, -0.4, 0.2, 0.5];
        let n_side = 48usize;
        let half = 13.0;
        let h = 2.0 * half / n_side as f64;
        let mut sums = [0.0f64; 4];
        let w = vec4::scale(1.0 / geom.lam_j, &y);
        for i in 0..n_side.pow(4) {
            let idx = [i % n_side, (i / n_side) % n_side, (i / n_side.pow(2)) % n_side, i / n_side.pow(3)];
            let xi: Vec4 = std::array::from_fn(|k| -half + (idx[k] as f64 + 0.5) * h);
            let d = interp_profile(&dens, vec4::norm(&xi));
            if d == 0.0 {
                continue;
            }
            let z = vec4::sub(&vec4::scale(1.0 / geom.lam_k, &xi), &w);
            for (n, s) in sums.iter_mut().enumerate() {
                *s += d * eval_f(n + 2, &geom.alpha, &z).unwrap();
            }
        }
        for (n, s) in sums.iter().enumerate() {
            let lattice = -s * h.powi(4) / geom.lam_j.powi(2);
            let radial = psi_moment(n + 2, &dens, &geom, &y).unwrap();
            assert!((lattice - radial).abs() < 1e-4 * radial.abs(), "n={} {lattice} {radial}", n + 2);
        }
    }

    #[test]
    fn truncation_orders() {
        let b = test_bundle();
        let dens = b.q.mul(&b.q);
        let seps = [8.0, 12.0, 16.0, 24.0, 32.0];
        for order in 0..=3 {
            let fit = truncation_order_fit(order, &dens, &seps).unwrap();
            let want = -(order as f64 + 2.0);
            assert!((fit.slope - want).abs() < 0.3, "N={order} slope {}", fit.slope);
        }
        assert!(truncation_order_fit(1, &dens, &[8.0, 9.0, 10.0, 12.0]).is_err());
        assert!(truncation_order_fit(1, &dens, &[8.0, 32.0]).is_err());
    }

    #[test]
    fn pointwise_truncation_bound() {
        let b = test_bundle();
        let dens = b.q.mul(&b.q);
        let pot = radial_newton_potential(&dens).unwrap();
        let order = 5;
        let mut worst: f64 = 0.0;
        for a in [8.0, 12.0, 16.0, 24.0, 32.0] {
            let geom = Geometry::new([0.0, a, 0.0, 0.0], 1.0, 1.0).unwrap();
            for y in core_samples(a / 3.0) {
                let err = (truncated_potential(order, &dens, &geom, &y).unwrap().value - direct_potential(&pot, &geom, &y)).abs();
                let bound = (1.0 + vec4::norm(&y)).powi(2 * order as i32) / a.powi(order as i32 + 2);
                worst = worst.max(err / bound);
            }
        }
        // a single constant covers every separation and sample
        assert!(worst < b.mass_q, "{worst}");
    }

    proptest! {
        #[test]
        fn homogeneity(
            a in prop::array::uniform4(-3.0f64..3.0),
            z in prop::array::uniform4(-1.0f64..1.0),
            s in 0.3f64..3.0,
            n in 1usize..=8,
        ) {
            prop_assume!(vec4::norm(&a) > 0.3);
            let base = eval_f(n, &a, &z).unwrap();
            let sa = eval_f(n, &vec4::scale(s, &a), &z).unwrap();
            let sz = eval_f(n, &a, &vec4::scale(s, &z)).unwrap();
            let tol = 1e-12 * (1.0 + base.abs());
            prop_assert!((sa - s.powi(-(n as i32) - 1) * base).abs() <= tol * s.powi(-(n as i32) - 1).max(1.0));
            prop_assert!((sz - s.powi(n as i32 - 1) * base).abs() <= tol * s.powi(n as i32 - 1).max(1.0));
        }
    }
}

//! The inverse-square m-body law
//! `alpha_j' = 2 beta_j`, `beta_j' = -kappa sum_{k != j} alpha_jk / |alpha_jk|^4`,
//! its first integral, orbit classification, hyperbolic scattering states and
//! homothetic parabolic orbits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{bulirsch_stoer, fit_line, Cheb01, OdeOptions};
use crate::vec4::{self, Vec4};

/// Mass-weighted form of the law: `alpha_j' = beta_j`,
/// `beta_j' = -sum_k m_k alpha_jk / |alpha_jk|^4`. The main law with coupling
/// `kappa` is this one with all `m_k = 2 kappa` and `beta_m = 2 beta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyState {
    pub alpha: Vec<Vec4>,
    pub beta: Vec<Vec4>,
    pub kappa: f64,
    #[serde(default)]
    pub masses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Derivative<'a> {
    pub alpha: &'a [Vec4],
    pub beta: &'a [Vec4],
}

/// Pairwise minimum distance.
pub fn min_distance(alpha: &[Vec4]) -> f64 {
    let mut a = f64::INFINITY;
    for j in 0..alpha.len() {
        for k in j + 1..alpha.len() {
            a = a.min(vec4::norm(&vec4::sub(&alpha[j], &alpha[k])));
        }
    }
    a
}

pub fn center_of_mass(alpha: &[Vec4]) -> Vec4 {
    alpha.iter().fold(vec4::ZERO, |acc, a| vec4::add(&acc, a))
}

/// `sum_{k != j} alpha_jk / |alpha_jk|^4` weighted by `w_k`.
fn forces(alpha: &[Vec4], w: &dyn Fn(usize) -> f64) -> Vec<Vec4> {
    let m = alpha.len();
    let mut out = vec![vec4::ZERO; m];
    for j in 0..m {
        for k in j + 1..m {
            let d = vec4::sub(&alpha[j], &alpha[k]);
            let r2 = vec4::norm2(&d);
            let f = vec4::scale(1.0 / (r2 * r2), &d);
            out[j] = vec4::axpy(&out[j], w(k), &f);
            out[k] = vec4::axpy(&out[k], -w(j), &f);
        }
    }
    out
}

impl BodyState {
    pub fn new(alpha: Vec<Vec4>, beta: Vec<Vec4>, kappa: f64) -> Result<Self> {
        let s = BodyState { alpha, beta, kappa, masses: None };
        s.validate()?;
        Ok(s)
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m() < 2 || self.beta.len() != self.m() {
            return invalid("need at least two bodies with matching positions and velocities");
        }
        if let Some(ms) = &self.masses {
            if ms.len() != self.m() || ms.iter().any(|v| !(*v > 0.0)) {
                return invalid("masses must be positive, one per body");
            }
        } else if !(self.kappa > 0.0) {
            return invalid("coupling must be positive");
        }
        Ok(())
    }

    fn check_collision(&self, eps: f64) -> Result<()> {
        let a = min_distance(&self.alpha);
        if !(a > eps) {
            return Err(Error::Collision { time: f64::NAN, distance: a });
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.alpha.iter().chain(&self.beta).flat_map(|v| v.iter().copied()).collect()
    }

    pub fn with_vec(&self, y: &[f64]) -> BodyState {
        let m = self.m();
        let take = |off: usize| -> Vec<Vec4> {
            (0..m).map(|j| std::array::from_fn(|i| y[off + 4 * j + i])).collect()
        };
        BodyState { alpha: take(0), beta: take(4 * m), kappa: self.kappa, masses: self.masses.clone() }
    }

    /// Sum of momenta `sum beta_j`, weighted by `m_j` when masses are set.
    pub fn momentum(&self) -> Vec4 {
        match &self.masses {
            None => center_of_mass(&self.beta),
            Some(ms) => self.beta.iter().zip(ms).fold(vec4::ZERO, |acc, (b, m)| vec4::axpy(&acc, *m, b)),
        }
    }
}

/// Right-hand side `(alpha', beta')`.
pub fn mbody_rhs(s: &BodyState) -> Result<(Vec<Vec4>, Vec<Vec4>)> {
    s.validate()?;
    s.check_collision(0.0)?;
    Ok(rhs_unchecked(s))
}

fn rhs_unchecked(s: &BodyState) -> (Vec<Vec4>, Vec<Vec4>) {
    match &s.masses {
        None => {
            let da = s.beta.iter().map(|b| vec4::scale(2.0, b)).collect();
            let db = forces(&s.alpha, &|_| 1.0).iter().map(|f| vec4::scale(-s.kappa, f)).collect();
            (da, db)
        }
        Some(ms) => {
            let da = s.beta.clone();
            let db = forces(&s.alpha, &|k| ms[k]).iter().map(|f| vec4::scale(-1.0, f)).collect();
            (da, db)
        }
    }
}

/// `H = 2 sum |beta_j|^2 - kappa sum_{j<k} |alpha_jk|^{-2}` (main law), or
/// `1/2 sum m_j |beta_j|^2 - 1/2 sum_{j<k} m_j m_k |alpha_jk|^{-2}`.
pub fn mbody_energy(s: &BodyState) -> Result<f64> {
    s.validate()?;
    s.check_collision(0.0)?;
    let m = s.m();
    let mut pot = 0.0;
    let mut kin = 0.0;
    for j in 0..m {
        let mj = s.masses.as_ref().map_or(1.0, |ms| ms[j]);
        kin += mj * vec4::norm2(&s.beta[j]);
        for k in j + 1..m {
            let mk = s.masses.as_ref().map_or(1.0, |ms| ms[k]);
            pot += mj * mk / vec4::norm2(&vec4::sub(&s.alpha[j], &s.alpha[k]));
        }
    }
    Ok(match s.masses {
        None => 2.0 * kin - s.kappa * pot,
        Some(_) => 0.5 * kin - 0.5 * pot,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BodyPath {
    pub times: Vec<f64>,
    pub states: Vec<BodyState>,
    pub energy: Vec<f64>,
    pub min_distance: Vec<f64>,
    pub center_of_mass: Vec<Vec4>,
}

impl BodyPath {
    pub fn from_states(times: Vec<f64>, states: Vec<BodyState>) -> Result<Self> {
        let energy = states.iter().map(mbody_energy).collect::<Result<Vec<_>>>()?;
        let min_distance = states.iter().map(|s| min_distance(&s.alpha)).collect();
        let center_of_mass = states.iter().map(|s| center_of_mass(&s.alpha)).collect();
        Ok(BodyPath { times, states, energy, min_distance, center_of_mass })
    }

    /// `max |H(t) - H(0)| / |H(0)|`
    pub fn energy_drift(&self) -> f64 {
        let h0 = self.energy[0];
        self.energy.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max) / h0.abs().max(1e-300)
    }

    /// Columns `t, alpha_{j,i}, beta_{j,i}, H, a`.
    pub fn to_csv(&self) -> String {
        let m = self.states.first().map_or(0, |s| s.m());
        let mut head = vec!["t".to_string()];
        for name in ["alpha", "beta"] {
            for j in 0..m {
                for i in 0..4 {
                    head.push(format!("{name}_{j}_{i}"));
                }
            }
        }
        head.push("H".into());
        head.push("a".into());
        let mut out = head.join(",") + "\n";
        for (k, s) in self.states.iter().enumerate() {
            let mut row = vec![format!("{:.17e}", self.times[k])];
            row.extend(s.to_vec().iter().map(|v| format!("{v:.17e}")));
            row.push(format!("{:.17e}", self.energy[k]));
            row.push(format!("{:.17e}", self.min_distance[k]));
            out += &(row.join(",") + "\n");
        }
        out
    }
}

/// Relative collision threshold: a step is refused when the minimal distance
/// drops below this fraction of its initial value.
pub const COLLISION_FRACTION: f64 = 1e-6;

/// Integrate from `times[0]` through the (monotone) `times` with relative
/// tolerance `tol`.
pub fn integrate(s: &BodyState, times: &[f64], tol: f64) -> Result<BodyPath> {
    s.validate()?;
    if times.is_empty() || !(tol > 0.0) {
        return invalid("need output times and a positive tolerance");
    }
    let eps = COLLISION_FRACTION * min_distance(&s.alpha);
    s.check_collision(eps)?;
    let opts = OdeOptions { rtol: tol, atol: tol * 1e-3, h0: 1e-3, ..OdeOptions::default() };
    let template = s.clone();
    let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let st = template.with_vec(y);
        let (da, db) = rhs_unchecked(&st);
        for (i, v) in da.iter().chain(&db).flat_map(|v| v.iter()).enumerate() {
            dy[i] = *v;
        }
    };
    let guard = |t: f64, y: &[f64]| -> Result<()> {
        let a = min_distance(&template.with_vec(y).alpha);
        if a < eps {
            return Err(Error::Collision { time: t, distance: a });
        }
        Ok(())
    };
    let ys = bulirsch_stoer(f, times[0], &s.to_vec(), times, &opts, guard)?;
    let states = ys.iter().map(|y| s.with_vec(y)).collect();
    BodyPath::from_states(times.to_vec(), states)
}

fn centered(x: &[Vec4]) -> bool {
    let c = center_of_mass(x);
    let scale = x.iter().map(vec4::norm).fold(1.0, f64::max);
    vec4::norm(&c) <= 1e-10 * scale
}

fn distinct(x: &[Vec4]) -> bool {
    min_distance(x) > 0.0
}

/// Chebyshev representation in `sigma = T0 / t` of a path on `[T0, inf)`.
#[derive(Debug, Clone)]
pub struct TailGrid {
    pub cheb: Cheb01,
    pub t0: f64,
}

impl TailGrid {
    pub fn new(nodes: usize, t0: f64) -> Self {
        TailGrid { cheb: Cheb01::new(nodes), t0 }
    }

    pub fn sigma(&self) -> &[f64] {
        &self.cheb.nodes
    }

    /// `int_t^inf g` where `jac[i] = g(T0/sigma_i) T0 / sigma_i^2` (the limit at
    /// `sigma = 0` supplied by the caller).
    pub fn tail_integral(&self, jac: &[f64]) -> Vec<f64> {
        self.cheb.integrate(jac)
    }

    pub fn interp(&self, v: &[f64], t: f64) -> f64 {
        self.cheb.interp(v, self.t0 / t)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScatterResult {
    pub t0: f64,
    pub x: Vec<Vec4>,
    pub v: Vec<Vec4>,
    pub kappa: f64,
    /// `e_j(sigma_i) = alpha_j - x_j - v_j t` at the Chebyshev nodes
    #[serde(skip)]
    pub e: Vec<Vec<Vec4>>,
    /// `2 beta_j - v_j` at the nodes
    #[serde(skip)]
    pub b: Vec<Vec<Vec4>>,
    /// sup-norm change of one extra Picard sweep at the fixed point
    pub residual: f64,
    pub iterations: usize,
    /// every `T0` tried, in order
    pub t0_trace: Vec<f64>,
    #[serde(skip)]
    grid: Option<TailGrid>,
}

pub const SCATTER_NODES: usize = 40;

impl ScatterResult {
    pub fn state_at(&self, t: f64) -> BodyState {
        let g = self.grid.as_ref().expect("grid");
        let m = self.x.len();
        let comp = |vals: &Vec<Vec<Vec4>>, j: usize, i: usize| -> f64 {
            let col: Vec<f64> = vals.iter().map(|row| row[j][i]).collect();
            g.interp(&col, t)
        };
        let alpha = (0..m).map(|j| std::array::from_fn(|i| self.x[j][i] + self.v[j][i] * t + comp(&self.e, j, i))).collect();
        let beta = (0..m).map(|j| std::array::from_fn(|i| 0.5 * (self.v[j][i] + comp(&self.b, j, i)))).collect();
        BodyState { alpha, beta, kappa: self.kappa, masses: None }
    }

    pub fn path(&self, times: &[f64]) -> Result<BodyPath> {
        BodyPath::from_states(times.to_vec(), times.iter().map(|&t| self.state_at(t)).collect())
    }
}

/// One sweep of the scattering map
/// `2 beta - v = 2 kappa int_t^inf F(alpha)`, `alpha - x - v t = -int_t^inf (2 beta - v)`.
fn scatter_sweep(g: &TailGrid, x: &[Vec4], v: &[Vec4], kappa: f64, e: &[Vec<Vec4>]) -> (Vec<Vec<Vec4>>, Vec<Vec<Vec4>>) {
    let m = x.len();
    let sig = g.sigma();
    let n = sig.len();
    let t0 = g.t0;
    // A_j(sigma) = sum_k T0 w_jk / |w_jk|^4 with w = sigma alpha; F(alpha) T0/sigma^2 = sigma A
    let mut a_vals = vec![vec![vec4::ZERO; m]; n];
    for (i, &s) in sig.iter().enumerate() {
        let w: Vec<Vec4> = (0..m).map(|j| std::array::from_fn(|c| s * x[j][c] + t0 * v[j][c] + s * e[i][j][c])).collect();
        for (j, f) in forces(&w, &|_| 1.0).iter().enumerate() {
            a_vals[i][j] = vec4::scale(t0, f);
        }
    }
    let mut b_new = vec![vec![vec4::ZERO; m]; n];
    let mut e_new = vec![vec![vec4::ZERO; m]; n];
    for j in 0..m {
        for c in 0..4 {
            let jac: Vec<f64> = (0..n).map(|i| sig[i] * a_vals[i][j][c]).collect();
            let bint = g.tail_integral(&jac);
            let bj: Vec<f64> = bint.iter().map(|v| 2.0 * kappa * v).collect();
            // (2 beta - v) T0 / sigma^2, with limit kappa T0 A(0) at sigma = 0
            let cj: Vec<f64> = (0..n)
                .map(|i| if sig[i] == 0.0 { kappa * t0 * a_vals[i][j][c] } else { bj[i] * t0 / (sig[i] * sig[i]) })
                .collect();
            let eint = g.tail_integral(&cj);
            for i in 0..n {
                b_new[i][j][c] = bj[i];
                e_new[i][j][c] = -eint[i];
            }
        }
    }
    (e_new, b_new)
}

fn sup_diff(a: &[Vec<Vec4>], b: &[Vec<Vec4>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(p, q)| vec4::norm(&vec4::sub(p, q))))
        .fold(0.0, f64::max)
}

/// Scattering state with `alpha = x + v t + o(1)`, `beta = v/2 + o(1)` by
/// Picard iteration on `[T0, inf)`; `T0` is doubled until the map contracts.
pub fn hyperbolic_scatter(x: &[Vec4], v: &[Vec4], t0: f64, kappa: f64) -> Result<ScatterResult> {
    let m = x.len();
    if m < 2 || v.len() != m {
        return invalid("need at least two bodies");
    }
    if !centered(x) || !centered(v) {
        return invalid("x and v must have vanishing sums");
    }
    if !distinct(v) {
        return invalid("asymptotic velocities must be pairwise distinct");
    }
    if !(t0 > 0.0 && kappa > 0.0) {
        return invalid("T0 and the coupling must be positive");
    }
    let mut t0 = t0;
    let mut trace = Vec::new();
    for _ in 0..12 {
        trace.push(t0);
        let g = TailGrid::new(SCATTER_NODES, t0);
        let n = g.sigma().len();
        let mut e = vec![vec![vec4::ZERO; m]; n];
        let mut b = e.clone();
        let mut change = f64::INFINITY;
        let mut prev_change = f64::INFINITY;
        let mut it = 0;
        let mut ok = false;
        while it < 200 {
            it += 1;
            let (en, bn) = scatter_sweep(&g, x, v, kappa, &e);
            change = sup_diff(&en, &e).max(sup_diff(&bn, &b));
            e = en;
            b = bn;
            if !change.is_finite() || (it > 3 && change > prev_change) {
                break;
            }
            if change < 1e-14 * (1.0 + t0) {
                ok = true;
                break;
            }
            prev_change = change;
        }
        // the iterates must also stay away from collisions
        let collide = (0..n).any(|i| {
            let s = g.sigma()[i];
            let w: Vec<Vec4> = (0..m).map(|j| std::array::from_fn(|c| s * x[j][c] + t0 * v[j][c] + s * e[i][j][c])).collect();
            min_distance(&w) <= 0.5 * t0 * min_distance(v)
        });
        if ok && !collide {
            let (e2, b2) = scatter_sweep(&g, x, v, kappa, &e);
            let residual = sup_diff(&e2, &e).max(sup_diff(&b2, &b));
            return Ok(ScatterResult {
                t0,
                x: x.to_vec(),
                v: v.to_vec(),
                kappa,
                e,
                b,
                residual,
                iterations: it,
                t0_trace: trace,
                grid: Some(g),
            });
        }
        let _ = change;
        t0 *= 2.0;
    }
    Err(Error::Convergence {
        what: "hyperbolic scattering map".into(),
        iterations: trace.len(),
        residual: f64::NAN,
        history: trace,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CentralConfig {
    pub b: Vec<Vec4>,
    /// `U(b) = kappa/2 sum_{j<k} |b_jk|^{-2}`
    pub u: f64,
    /// Lagrange multiplier fitted from the vector equation
    pub c: f64,
    /// `max_j |2 U b_j - kappa sum_k b_jk/|b_jk|^4|`
    pub residual: f64,
    pub seed: u64,
    pub restarts: usize,
}

fn potential_u(b: &[Vec4], kappa: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..b.len() {
        for k in j + 1..b.len() {
            s += 1.0 / vec4::norm2(&vec4::sub(&b[j], &b[k]));
        }
    }
    0.5 * kappa * s
}

/// `2 U b_j - kappa sum_k b_jk / |b_jk|^4`, the projected gradient on the sphere.
pub fn lagrange_residual(b: &[Vec4], kappa: f64) -> Vec<Vec4> {
    let u = potential_u(b, kappa);
    let f = forces(b, &|_| 1.0);
    b.iter().zip(&f).map(|(bj, fj)| vec4::axpy(&vec4::scale(2.0 * u, bj), -kappa, fj)).collect()
}

fn normalize_config(b: &mut [Vec4]) {
    let c = vec4::scale(1.0 / b.len() as f64, &center_of_mass(b));
    for bj in b.iter_mut() {
        *bj = vec4::sub(bj, &c);
    }
    let n: f64 = b.iter().map(vec4::norm2).sum::<f64>().sqrt();
    for bj in b.iter_mut() {
        *bj = vec4::scale(1.0 / n, bj);
    }
}

/// Minimize `U` on `{sum b_j = 0, sum |b_j|^2 = 1}` by projected gradient
/// descent with Barzilai-Borwein steps and random restarts; the best minimum
/// found is returned (global minimality is not certified).
pub fn central_config(m: usize, kappa: f64, seed: u64) -> Result<CentralConfig> {
    if m < 2 {
        return invalid("need at least two bodies");
    }
    if !(kappa > 0.0) {
        return invalid("coupling must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let restarts = 6;
    let mut best: Option<(Vec<Vec4>, f64)> = None;
    for _ in 0..restarts {
        let mut b: Vec<Vec4> = (0..m).map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng))).collect();
        normalize_config(&mut b);
        let mut g = lagrange_residual(&b, kappa);
        let mut step = 1e-2 / kappa;
        let mut converged = false;
        for _ in 0..20000 {
            let gn = g.iter().map(vec4::norm2).sum::<f64>().sqrt();
            if gn < 1e-12 * kappa {
                converged = true;
                break;
            }
            let u0 = potential_u(&b, kappa);
            // backtracking on the retracted step
            let mut trial;
            let mut tries = 0;
            loop {
                trial = b.iter().zip(&g).map(|(bj, gj)| vec4::axpy(bj, -step, gj)).collect::<Vec<_>>();
                normalize_config(&mut trial);
                let ok = min_distance(&trial) > 1e-8 && potential_u(&trial, kappa) <= u0 - 1e-4 * step * gn * gn;
                if ok || tries > 40 {
                    break;
                }
                step *= 0.5;
                tries += 1;
            }
            if min_distance(&trial) <= 1e-8 {
                break;
            }
            let g_new = lagrange_residual(&trial, kappa);
            // Barzilai-Borwein step from the last displacement
            let mut sy = 0.0;
            let mut ss = 0.0;
            for j in 0..m {
                let s = vec4::sub(&trial[j], &b[j]);
                let y = vec4::sub(&g_new[j], &g[j]);
                sy += vec4::dot(&s, &y);
                ss += vec4::norm2(&s);
            }
            step = if sy > 0.0 { (ss / sy).min(1e3 / kappa) } else { 1e-2 / kappa };
            b = trial;
            g = g_new;
        }
        if !converged {
            continue;
        }
        let u = potential_u(&b, kappa);
        if best.as_ref().map_or(true, |(_, bu)| u < *bu) {
            best = Some((b, u));
        }
    }
    let (b, u) = best.ok_or_else(|| Error::Convergence {
        what: "central configuration".into(),
        iterations: restarts,
        residual: f64::NAN,
        history: vec![],
    })?;
    let f = forces(&b, &|_| 1.0);
    let c = kappa * b.iter().zip(&f).map(|(bj, fj)| vec4::dot(bj, fj)).sum::<f64>();
    let residual = lagrange_residual(&b, kappa).iter().map(vec4::norm).fold(0.0, f64::max);
    Ok(CentralConfig { b, u, c, residual, seed, restarts })
}

/// Homothetic orbit `alpha(t) = (4 sqrt(U(b)) t + eta)^{1/2} b`, `beta = alpha'/2`.
#[derive(Debug, Clone, Serialize)]
pub struct ParabolicOrbit {
    pub b: Vec<Vec4>,
    pub eta: f64,
    pub kappa: f64,
    pub u: f64,
}

impl ParabolicOrbit {
    pub fn new(b: &[Vec4], eta: f64, kappa: f64) -> Result<Self> {
        if !(eta >= 0.0) {
            return invalid("eta must be non-negative");
        }
        let norm2: f64 = b.iter().map(vec4::norm2).sum();
        if (norm2 - 1.0).abs() > 1e-10 || !centered(b) || !distinct(b) {
            return invalid("b must be a centred, collision-free unit configuration");
        }
        let res = lagrange_residual(b, kappa).iter().map(vec4::norm).fold(0.0, f64::max);
        if res > 1e-6 * kappa {
            return invalid(format!("b is not a central configuration (Lagrange residual {res:.3e})"));
        }
        Ok(ParabolicOrbit { b: b.to_vec(), eta, kappa, u: potential_u(b, kappa) })
    }

    fn rate(&self) -> f64 {
        4.0 * self.u.sqrt()
    }

    pub fn state_at(&self, t: f64) -> BodyState {
        let a = self.rate();
        let f = (a * t + self.eta).sqrt();
        let df = 0.5 * a / f;
        BodyState {
            alpha: self.b.iter().map(|bj| vec4::scale(f, bj)).collect(),
            beta: self.b.iter().map(|bj| vec4::scale(0.5 * df, bj)).collect(),
            kappa: self.kappa,
            masses: None,
        }
    }

    /// `beta'(t)` from the closed form.
    pub fn beta_dot(&self, t: f64) -> Vec<Vec4> {
        let a = self.rate();
        let f = (a * t + self.eta).sqrt();
        let ddf = -0.25 * a * a / (f * f * f);
        self.b.iter().map(|bj| vec4::scale(0.5 * ddf, bj)).collect()
    }

    /// `max_j (|alpha_j' - 2 beta_j| + |beta_j' - rhs_j|)` with the closed-form
    /// derivatives substituted into the law.
    pub fn ode_residual(&self, t: f64) -> Result<f64> {
        let s = self.state_at(t);
        let (_, db) = mbody_rhs(&s)?;
        let a = self.rate();
        let f = (a * t + self.eta).sqrt();
        let df = 0.5 * a / f;
        let bd = self.beta_dot(t);
        let mut worst: f64 = 0.0;
        for j in 0..self.b.len() {
            let da = vec4::scale(df, &self.b[j]);
            let r1 = vec4::norm(&vec4::sub(&da, &vec4::scale(2.0, &s.beta[j])));
            let r2 = vec4::norm(&vec4::sub(&bd[j], &db[j]));
            worst = worst.max(r1 + r2);
        }
        Ok(worst)
    }

    pub fn path(&self, times: &[f64]) -> Result<BodyPath> {
        BodyPath::from_states(times.to_vec(), times.iter().map(|&t| self.state_at(t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrbitLabel {
    Hyperbolic,
    Parabolic,
    HyperbolicParabolic,
    Undetermined,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairClass {
    pub j: usize,
    pub k: usize,
    pub exponent: f64,
    pub label: OrbitLabel,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrbitReport {
    pub pairs: Vec<PairClass>,
    pub label: OrbitLabel,
    /// `alpha(t)/t` at the final time
    pub limit_velocity: Vec<Vec4>,
}

/// Half-width of the exponent bands around 1 and 1/2.
pub const EXPONENT_BAND: f64 = 0.15;

/// Label each pair by the growth exponent of `|alpha_jk|` fitted over the last
/// decade of the path.
pub fn classify_orbit(p: &BodyPath) -> Result<OrbitReport> {
    let t_end = *p.times.last().ok_or_else(|| Error::Precondition("empty path".into()))?;
    let t_start = p.times[0];
    if !(t_start > 0.0 && t_end >= 10.0 * t_start) {
        return Err(Error::Precondition("path must span at least a decade of positive times".into()));
    }
    let idx: Vec<usize> = (0..p.times.len()).filter(|&i| p.times[i] >= t_end / 10.0).collect();
    let m = p.states[0].m();
    let mut pairs = Vec::new();
    for j in 0..m {
        for k in j + 1..m {
            let xs: Vec<f64> = idx.iter().map(|&i| p.times[i].ln()).collect();
            let ys: Vec<f64> = idx
                .iter()
                .map(|&i| vec4::norm(&vec4::sub(&p.states[i].alpha[j], &p.states[i].alpha[k])).ln())
                .collect();
            let exponent = fit_line(&xs, &ys)?.slope;
            let label = if (exponent - 1.0).abs() <= EXPONENT_BAND {
                OrbitLabel::Hyperbolic
            } else if (exponent - 0.5).abs() <= EXPONENT_BAND {
                OrbitLabel::Parabolic
            } else {
                OrbitLabel::Undetermined
            };
            pairs.push(PairClass { j, k, exponent, label });
        }
    }
    let all = |l: OrbitLabel| pairs.iter().all(|p| p.label == l);
    let label = if pairs.iter().any(|p| p.label == OrbitLabel::Undetermined) {
        OrbitLabel::Undetermined
    } else if all(OrbitLabel::Hyperbolic) {
        OrbitLabel::Hyperbolic
    } else if all(OrbitLabel::Parabolic) {
        OrbitLabel::Parabolic
    } else {
        OrbitLabel::HyperbolicParabolic
    };
    let last = p.states.last().unwrap();
    let limit_velocity = last.alpha.iter().map(|a| vec4::scale(1.0 / t_end, a)).collect();
    Ok(OrbitReport { pairs, label, limit_velocity })
}

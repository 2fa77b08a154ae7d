//! Modulation parameters `g_j = (alpha_j, beta_j, lambda_j, mu_j, delta_j, gamma_j)`:
//! the coefficient functions `M`, `B`, `D`, the parameter system
//!
//! ```text
//! alpha' = 2 beta + 4 mu alpha        beta' = -4 mu beta - lambda^4 delta alpha + B
//! lambda' = -4 lambda mu + M          mu' = lambda^4 delta - 4 mu^2
//! delta' = D                          gamma' = lambda^2 - |beta|^2 - (beta' + 4 mu beta).alpha
//!                                              - (mu' + 4 mu^2) |alpha|^2
//! ```
//!
//! Picard solvers toward prescribed m-body asymptotics, and the `Mod(t)` residual.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mbody::{self, ParabolicOrbit, ScatterResult};
use crate::numerics::{bulirsch_stoer, fd_weights, fit_line, geomspace, quad, Cheb01, OdeOptions};
use crate::vec4::{self, Vec4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Hyperbolic,
    Parabolic,
}

impl Regime {
    /// Highest order for which every coefficient is known explicitly.
    pub fn max_order(self) -> usize {
        match self {
            Regime::Hyperbolic => 2,
            Regime::Parabolic => 5,
        }
    }
}

/// Strength of the order-2 force `b^(2) = -c kappa sum alpha_jk/|alpha_jk|^4`.
///
/// `Printed` uses `c = 1`, which matches the m-body law with coupling `kappa`.
/// `Consistent` uses `c = 2`, the value for which the order-2 real equation is
/// solvable with `T^(2) = 0` (momentum balance against `psi^(2)`); use it
/// whenever the approximate solution itself is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceLaw {
    Printed,
    Consistent,
}

impl ForceLaw {
    pub fn factor(self) -> f64 {
        match self {
            ForceLaw::Printed => 1.0,
            ForceLaw::Consistent => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModModel {
    pub regime: Regime,
    pub order: usize,
    /// `||Q||^2`
    pub kappa: f64,
    pub law: ForceLaw,
}

impl ModModel {
    pub fn new(regime: Regime, order: usize, kappa: f64, law: ForceLaw) -> Result<Self> {
        if !(kappa > 0.0) {
            return invalid("kappa must be positive");
        }
        if order > regime.max_order() {
            return Err(Error::UnsupportedOrder { what: format!("{regime:?} modulation"), order, max: regime.max_order() });
        }
        Ok(ModModel { regime, order, kappa, law })
    }

    /// Coupling of the m-body law that the `(alpha, beta)` flow reduces to.
    pub fn body_kappa(&self) -> f64 {
        self.law.factor() * self.kappa
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModParams {
    pub alpha: Vec<Vec4>,
    pub beta: Vec<Vec4>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ModParams {
    /// `lambda = 1`, `mu = delta = gamma = 0`.
    pub fn from_bodies(alpha: Vec<Vec4>, beta: Vec<Vec4>) -> Self {
        let m = alpha.len();
        ModParams { alpha, beta, lambda: vec![1.0; m], mu: vec![0.0; m], delta: vec![0.0; m], gamma: vec![0.0; m] }
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0
            || [self.beta.len(), self.lambda.len(), self.mu.len(), self.delta.len(), self.gamma.len()]
                .iter()
                .any(|&l| l != m)
        {
            return invalid("parameter vectors must have one entry per soliton");
        }
        if self.lambda.iter().any(|l| !(*l > 0.0)) {
            return invalid("lambda must be positive");
        }
        if m > 1 && !(mbody::min_distance(&self.alpha) > 0.0) {
            return Err(Error::Collision { time: f64::NAN, distance: mbody::min_distance(&self.alpha) });
        }
        Ok(())
    }

    /// Flat layout per soliton: `alpha(4), beta(4), lambda, mu, delta, gamma`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(12 * self.m());
        for j in 0..self.m() {
            y.extend_from_slice(&self.alpha[j]);
            y.extend_from_slice(&self.beta[j]);
            y.extend_from_slice(&[self.lambda[j], self.mu[j], self.delta[j], self.gamma[j]]);
        }
        y
    }

    pub fn from_vec(y: &[f64]) -> Self {
        let m = y.len() / 12;
        let c = |j: usize, o: usize| -> Vec4 { std::array::from_fn(|i| y[12 * j + o + i]) };
        ModParams {
            alpha: (0..m).map(|j| c(j, 0)).collect(),
            beta: (0..m).map(|j| c(j, 4)).collect(),
            lambda: (0..m).map(|j| y[12 * j + 8]).collect(),
            mu: (0..m).map(|j| y[12 * j + 9]).collect(),
            delta: (0..m).map(|j| y[12 * j + 10]).collect(),
            gamma: (0..m).map(|j| y[12 * j + 11]).collect(),
        }
    }

    pub fn min_separation(&self) -> f64 {
        mbody::min_distance(&self.alpha)
    }
}

/// `M_j`, `B_j`, `D_j` per soliton.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coeffs {
    pub m: Vec<f64>,
    pub b: Vec<Vec4>,
    pub d: Vec<f64>,
}

impl Coeffs {
    fn zeros(m: usize) -> Self {
        Coeffs { m: vec![0.0; m], b: vec![vec4::ZERO; m], d: vec![0.0; m] }
    }
}

/// `-(2 kappa / lambda_j) sum_k alpha_jk . beta_jk / |alpha_jk|^4`
fn scale_coeff(p: &ModParams, kappa: f64) -> Vec<f64> {
    let m = p.m();
    (0..m)
        .map(|j| {
            let mut s = 0.0;
            for k in (0..m).filter(|&k| k != j) {
                let a = vec4::sub(&p.alpha[j], &p.alpha[k]);
                let b = vec4::sub(&p.beta[j], &p.beta[k]);
                s += vec4::dot(&a, &b) / vec4::norm2(&a).powi(2);
            }
            -2.0 * kappa / p.lambda[j] * s
        })
        .collect()
}

/// `-c kappa sum_k alpha_jk / |alpha_jk|^4`
fn force_coeff(p: &ModParams, kappa: f64, factor: f64) -> Vec<Vec4> {
    let m = p.m();
    (0..m)
        .map(|j| {
            let mut s = vec4::ZERO;
            for k in (0..m).filter(|&k| k != j) {
                let a = vec4::sub(&p.alpha[j], &p.alpha[k]);
                s = vec4::axpy(&s, 1.0 / vec4::norm2(&a).powi(2), &a);
            }
            vec4::scale(-factor * kappa, &s)
        })
        .collect()
}

/// The order-`n` terms `m^(n)`, `b^(n)`, `d^(n)`; orders proven to vanish
/// return exact zeros.
pub fn order_terms(p: &ModParams, model: &ModModel, n: usize) -> Result<Coeffs> {
    let max = model.regime.max_order();
    if n == 0 || n > max {
        return Err(Error::UnsupportedOrder { what: format!("{:?} coefficient", model.regime), order: n, max });
    }
    let mut c = Coeffs::zeros(p.m());
    let m_order = match model.regime {
        Regime::Hyperbolic => 2,
        Regime::Parabolic => 3,
    };
    if n == m_order {
        c.m = scale_coeff(p, model.kappa);
    }
    if n == 2 {
        c.b = force_coeff(p, model.kappa, model.law.factor());
    }
    Ok(c)
}

/// `M^(N) = sum_{n<=N} m^(n)` and likewise for `B`, `D`.
pub fn leading_coeffs(p: &ModParams, model: &ModModel) -> Result<Coeffs> {
    p.validate()?;
    sum_orders(p, model)
}

fn sum_orders(p: &ModParams, model: &ModModel) -> Result<Coeffs> {
    let mut c = Coeffs::zeros(p.m());
    for n in 1..=model.order {
        let t = order_terms(p, model, n)?;
        for j in 0..p.m() {
            c.m[j] += t.m[j];
            c.b[j] = vec4::add(&c.b[j], &t.b[j]);
            c.d[j] += t.d[j];
        }
    }
    Ok(c)
}

/// Exponents of one monomial `prod |alpha_jk|^{-q} alpha^p beta^k lambda^l mu^m delta^n`
/// (summed over solitons) entering the admissibility degree.
#[derive(Debug, Clone, Copy, Default)]
pub struct Monomial {
    pub q: u32,
    pub p: u32,
    pub k: u32,
    pub m: u32,
    pub n: u32,
}

/// Degree of a monomial; in the parabolic count the `beta` exponent enters
/// through its total order `|k|`.
pub fn degree(regime: Regime, x: Monomial) -> i64 {
    let (q, p, k, m, n) = (x.q as i64, x.p as i64, x.k as i64, x.m as i64, x.n as i64);
    match regime {
        Regime::Hyperbolic => q + 2 * m + 3 * n - p,
        Regime::Parabolic => q + k + 4 * m + 6 * n - p,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModDeriv {
    pub alpha: Vec<Vec4>,
    pub beta: Vec<Vec4>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ModDeriv {
    pub fn to_vec(&self) -> Vec<f64> {
        ModParams {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            lambda: self.lambda.clone(),
            mu: self.mu.clone(),
            delta: self.delta.clone(),
            gamma: self.gamma.clone(),
        }
        .to_vec()
    }

    pub fn from_vec(y: &[f64]) -> Self {
        let p = ModParams::from_vec(y);
        ModDeriv { alpha: p.alpha, beta: p.beta, lambda: p.lambda, mu: p.mu, delta: p.delta, gamma: p.gamma }
    }
}

fn gamma_rate(p: &ModParams, j: usize, beta_dot: &Vec4, mu_dot: f64) -> f64 {
    let (a, b, l, mu) = (&p.alpha[j], &p.beta[j], p.lambda[j], p.mu[j]);
    l * l - vec4::norm2(b) - vec4::dot(&vec4::axpy(beta_dot, 4.0 * mu, b), a) - (mu_dot + 4.0 * mu * mu) * vec4::norm2(a)
}

/// Right-hand side of the parameter system including the phase.
pub fn mod_ode_rhs(p: &ModParams, model: &ModModel) -> Result<ModDeriv> {
    let c = leading_coeffs(p, model)?;
    Ok(rhs_with(p, &c))
}

fn rhs_with(p: &ModParams, c: &Coeffs) -> ModDeriv {
    let m = p.m();
    let mut d = ModDeriv {
        alpha: vec![vec4::ZERO; m],
        beta: vec![vec4::ZERO; m],
        lambda: vec![0.0; m],
        mu: vec![0.0; m],
        delta: vec![0.0; m],
        gamma: vec![0.0; m],
    };
    for j in 0..m {
        let (a, b, l, mu, de) = (&p.alpha[j], &p.beta[j], p.lambda[j], p.mu[j], p.delta[j]);
        let l4 = l.powi(4);
        d.alpha[j] = vec4::axpy(&vec4::scale(2.0, b), 4.0 * mu, a);
        d.beta[j] = vec4::add(&vec4::axpy(&vec4::scale(-4.0 * mu, b), -l4 * de, a), &c.b[j]);
        d.lambda[j] = -4.0 * l * mu + c.m[j];
        d.mu[j] = l4 * de - 4.0 * mu * mu;
        d.delta[j] = c.d[j];
        d.gamma[j] = gamma_rate(p, j, &d.beta[j], d.mu[j]);
    }
    d
}

/// `Mod(t)`: sum over solitons of the six modulation-equation defects for the
/// given parameter derivatives.
pub fn mod_error(p: &ModParams, dp: &ModDeriv, model: &ModModel) -> Result<f64> {
    let c = leading_coeffs(p, model)?;
    let mut total = 0.0;
    for j in 0..p.m() {
        let (a, b, l, mu, de) = (&p.alpha[j], &p.beta[j], p.lambda[j], p.mu[j], p.delta[j]);
        let mq = dp.mu[j] + 4.0 * mu * mu;
        let e1 = vec4::norm(&vec4::sub(&dp.alpha[j], &vec4::axpy(&vec4::scale(2.0, b), 4.0 * mu, a)));
        let e2 = vec4::norm(&vec4::sub(&vec4::axpy(&vec4::axpy(&dp.beta[j], 4.0 * mu, b), mq, a), &c.b[j]));
        let e3 = (dp.lambda[j] + 4.0 * l * mu - c.m[j]).abs();
        let e4 = (mq - l.powi(4) * de).abs();
        let e5 = (dp.delta[j] - c.d[j]).abs();
        let e6 = (dp.gamma[j] + vec4::dot(&vec4::axpy(&dp.beta[j], 4.0 * mu, b), a) + mq * vec4::norm2(a) + vec4::norm2(b)
            - l * l)
            .abs();
        total += e1 + e2 + e3 + e4 + e5 + e6;
    }
    Ok(total)
}

/// Asymptotic m-body reference for a trajectory solve.
#[derive(Debug, Clone)]
pub enum Asymptote {
    Hyperbolic(ScatterResult),
    Parabolic(ParabolicOrbit),
}

impl Asymptote {
    fn state_at(&self, t: f64) -> mbody::BodyState {
        match self {
            Asymptote::Hyperbolic(s) => s.state_at(t),
            Asymptote::Parabolic(o) => o.state_at(t),
        }
    }

    fn kappa(&self) -> f64 {
        match self {
            Asymptote::Hyperbolic(s) => s.kappa,
            Asymptote::Parabolic(o) => o.kappa,
        }
    }

    fn t_min(&self) -> f64 {
        match self {
            Asymptote::Hyperbolic(s) => s.t0,
            Asymptote::Parabolic(_) => 0.0,
        }
    }

    /// `beta^inf'(t)`
    fn beta_dot(&self, t: f64) -> Result<Vec<Vec4>> {
        Ok(mbody::mbody_rhs(&self.state_at(t))?.1)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrajOptions {
    pub nodes: usize,
    /// output grid covers `[T0, span * T0]`
    pub span: f64,
    pub samples: usize,
    pub max_escalations: usize,
}

impl Default for TrajOptions {
    fn default() -> Self {
        TrajOptions { nodes: 48, span: 100.0, samples: 400, max_escalations: 8 }
    }
}

/// Largest deviations from the reference (over solitons) at one time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Deviation {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModPath {
    pub regime: Regime,
    pub order: usize,
    pub t0: f64,
    pub t0_trace: Vec<f64>,
    pub times: Vec<f64>,
    pub params: Vec<ModParams>,
    pub reference: Vec<mbody::BodyState>,
    pub lambda_inf: Vec<f64>,
    pub deviation: Vec<Deviation>,
    pub mod_values: Vec<f64>,
    /// sup change of one extra Picard sweep at the fixed point
    pub fixed_point_change: f64,
    pub iterations: usize,
}

/// Picard state at the Chebyshev nodes: deviations of `alpha`, `beta` from the
/// reference and the values of `lambda`, `mu`, `delta`.
#[derive(Debug, Clone)]
struct NodeState {
    da: Vec<Vec<Vec4>>,
    db: Vec<Vec<Vec4>>,
    lambda: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl NodeState {
    fn sup_diff(&self, o: &NodeState) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.da.len() {
            for j in 0..self.da[i].len() {
                d = d
                    .max(vec4::norm(&vec4::sub(&self.da[i][j], &o.da[i][j])))
                    .max(vec4::norm(&vec4::sub(&self.db[i][j], &o.db[i][j])))
                    .max((self.lambda[i][j] - o.lambda[i][j]).abs())
                    .max((self.mu[i][j] - o.mu[i][j]).abs())
                    .max((self.delta[i][j] - o.delta[i][j]).abs());
            }
        }
        d
    }
}

/// Tail quadrature in `sigma = (T0/t)^{1/p}`.
struct Tail {
    cheb: Cheb01,
    t0: f64,
    p: f64,
}

impl Tail {
    fn time(&self, s: f64) -> f64 {
        self.t0 * s.powf(-self.p)
    }

    fn sigma(&self, t: f64) -> f64 {
        (self.t0 / t).powf(1.0 / self.p)
    }

    /// `dt/dsigma` magnitude
    fn jac(&self, s: f64) -> f64 {
        self.p * self.t0 * s.powf(-self.p - 1.0)
    }
}

struct Problem<'a> {
    asym: &'a Asymptote,
    lambda_inf: &'a [f64],
    model: &'a ModModel,
}

impl Problem<'_> {
    fn params_at(&self, st: &NodeState, i: usize, t: f64) -> (ModParams, mbody::BodyState) {
        let r = self.asym.state_at(t);
        let m = r.m();
        let p = ModParams {
            alpha: (0..m).map(|j| vec4::add(&r.alpha[j], &st.da[i][j])).collect(),
            beta: (0..m).map(|j| vec4::add(&r.beta[j], &st.db[i][j])).collect(),
            lambda: st.lambda[i].clone(),
            mu: st.mu[i].clone(),
            delta: st.delta[i].clone(),
            gamma: vec![0.0; m],
        };
        (p, r)
    }

    fn sweep(&self, tail: &Tail, st: &NodeState) -> Result<NodeState> {
        let n = tail.cheb.nodes.len();
        let m = self.lambda_inf.len();
        // integrands times dt/dsigma; zero at sigma = 0 (all decay faster than t^{-1-1/p})
        let mut ga = vec![vec![vec4::ZERO; m]; n];
        let mut gb = ga.clone();
        let mut gl = vec![vec![0.0; m]; n];
        let mut gm = gl.clone();
        let mut gd = gl.clone();
        for i in 0..n {
            let s = tail.cheb.nodes[i];
            if s == 0.0 {
                continue;
            }
            let t = tail.time(s);
            let w = tail.jac(s);
            let (p, _) = self.params_at(st, i, t);
            let c = leading_coeffs(&p, self.model)?;
            let bd = self.asym.beta_dot(t)?;
            for j in 0..m {
                let (a, b, l, mu, de) = (&p.alpha[j], &p.beta[j], p.lambda[j], p.mu[j], p.delta[j]);
                let l4 = l.powi(4);
                ga[i][j] = vec4::scale(w, &vec4::axpy(&vec4::scale(-2.0, &st.db[i][j]), -4.0 * mu, a));
                let fb = vec4::add(&vec4::axpy(&vec4::scale(4.0 * mu, b), l4 * de, a), &vec4::sub(&bd[j], &c.b[j]));
                gb[i][j] = vec4::scale(w, &fb);
                gl[i][j] = w * (4.0 * l * mu - c.m[j]);
                gm[i][j] = w * (4.0 * mu * mu - l4 * de);
                gd[i][j] = -w * c.d[j];
            }
        }
        let integ = |vals: &dyn Fn(usize) -> f64| -> Vec<f64> {
            let v: Vec<f64> = (0..n).map(vals).collect();
            tail.cheb.integrate(&v)
        };
        let mut out = st.clone();
        for j in 0..m {
            for c in 0..4 {
                let ia = integ(&|i| ga[i][j][c]);
                let ib = integ(&|i| gb[i][j][c]);
                for i in 0..n {
                    out.da[i][j][c] = ia[i];
                    out.db[i][j][c] = ib[i];
                }
            }
            let il = integ(&|i| gl[i][j]);
            let im = integ(&|i| gm[i][j]);
            let id = integ(&|i| gd[i][j]);
            for i in 0..n {
                out.lambda[i][j] = self.lambda_inf[j] + il[i];
                out.mu[i][j] = im[i];
                out.delta[i][j] = id[i];
            }
        }
        Ok(out)
    }
}

fn solve_traj(asym: &Asymptote, lambda_inf: &[f64], model: &ModModel, t0: f64, opts: &TrajOptions) -> Result<ModPath> {
    let m = lambda_inf.len();
    if lambda_inf.iter().any(|l| !(*l > 0.0)) {
        return invalid("lambda_inf must be positive");
    }
    let rel = (asym.kappa() - model.body_kappa()).abs() / model.body_kappa();
    if rel > 1e-12 {
        return invalid(format!(
            "asymptote coupling {} does not match the modulation force law ({})",
            asym.kappa(),
            model.body_kappa()
        ));
    }
    let p = match model.regime {
        Regime::Hyperbolic => 1.0,
        Regime::Parabolic => 2.0,
    };
    let prob = Problem { asym, lambda_inf, model };
    let mut t0 = t0.max(asym.t_min());
    let mut trace = Vec::new();
    for _ in 0..=opts.max_escalations {
        trace.push(t0);
        let tail = Tail { cheb: Cheb01::new(opts.nodes), t0, p };
        let n = opts.nodes;
        let mut st = NodeState {
            da: vec![vec![vec4::ZERO; m]; n],
            db: vec![vec![vec4::ZERO; m]; n],
            lambda: vec![lambda_inf.to_vec(); n],
            mu: vec![vec![0.0; m]; n],
            delta: vec![vec![0.0; m]; n],
        };
        let mut ok = false;
        let mut prev = f64::INFINITY;
        let mut it = 0;
        while it < 300 {
            it += 1;
            let next = match prob.sweep(&tail, &st) {
                Ok(v) => v,
                Err(_) => break,
            };
            let change = next.sup_diff(&st);
            st = next;
            let floor = 1e-13 * (1.0 + lambda_inf.iter().fold(0.0f64, |a, b| a.max(*b)));
            if change < floor {
                ok = true;
                break;
            }
            if !change.is_finite() || (it > 5 && change > prev) || st.lambda.iter().flatten().any(|l| *l <= 0.0) {
                break;
            }
            prev = change;
        }
        if ok {
            let check = prob.sweep(&tail, &st)?;
            let fixed_point_change = check.sup_diff(&st);
            return build_path(&prob, &tail, &st, model, opts, trace, fixed_point_change, it);
        }
        t0 *= 2.0;
    }
    Err(Error::Convergence {
        what: format!("{:?} modulation trajectory", model.regime),
        iterations: trace.len(),
        residual: f64::NAN,
        history: trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_path(
    prob: &Problem,
    tail: &Tail,
    st: &NodeState,
    model: &ModModel,
    opts: &TrajOptions,
    t0_trace: Vec<f64>,
    fixed_point_change: f64,
    iterations: usize,
) -> Result<ModPath> {
    let m = prob.lambda_inf.len();
    let times = geomspace(tail.t0, opts.span * tail.t0, opts.samples);
    let col = |f: &dyn Fn(usize) -> f64, s: f64| -> f64 {
        let v: Vec<f64> = (0..tail.cheb.nodes.len()).map(f).collect();
        tail.cheb.interp(&v, s)
    };
    let params_at = |t: f64| -> (ModParams, mbody::BodyState) {
        let s = tail.sigma(t);
        let r = prob.asym.state_at(t);
        let p = ModParams {
            alpha: (0..m)
                .map(|j| std::array::from_fn(|c| r.alpha[j][c] + col(&|i| st.da[i][j][c], s)))
                .collect(),
            beta: (0..m)
                .map(|j| std::array::from_fn(|c| r.beta[j][c] + col(&|i| st.db[i][j][c], s)))
                .collect(),
            lambda: (0..m).map(|j| col(&|i| st.lambda[i][j], s)).collect(),
            mu: (0..m).map(|j| col(&|i| st.mu[i][j], s)).collect(),
            delta: (0..m).map(|j| col(&|i| st.delta[i][j], s)).collect(),
            gamma: vec![0.0; m],
        };
        (p, r)
    };
    // phase: gamma(T0) = 0, gamma' from the parameter system
    let mut gamma = vec![0.0; m];
    let mut params = Vec::with_capacity(times.len());
    let mut reference = Vec::with_capacity(times.len());
    let mut deviation = Vec::with_capacity(times.len());
    let mut mod_values = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        if k > 0 {
            for (j, g) in gamma.iter_mut().enumerate() {
                let rate = |tau: f64| -> f64 {
                    let (p, _) = params_at(tau);
                    let d = mod_ode_rhs(&p, model).expect("rhs on a validated path");
                    d.gamma[j]
                };
                *g += quad(rate, times[k - 1], t, 1e-13)?;
            }
        }
        let (mut p, r) = params_at(t);
        p.gamma = gamma.clone();
        let mut dev = Deviation { alpha: 0.0, beta: 0.0, lambda: 0.0, mu: 0.0, delta: 0.0 };
        for j in 0..m {
            dev.alpha = dev.alpha.max(vec4::norm(&vec4::sub(&p.alpha[j], &r.alpha[j])));
            dev.beta = dev.beta.max(vec4::norm(&vec4::sub(&p.beta[j], &r.beta[j])));
            dev.lambda = dev.lambda.max((p.lambda[j] - prob.lambda_inf[j]).abs());
            dev.mu = dev.mu.max(p.mu[j].abs());
            dev.delta = dev.delta.max(p.delta[j].abs());
        }
        params.push(p);
        reference.push(r);
        deviation.push(dev);
        mod_values.push(0.0);
    }
    let mut path = ModPath {
        regime: model.regime,
        order: model.order,
        t0: tail.t0,
        t0_trace,
        times,
        params,
        reference,
        lambda_inf: prob.lambda_inf.to_vec(),
        deviation,
        mod_values: vec![],
        fixed_point_change,
        iterations,
    };
    path.mod_values = mod_residual(&path, model)?.values;
    Ok(path)
}

/// Solve the parameter system on `[T0, inf)` with `P -> P^inf` for a
/// hyperbolic scattering state; `T0` is doubled until the Picard map contracts.
pub fn solve_mod_traj_hyperbolic(
    asym: &ScatterResult,
    lambda_inf: &[f64],
    model: &ModModel,
    t0: f64,
    opts: &TrajOptions,
) -> Result<ModPath> {
    if model.regime != Regime::Hyperbolic {
        return invalid("model regime must be hyperbolic");
    }
    if lambda_inf.len() != asym.x.len() {
        return invalid("one lambda_inf per soliton");
    }
    solve_traj(&Asymptote::Hyperbolic(asym.clone()), lambda_inf, model, t0, opts)
}

/// As [`solve_mod_traj_hyperbolic`] for a homothetic parabolic orbit; all
/// `lambda_inf` must be equal.
pub fn solve_mod_traj_parabolic(
    asym: &ParabolicOrbit,
    lambda_inf: &[f64],
    model: &ModModel,
    t0: f64,
    opts: &TrajOptions,
) -> Result<ModPath> {
    if model.regime != Regime::Parabolic {
        return invalid("model regime must be parabolic");
    }
    if lambda_inf.len() != asym.b.len() {
        return invalid("one lambda_inf per soliton");
    }
    if lambda_inf.iter().any(|l| (l - lambda_inf[0]).abs() > 1e-14 * lambda_inf[0].abs()) {
        return invalid("parabolic trajectories need identical lambda_inf");
    }
    if !(t0 > 0.0) {
        return invalid("T0 must be positive");
    }
    solve_traj(&Asymptote::Parabolic(asym.clone()), lambda_inf, model, t0, opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModResidual {
    pub values: Vec<f64>,
    /// largest gap between 5- and 7-point derivative estimates
    pub derivative_gap: f64,
    /// set when `derivative_gap` exceeds `1e-8`
    pub coarse_grid_warning: bool,
}

/// `Mod(t)` at each path node with parameter derivatives from 7-point
/// differences on the (possibly non-uniform) time grid.
pub fn mod_residual(path: &ModPath, model: &ModModel) -> Result<ModResidual> {
    let nt = path.times.len();
    if nt < 7 {
        return Err(Error::Precondition("need at least seven time nodes".into()));
    }
    let ys: Vec<Vec<f64>> = path.params.iter().map(|p| p.to_vec()).collect();
    let dim = ys[0].len();
    let deriv = |k: usize, width: usize| -> Vec<f64> {
        let start = k.saturating_sub(width / 2).min(nt - width);
        let xs = &path.times[start..start + width];
        let w = fd_weights(path.times[k], xs, 1);
        (0..dim).map(|c| (0..width).map(|i| w[1][i] * ys[start + i][c]).sum()).collect()
    };
    let mut values = Vec::with_capacity(nt);
    let mut gap: f64 = 0.0;
    for k in 0..nt {
        let d7 = deriv(k, 7);
        let d5 = deriv(k, 5);
        let scale = d7.iter().fold(1.0f64, |a, b| a.max(b.abs()));
        gap = gap.max(d7.iter().zip(&d5).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
        values.push(mod_error(&path.params[k], &ModDeriv::from_vec(&d7), model)?);
    }
    Ok(ModResidual { values, derivative_gap: gap, coarse_grid_warning: gap > 1e-8 })
}

/// Fitted `p` in `dev ~ C t^p`, or a marker that the deviation vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum DecayFit {
    Exponent(f64),
    /// largest deviation on the path (below the noise floor)
    Vanishing(f64),
}

impl DecayFit {
    /// True when the deviation decays at least like `t^budget`.
    pub fn within(&self, budget: f64) -> bool {
        match *self {
            DecayFit::Exponent(p) => p <= budget,
            DecayFit::Vanishing(_) => true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationFits {
    pub alpha: DecayFit,
    pub beta: DecayFit,
    pub lambda: DecayFit,
    pub mu: DecayFit,
    pub delta: DecayFit,
}

/// Deviations whose largest value is below this (relative to the path scale)
/// are reported as vanishing rather than fitted.
pub const VANISHING_FLOOR: f64 = 1e-12;

/// Log-log fits of the deviation components against time.
pub fn deviation_fits(path: &ModPath) -> Result<DeviationFits> {
    let scale = path.params.iter().flat_map(|p| p.alpha.iter().map(vec4::norm)).fold(1.0, f64::max);
    let fit = |get: &dyn Fn(&Deviation) -> f64| -> Result<DecayFit> {
        let ys: Vec<f64> = path.deviation.iter().map(get).collect();
        let peak = ys.iter().fold(0.0, |a: f64, b| a.max(*b));
        if peak <= VANISHING_FLOOR * scale {
            return Ok(DecayFit::Vanishing(peak));
        }
        let xs: Vec<f64> = path.times.iter().map(|t| t.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v| v.max(1e-300).ln()).collect();
        Ok(DecayFit::Exponent(fit_line(&xs, &ly)?.slope))
    };
    Ok(DeviationFits {
        alpha: fit(&|d| d.alpha)?,
        beta: fit(&|d| d.beta)?,
        lambda: fit(&|d| d.lambda)?,
        mu: fit(&|d| d.mu)?,
        delta: fit(&|d| d.delta)?,
    })
}

/// Integrate the parameter system from `p0` at `times[0]`.
pub fn integrate_params(p0: &ModParams, model: &ModModel, times: &[f64], tol: f64) -> Result<Vec<ModParams>> {
    p0.validate()?;
    let opts = OdeOptions { rtol: tol, atol: tol * 1e-3, h0: 1e-2, ..OdeOptions::default() };
    let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let p = ModParams::from_vec(y);
        match sum_orders(&p, model) {
            Ok(c) => dy.copy_from_slice(&rhs_with(&p, &c).to_vec()),
            Err(_) => dy.iter_mut().for_each(|v| *v = f64::NAN),
        }
    };
    let guard = |t: f64, y: &[f64]| -> Result<()> {
        let p = ModParams::from_vec(y);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { time: t });
        }
        if p.m() > 1 && p.min_separation() <= 0.0 {
            return Err(Error::Collision { time: t, distance: p.min_separation() });
        }
        Ok(())
    };
    let ys = bulirsch_stoer(f, times[0], &p0.to_vec(), times, &opts, guard)?;
    Ok(ys.iter().map(|y| ModParams::from_vec(y)).collect())
}

/// Largest difference (all parameters) between the path and a re-integration
/// of the parameter system from its first node.
pub fn reintegration_gap(path: &ModPath, model: &ModModel) -> Result<f64> {
    let again = integrate_params(&path.params[0], model, &path.times, 1e-13)?;
    let mut worst: f64 = 0.0;
    for (p, q) in path.params.iter().zip(&again) {
        let a = p.to_vec();
        let b = q.to_vec();
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    Ok(worst)
}

impl ModPath {
    /// Columns `t`, per soliton `alpha, beta, lambda, mu, delta, gamma`, then `a`, `Mod`.
    pub fn to_csv(&self) -> String {
        let m = self.params.first().map_or(0, |p| p.m());
        let mut head = vec!["t".to_string()];
        for j in 0..m {
            for i in 0..4 {
                head.push(format!("alpha_{j}_{i}"));
            }
            for i in 0..4 {
                head.push(format!("beta_{j}_{i}"));
            }
            for name in ["lambda", "mu", "delta", "gamma"] {
                head.push(format!("{name}_{j}"));
            }
        }
        head.push("a".into());
        head.push("mod".into());
        let mut out = head.join(",") + "\n";
        for (k, p) in self.params.iter().enumerate() {
            let mut row = vec![format!("{:.17e}", self.times[k])];
            row.extend(p.to_vec().iter().map(|v| format!("{v:.17e}")));
            row.push(format!("{:.17e}", if m > 1 { p.min_separation() } else { f64::INFINITY }));
            row.push(format!("{:.17e}", self.mod_values.get(k).copied().unwrap_or(f64::NAN)));
            out += &(row.join(",") + "\n");
        }
        out
    }
}

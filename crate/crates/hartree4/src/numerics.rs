//! Small numerical kernels shared by the physics modules: finite-difference and
//! quadrature weights, a banded LU, an extrapolation ODE integrator, Chebyshev
//! tools and log-log fits.

use crate::error::{Error, Result};

/// Fornberg weights for derivatives of order 0..=m at `x0` from values at `nodes`.
/// Returns `w[k][j]`, the weight of node `j` for the k-th derivative.
pub fn fd_weights(x0: f64, nodes: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Dense solve with partial pivoting; intended for the small systems that
/// define stencils.
pub fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::Solver("singular stencil system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Ok(x)
}

/// Weights `w` with `sum w_j p(x_j) = int_a^b p` for every polynomial of degree
/// below `nodes.len()`.
pub fn interval_weights(nodes: &[f64], a: f64, b: f64) -> Vec<f64> {
    let n = nodes.len();
    // shift and scale for conditioning
    let c = 0.5 * (a + b);
    let s = nodes
        .iter()
        .map(|x| (x - c).abs())
        .fold((b - a).abs() * 0.5, f64::max)
        .max(1e-300);
    let xs: Vec<f64> = nodes.iter().map(|x| (x - c) / s).collect();
    let (ua, ub) = ((a - c) / s, (b - c) / s);
    let mut mat = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for q in 0..n {
        for j in 0..n {
            mat[q][j] = xs[j].powi(q as i32);
        }
        let e = (q + 1) as i32;
        rhs[q] = (ub.powi(e) - ua.powi(e)) / e as f64 * s;
    }
    solve_small(mat, rhs).expect("distinct stencil nodes")
}

/// Square band matrix with `kl` sub- and `ku` super-diagonals.
#[derive(Debug, Clone)]
pub struct Band {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    data: Vec<f64>,
    factored: bool,
}

impl Band {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Band { n, kl, ku, data: vec![0.0; n * (kl + ku + 1)], factored: false }
    }

    fn idx(&self, i: usize, j: usize) -> Option<usize> {
        if j + self.kl < i || i + self.ku < j {
            None
        } else {
            Some(i * (self.kl + self.ku + 1) + (j + self.kl - i))
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.idx(i, j).map_or(0.0, |k| self.data[k])
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j).expect("entry outside band");
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j).expect("entry outside band");
        self.data[k] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert!(!self.factored);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut s = 0.0;
            for j in lo..=hi {
                s += self.get(i, j) * x[j];
            }
            y[i] = s;
        }
        y
    }

    /// In-place LU without pivoting (the matrices factored here are
    /// diagonally dominant or symmetric positive definite).
    pub fn factor(&mut self) -> Result<()> {
        let n = self.n;
        for k in 0..n {
            let piv = self.get(k, k);
            if piv.abs() < 1e-300 || !piv.is_finite() {
                return Err(Error::Solver(format!("zero pivot at row {k} of banded system")));
            }
            let imax = (k + self.kl).min(n - 1);
            let jmax = (k + self.ku).min(n - 1);
            for i in k + 1..=imax {
                let l = self.get(i, k) / piv;
                self.set(i, k, l);
                if l != 0.0 {
                    for j in k + 1..=jmax {
                        let v = self.get(k, j);
                        self.add(i, j, -l * v);
                    }
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert!(self.factored);
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(self.kl);
            let mut s = x[i];
            for j in lo..i {
                s -= self.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + self.ku).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= self.get(i, j) * x[j];
            }
            x[i] = s / self.get(i, i);
        }
        x
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h0: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-12, atol: 1e-14, h0: 1e-2, max_steps: 2_000_000 }
    }
}

const BS_SEQ: [usize; 9] = [2, 4, 6, 8, 10, 12, 14, 16, 18];

fn modified_midpoint<F>(f: &mut F, t: f64, y: &[f64], big_h: f64, nsub: usize) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let h = big_h / nsub as f64;
    let mut dy = vec![0.0; n];
    f(t, y, &mut dy);
    let mut z0 = y.to_vec();
    let mut z1: Vec<f64> = (0..n).map(|i| y[i] + h * dy[i]).collect();
    for m in 1..nsub {
        f(t + m as f64 * h, &z1, &mut dy);
        for i in 0..n {
            let z2 = z0[i] + 2.0 * h * dy[i];
            z0[i] = z1[i];
            z1[i] = z2;
        }
    }
    f(t + big_h, &z1, &mut dy);
    (0..n).map(|i| 0.5 * (z0[i] + z1[i] + h * dy[i])).collect()
}

/// Gragg-Bulirsch-Stoer integration with step control. Returns the state at
/// every time in `t_out` (monotone, starting on the side of `t0` it moves to).
/// `guard` is called after each accepted step and may abort the integration.
pub fn bulirsch_stoer<F, G>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_out: &[f64],
    opts: &OdeOptions,
    mut guard: G,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    G: FnMut(f64, &[f64]) -> Result<()>,
{
    let mut out = Vec::with_capacity(t_out.len());
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h = opts.h0.abs();
    let mut steps = 0usize;
    for &target in t_out {
        let dir = if target >= t { 1.0 } else { -1.0 };
        while (target - t) * dir > 1e-14 * (1.0 + t.abs()) {
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::Convergence {
                    what: "ode integration".into(),
                    iterations: steps,
                    residual: f64::NAN,
                    history: vec![],
                });
            }
            let remaining = (target - t).abs();
            let last = h >= remaining;
            let step = if last { remaining } else { h };
            let mut table: Vec<Vec<Vec<f64>>> = Vec::new();
            let mut accepted = None;
            let mut last_err = f64::INFINITY;
            for (k, &nk) in BS_SEQ.iter().enumerate() {
                let mut row = vec![modified_midpoint(&mut f, t, &y, step * dir, nk)];
                for j in 1..=k {
                    let ratio = (nk as f64 / BS_SEQ[k - j] as f64).powi(2) - 1.0;
                    let prev = &table[k - 1][j - 1];
                    let cur = &row[j - 1];
                    let next: Vec<f64> =
                        cur.iter().zip(prev).map(|(c, p)| c + (c - p) / ratio).collect();
                    row.push(next);
                }
                table.push(row);
                if k >= 2 {
                    let a = &table[k][k];
                    let b = &table[k][k - 1];
                    let mut err: f64 = 0.0;
                    for i in 0..y.len() {
                        let sc = opts.atol + opts.rtol * y[i].abs().max(a[i].abs());
                        err = err.max((a[i] - b[i]).abs() / sc);
                    }
                    if !err.is_finite() {
                        break;
                    }
                    last_err = err;
                    if err <= 1.0 {
                        accepted = Some((k, err));
                        break;
                    }
                }
            }
            match accepted {
                Some((k, err)) => {
                    let kk = table.len() - 1;
                    y = table[kk][kk].clone();
                    t = if last { target } else { t + step * dir };
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(Error::BlowUp { time: t });
                    }
                    guard(t, &y)?;
                    let fac = 0.9 * err.max(1e-10).powf(-1.0 / (2 * k + 1) as f64);
                    let grow = if k <= 4 { 4.0 } else { 1.5 };
                    let hn = step * fac.clamp(0.2, grow);
                    if !last || hn > h {
                        h = hn;
                    }
                }
                None => {
                    let fac = if last_err.is_finite() { 0.5 } else { 0.1 };
                    h = step * fac;
                    if h < 1e-14 * (1.0 + t.abs()) {
                        return Err(Error::Convergence {
                            what: "ode step size underflow".into(),
                            iterations: steps,
                            residual: last_err,
                            history: vec![],
                        });
                    }
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Least-squares line through (x, y).
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::Fit("need at least two points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    if !slope.is_finite() {
        return Err(Error::Fit("non-finite slope".into()));
    }
    Ok(LineFit { slope, intercept, slope_stderr })
}

/// Slope of log|y| against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(v.abs() > 0.0) || !v.is_finite()) {
        return Err(Error::Fit("log-log fit needs finite non-zero data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.abs().ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    fit_line(&lx, &ly)
}

/// Chebyshev-Lobatto collocation on [0, 1] with spectral integration from 0.
#[derive(Debug, Clone)]
pub struct Cheb01 {
    pub nodes: Vec<f64>,
    /// `(cumint * v)[i] = int_0^{s_i} p_v(s) ds`
    pub cumint: Vec<Vec<f64>>,
    bary: Vec<f64>,
}

impl Cheb01 {
    pub fn new(n: usize) -> Self {
        assert!(n >= 3);
        let xs: Vec<f64> = (0..n)
            .map(|i| -(std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let nodes: Vec<f64> = xs.iter().map(|x| 0.5 * (1.0 + x)).collect();
        // values -> coefficients (discrete cosine transform on Lobatto points)
        let mut coef = vec![vec![0.0; n]; n];
        for k in 0..n {
            for j in 0..n {
                let theta = std::f64::consts::PI * ((n - 1 - j) as f64) / (n - 1) as f64;
                let mut w = 2.0 / (n - 1) as f64;
                if j == 0 || j == n - 1 {
                    w *= 0.5;
                }
                coef[k][j] = w * (k as f64 * theta).cos();
            }
        }
        for j in 0..n {
            coef[0][j] *= 0.5;
            coef[n - 1][j] *= 0.5;
        }
        let cheb_t = |k: usize, x: f64| -> f64 { (k as f64 * x.clamp(-1.0, 1.0).acos()).cos() };
        let antider = |k: usize, x: f64| -> f64 {
            let f = |x: f64| -> f64 {
                match k {
                    0 => x,
                    1 => 0.5 * x * x,
                    _ => 0.5 * (cheb_t(k + 1, x) / (k + 1) as f64 - cheb_t(k - 1, x) / (k as f64 - 1.0)),
                }
            };
            f(x) - f(-1.0)
        };
        let mut cumint = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += antider(k, xs[i]) * coef[k][j];
                }
                cumint[i][j] = 0.5 * s;
            }
        }
        let bary: Vec<f64> = (0..n)
            .map(|j| {
                let s = if j % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 || j == n - 1 {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        Cheb01 { nodes, cumint, bary }
    }

    pub fn integrate(&self, v: &[f64]) -> Vec<f64> {
        self.cumint.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// Barycentric interpolation of nodal values at `s`.
    pub fn interp(&self, v: &[f64], s: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &sj) in self.nodes.iter().enumerate() {
            let d = s - sj;
            if d.abs() < 1e-15 {
                return v[j];
            }
            let w = self.bary[j] / d;
            num += w * v[j];
            den += w;
        }
        num / den
    }
}

const GK_X: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GK_WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for i in 0..7 {
        let x = h * GK_X[i];
        let s = f(c - x) + f(c + x);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) quadrature of `f` on `[a, b]`.
pub fn quad(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut stack = vec![(a, b, 0usize)];
    let mut total = 0.0;
    let mut evals = 0usize;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (v, err) = gk15(&mut f, lo, hi);
        evals += 15;
        let width = (hi - lo) / (b - a);
        if err <= tol * width.max(1e-3) || depth >= 50 {
            total += v;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
        if evals > 2_000_000 {
            return Err(Error::Convergence {
                what: "adaptive quadrature".into(),
                iterations: evals,
                residual: err,
                history: vec![],
            });
        }
    }
    Ok(total)
}

/// Geometric grid of `n` points from `a` to `b` (both > 0).
pub fn geomspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n).map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp()).collect()
}

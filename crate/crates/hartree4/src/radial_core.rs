//! Radial grids and profiles on `[0, r_max]` with the measure `r^3 dr`.
//!
//! Nodes are cell centered, `r_i = (i + 1/2) h`. Functions carry a parity so
//! that stencils near the origin can use mirrored ghost values.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{fd_weights, interval_weights, Band};

/// Area of the unit sphere in four dimensions.
pub const OMEGA3: f64 = 2.0 * PI * PI;

/// `Delta (-|x|^{-2} * f) = POISSON * f` in four dimensions.
pub const POISSON: f64 = 4.0 * PI * PI;

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    pub r_max: f64,
    pub n: usize,
    pub h: f64,
    pub r: Vec<f64>,
    /// quadrature weights for `int_0^{r_max} f(r) r^3 dr`
    pub w: Vec<f64>,
}

// Euler-Maclaurin coefficient of h^4 g''' for the midpoint rule
const EM_MID_H4: f64 = -7.0 / 5760.0;

/// Midpoint rule in `r^3 dr` with the leading correction at the origin. The
/// right end is left uncorrected: every profile handled here decays there.
pub fn make_grid(r_max: f64, n: usize) -> Result<Arc<RadialGrid>> {
    if !(r_max > 0.0) || !r_max.is_finite() {
        return invalid(format!("r_max must be positive, got {r_max}"));
    }
    if n < 16 {
        return invalid(format!("need at least 16 radial nodes, got {n}"));
    }
    let h = r_max / n as f64;
    let r: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
    let mut w: Vec<f64> = r.iter().map(|x| h * x.powi(3)).collect();

    // left end: g'''(0) = 6 f(0), with f(0) from the even extrapolation
    let left = -EM_MID_H4 * h.powi(4) * 6.0;
    w[0] += left * 9.0 / 8.0;
    w[1] -= left / 8.0;

    if w.iter().any(|x| !(*x > 0.0)) {
        return invalid("grid too coarse: non-positive quadrature weight");
    }
    Ok(Arc::new(RadialGrid { r_max, n, h, r, w }))
}

impl RadialGrid {
    /// `int_0^{r_max} f r^3 dr`
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.w.iter().zip(f).map(|(a, b)| a * b).sum()
    }

    pub fn compatible(&self, other: &RadialGrid) -> bool {
        self.n == other.n && self.r_max == other.r_max
    }

    /// Position of node index `j`, which may be a ghost (`j < 0`).
    fn pos(&self, j: isize) -> f64 {
        (j as f64 + 0.5) * self.h
    }

    /// Map a possibly negative stencil index to a node and a sign.
    fn fold(&self, j: isize, parity: Parity) -> (usize, f64) {
        if j >= 0 {
            (j as usize, 1.0)
        } else {
            let s = parity.sign().expect("ghost requires parity");
            ((-j - 1) as usize, s)
        }
    }

    /// First index of a stencil of `width` points around `lo`, shifted so
    /// that it stays inside the grid (ghosts allowed when `parity` has a sign).
    fn clamp_start(&self, lo: isize, width: usize, parity: Parity) -> isize {
        let min = if parity.sign().is_some() { -(width as isize) } else { 0 };
        let max = self.n as isize - width as isize;
        lo.max(min).min(max)
    }

    /// Sparse derivative stencils, one per node: `(node, weight)` lists.
    pub fn derivative_stencils(&self, order: usize, width: usize, parity: Parity) -> Vec<Vec<(usize, f64)>> {
        let half = (width / 2) as isize;
        (0..self.n)
            .map(|i| {
                let start = self.clamp_start(i as isize - half, width, parity);
                let idx: Vec<isize> = (start..start + width as isize).collect();
                let xs: Vec<f64> = idx.iter().map(|&j| self.pos(j)).collect();
                let wts = fd_weights(self.r[i], &xs, order);
                let mut out: Vec<(usize, f64)> = Vec::with_capacity(width);
                for (k, &j) in idx.iter().enumerate() {
                    let (node, s) = self.fold(j, parity);
                    push_merge(&mut out, node, s * wts[order][k]);
                }
                out
            })
            .collect()
    }

    /// Derivative of order `order` using `width`-point stencils.
    pub fn derivative(&self, u: &[f64], parity: Parity, order: usize, width: usize) -> Vec<f64> {
        let st = self.derivative_stencils(order, width, parity);
        st.iter().map(|row| row.iter().map(|&(j, w)| w * u[j]).sum()).collect()
    }
}

fn push_merge(out: &mut Vec<(usize, f64)>, node: usize, w: f64) {
    if let Some(e) = out.iter_mut().find(|e| e.0 == node) {
        e.1 += w;
    } else {
        out.push((node, w));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    Even,
    Odd,
    None,
}

impl Parity {
    pub fn sign(self) -> Option<f64> {
        match self {
            Parity::Even => Some(1.0),
            Parity::Odd => Some(-1.0),
            Parity::None => None,
        }
    }

    pub fn times(self, other: Parity) -> Parity {
        match (self.sign(), other.sign()) {
            (Some(a), Some(b)) => Parity::from_sign(a * b),
            _ => Parity::None,
        }
    }

    pub fn from_sign(s: f64) -> Parity {
        if s > 0.0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    /// Parity of `r^k`.
    pub fn of_power(k: i32) -> Parity {
        if k.rem_euclid(2) == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

/// Sampled radial profile.
#[derive(Debug, Clone)]
pub struct RadialFn {
    pub grid: Arc<RadialGrid>,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
    pub parity: Parity,
}

impl RadialFn {
    pub fn new(grid: Arc<RadialGrid>, re: Vec<f64>, parity: Parity) -> Result<Self> {
        if re.len() != grid.n {
            return invalid(format!("expected {} samples, got {}", grid.n, re.len()));
        }
        if re.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite radial samples");
        }
        Ok(RadialFn { grid, re, im: None, parity })
    }

    pub fn new_complex(grid: Arc<RadialGrid>, re: Vec<f64>, im: Vec<f64>, parity: Parity) -> Result<Self> {
        let mut f = RadialFn::new(grid, re, parity)?;
        if im.len() != f.grid.n || im.iter().any(|v| !v.is_finite()) {
            return invalid("bad imaginary samples");
        }
        f.im = Some(im);
        Ok(f)
    }

    pub fn from_fn(grid: &Arc<RadialGrid>, parity: Parity, f: impl Fn(f64) -> f64) -> Self {
        let re = grid.r.iter().map(|&r| f(r)).collect();
        RadialFn { grid: grid.clone(), re, im: None, parity }
    }

    pub fn zeros(grid: &Arc<RadialGrid>, parity: Parity) -> Self {
        RadialFn { grid: grid.clone(), re: vec![0.0; grid.n], im: None, parity }
    }

    pub fn with_values(&self, re: Vec<f64>, parity: Parity) -> Self {
        RadialFn { grid: self.grid.clone(), re, im: None, parity }
    }

    pub fn r(&self) -> &[f64] {
        &self.grid.r
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.re.iter_mut().for_each(|v| *v *= c);
        if let Some(im) = out.im.as_mut() {
            im.iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    /// `a*self + b*other` on the real parts.
    pub fn axpby(&self, a: f64, other: &RadialFn, b: f64) -> Self {
        let parity = if self.parity == other.parity { self.parity } else { Parity::None };
        let re = self.re.iter().zip(&other.re).map(|(x, y)| a * x + b * y).collect();
        self.with_values(re, parity)
    }

    pub fn mul(&self, other: &RadialFn) -> Self {
        let re = self.re.iter().zip(&other.re).map(|(x, y)| x * y).collect();
        self.with_values(re, self.parity.times(other.parity))
    }

    /// Multiply by `r^k`.
    pub fn mul_rpow(&self, k: i32) -> Self {
        let re = self.re.iter().zip(&self.grid.r).map(|(v, r)| v * r.powi(k)).collect();
        self.with_values(re, self.parity.times(Parity::of_power(k)))
    }

    /// `||u||^2` in `L^2(R^4)` for a radial function.
    pub fn norm2(&self) -> f64 {
        let mut s = self.grid.integrate(&self.re.iter().map(|v| v * v).collect::<Vec<_>>());
        if let Some(im) = &self.im {
            s += self.grid.integrate(&im.iter().map(|v| v * v).collect::<Vec<_>>());
        }
        OMEGA3 * s
    }

    pub fn norm(&self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn derivative(&self) -> RadialFn {
        let d = self.grid.derivative(&self.re, self.parity, 1, 7);
        let parity = self.parity.times(Parity::Odd);
        self.with_values(d, parity)
    }

    pub fn max_abs(&self) -> f64 {
        self.re.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Serialize as CSV with a header recording the grid.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# r_max={},n={},parity={:?}\n", self.grid.r_max, self.grid.n, self.parity);
        if self.im.is_some() {
            s.push_str("r,value,value_im\n");
        } else {
            s.push_str("r,value\n");
        }
        for i in 0..self.grid.n {
            match &self.im {
                Some(im) => s.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", self.grid.r[i], self.re[i], im[i])),
                None => s.push_str(&format!("{:.17e},{:.17e}\n", self.grid.r[i], self.re[i])),
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<RadialFn> {
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| crate::error::Error::Format("empty profile".into()))?;
        let field = |key: &str| -> Option<String> {
            head.trim_start_matches('#')
                .split(',')
                .find_map(|kv| kv.trim().strip_prefix(key).map(|v| v.trim_start_matches('=').to_string()))
        };
        let bad = |m: &str| crate::error::Error::Format(m.to_string());
        let r_max: f64 = field("r_max").and_then(|v| v.parse().ok()).ok_or_else(|| bad("r_max"))?;
        let n: usize = field("n").and_then(|v| v.parse().ok()).ok_or_else(|| bad("n"))?;
        let parity = match field("parity").as_deref() {
            Some("Even") => Parity::Even,
            Some("Odd") => Parity::Odd,
            _ => Parity::None,
        };
        let grid = make_grid(r_max, n)?;
        let cols = lines.next().ok_or_else(|| bad("missing column header"))?;
        let complex = cols.contains("value_im");
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            let p = |k: usize| -> Result<f64> {
                parts.get(k).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("bad number"))
            };
            re.push(p(1)?);
            if complex {
                im.push(p(2)?);
            }
        }
        if complex {
            RadialFn::new_complex(grid, re, im, parity)
        } else {
            RadialFn::new(grid, re, parity)
        }
    }
}

/// `omega_3 int u conj(v) r^3 dr`.
pub fn weighted_inner(u: &RadialFn, v: &RadialFn) -> Result<Complex64> {
    if !u.grid.compatible(&v.grid) {
        return invalid("grid mismatch in weighted_inner");
    }
    let g = &u.grid;
    let zero = vec![0.0; g.n];
    let (ui, vi) = (u.im.as_ref().unwrap_or(&zero), v.im.as_ref().unwrap_or(&zero));
    let mut re = 0.0;
    let mut im = 0.0;
    for i in 0..g.n {
        let a = Complex64::new(u.re[i], ui[i]);
        let b = Complex64::new(v.re[i], vi[i]);
        let p = a * b.conj();
        re += g.w[i] * p.re;
        im += g.w[i] * p.im;
    }
    Ok(Complex64::new(OMEGA3 * re, OMEGA3 * im))
}

/// Real inner product of real profiles.
pub fn inner(u: &RadialFn, v: &RadialFn) -> f64 {
    debug_assert!(u.grid.compatible(&v.grid));
    let g = &u.grid;
    OMEGA3 * (0..g.n).map(|i| g.w[i] * u.re[i] * v.re[i]).sum::<f64>()
}

/// High-order cumulative integration on the cell-centered grid.
///
/// `apply(g)[i] = int_0^{r_i} g(s) ds` and `total(g) = int_0^{n h} g(s) ds`.
#[derive(Debug, Clone)]
pub struct Cumulative {
    cells: Vec<Vec<(usize, f64)>>,
    halves: Vec<Vec<(usize, f64)>>,
}

impl Cumulative {
    pub fn new(grid: &RadialGrid, parity: Parity) -> Self {
        let h = grid.h;
        let mk = |lo: isize, width: usize, a: f64, b: f64| -> Vec<(usize, f64)> {
            let start = grid.clamp_start(lo, width, parity);
            let idx: Vec<isize> = (start..start + width as isize).collect();
            let xs: Vec<f64> = idx.iter().map(|&j| grid.pos(j) / h).collect();
            let w = interval_weights(&xs, a / h, b / h);
            let mut out = Vec::with_capacity(width);
            for (k, &j) in idx.iter().enumerate() {
                let (node, s) = grid.fold(j, parity);
                push_merge(&mut out, node, s * w[k] * h);
            }
            out
        };
        let cells = (0..grid.n)
            .map(|k| mk(k as isize - 2, 5, k as f64 * h, (k + 1) as f64 * h))
            .collect();
        let halves = (0..grid.n)
            .map(|k| mk(k as isize - 3, 6, k as f64 * h, grid.r[k]))
            .collect();
        Cumulative { cells, halves }
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let dot = |row: &Vec<(usize, f64)>| row.iter().map(|&(j, w)| w * g[j]).sum::<f64>();
        let mut out = Vec::with_capacity(g.len());
        let mut acc = 0.0;
        for k in 0..g.len() {
            out.push(acc + dot(&self.halves[k]));
            acc += dot(&self.cells[k]);
        }
        out
    }

    pub fn total(&self, g: &[f64]) -> f64 {
        self.cells.iter().map(|row| row.iter().map(|&(j, w)| w * g[j]).sum::<f64>()).sum()
    }

    /// Dense matrix `C` with `apply(g) = C g`, row-major.
    pub fn dense(&self, n: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut acc = vec![0.0; n];
        for k in 0..n {
            let mut row = acc.clone();
            for &(j, w) in &self.halves[k] {
                row[j] += w;
            }
            out.push(row);
            for &(j, w) in &self.cells[k] {
                acc[j] += w;
            }
        }
        out
    }

    pub fn total_weights(&self, n: usize) -> Vec<f64> {
        let mut acc = vec![0.0; n];
        for row in &self.cells {
            for &(j, w) in row {
                acc[j] += w;
            }
        }
        acc
    }
}

#[derive(Debug, Clone)]
pub struct Potential {
    pub phi: RadialFn,
    /// `omega_3 int dens r^3 dr`
    pub mass: f64,
    /// set when the density has not decayed at `r_max`
    pub tail_warning: bool,
}

/// `phi = -|x|^{-2} * dens` for radial `dens`:
/// `phi(r) = -omega_3 int max(r, s)^{-2} dens(s) s^3 ds`.
pub fn radial_newton_potential(dens: &RadialFn) -> Result<Potential> {
    let cum = Cumulative::new(&dens.grid, Parity::Odd);
    Ok(newton_potential_with(&cum, dens))
}

pub(crate) fn newton_potential_with(cum: &Cumulative, dens: &RadialFn) -> Potential {
    let g = &dens.grid;
    let inner_g: Vec<f64> = (0..g.n).map(|i| g.r[i].powi(3) * dens.re[i]).collect();
    let outer_g: Vec<f64> = (0..g.n).map(|i| g.r[i] * dens.re[i]).collect();
    let a = cum.apply(&inner_g);
    let b_cum = cum.apply(&outer_g);
    let b_tot = cum.total(&outer_g);
    let phi: Vec<f64> = (0..g.n)
        .map(|i| -OMEGA3 * (a[i] / (g.r[i] * g.r[i]) + (b_tot - b_cum[i])))
        .collect();
    let mass = OMEGA3 * cum.total(&inner_g);
    let peak = dens.max_abs();
    let tail_warning = dens.re[g.n - 1].abs() > 1e-8 * peak;
    Potential { phi: dens.with_values(phi, Parity::Even), mass, tail_warning }
}

/// Radial profile of `-|x|^{-2} * (g(|x|) Y_ell)` divided by `Y_ell`:
/// `-omega_3/(ell+1) int r_<^ell r_>^{-ell-2} g(s) s^3 ds`.
pub fn sector_potential(g: &RadialFn, ell: usize) -> RadialFn {
    let grid = &g.grid;
    let l = ell as i32;
    let pin = g.parity.times(Parity::of_power(l + 3));
    let pout = g.parity.times(Parity::of_power(1 - l));
    let inner_g: Vec<f64> = (0..grid.n).map(|i| grid.r[i].powi(l + 3) * g.re[i]).collect();
    let outer_g: Vec<f64> = (0..grid.n).map(|i| grid.r[i].powi(1 - l) * g.re[i]).collect();
    let cin = Cumulative::new(grid, pin);
    let cout = if pout == pin { cin.clone() } else { Cumulative::new(grid, pout) };
    let a = cin.apply(&inner_g);
    let b = cout.apply(&outer_g);
    let bt = cout.total(&outer_g);
    let c = -OMEGA3 / (ell as f64 + 1.0);
    let phi = (0..grid.n)
        .map(|i| {
            let r = grid.r[i];
            c * (a[i] * r.powi(-l - 2) + r.powi(l) * (bt - b[i]))
        })
        .collect();
    g.with_values(phi, Parity::of_power(l))
}

/// `Lambda^k u` with `Lambda u = 2u + r u'`, k in {1, 2, 3}.
pub fn apply_lambda(u: &RadialFn, k: usize) -> Result<RadialFn> {
    if !(1..=3).contains(&k) {
        return invalid(format!("Lambda power must be 1, 2 or 3, got {k}"));
    }
    let mut v = u.clone();
    for _ in 0..k {
        v = lambda_once(&v);
    }
    Ok(v)
}

fn lambda_once(u: &RadialFn) -> RadialFn {
    let d = u.grid.derivative(&u.re, u.parity, 1, 7);
    let re = (0..u.grid.n).map(|i| 2.0 * u.re[i] + u.grid.r[i] * d[i]).collect();
    u.with_values(re, u.parity)
}

/// Pointwise `f'' + 3 f'/r` by centered differences (one-sided at the ends);
/// works for profiles that do not vanish at `r_max`.
pub fn laplacian_fd(u: &RadialFn) -> RadialFn {
    let g = &u.grid;
    let d1 = g.derivative(&u.re, u.parity, 1, 7);
    let d2 = g.derivative(&u.re, u.parity, 2, 7);
    let re = (0..g.n).map(|i| d2[i] + 3.0 * d1[i] / g.r[i]).collect();
    u.with_values(re, u.parity)
}

/// Weighted-symmetric discretization of `-Delta` on the harmonic sector `ell`:
/// `-f'' - (3/r) f' + ell(ell+2) f / r^2`, written as `M^{-1} K`.
///
/// With `f = r^ell g` the sector operator is the radial Laplacian in dimension
/// `4 + 2 ell` acting on the even function `g`; that form is discretized as a
/// staggered sixth-order flux `G^T W G` and conjugated back.
#[derive(Debug, Clone)]
pub struct RadialLaplacian {
    pub ell: usize,
    pub stiffness: Band,
    pub mass: Vec<f64>,
}

const CONSISTENT_ROWS: usize = 8;
const BW: usize = 5;

impl RadialLaplacian {
    pub fn new(grid: &RadialGrid, ell: usize) -> Self {
        let n = grid.n;
        let h = grid.h;
        let p = 2 * ell as i32 + 3;
        let dim = (2 * ell + 4) as f64;
        let mut kg = Band::zeros(n, BW, BW);
        // sixth-order staggered gradient at faces m = 1..=n (r = m h) from
        // nodes m-3 .. m+2, even ghosts
        let c = [-3.0 / 640.0, 25.0 / 384.0, -75.0 / 64.0, 75.0 / 64.0, -25.0 / 384.0, 3.0 / 640.0];
        for m in 1..=n {
            let wf = h * (m as f64 * h).powi(p);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(6);
            for (q, &cq) in c.iter().enumerate() {
                let j = m as isize - 3 + q as isize;
                if j >= n as isize {
                    continue;
                }
                let node = if j < 0 { (-j - 1) as usize } else { j as usize };
                push_merge(&mut row, node, cq / h);
            }
            for &(a, ga) in &row {
                for &(b, gb) in &row {
                    kg.add(a, b, wf * ga * gb);
                }
            }
        }
        let mut mg: Vec<f64> = grid.r.iter().map(|r| h * r.powi(p)).collect();
        // first rows: choose the mass so that r^2 is reproduced exactly
        let q: Vec<f64> = grid.r.iter().map(|r| r * r).collect();
        let kq = kg.matvec(&q);
        for i in 0..CONSISTENT_ROWS.min(n) {
            let m = -kq[i] / (2.0 * dim);
            if m > 0.0 {
                mg[i] = m;
            }
        }
        // back to f: K_f = R^{-1} K_g R^{-1}, M_f = R^{-2} M_g
        let rl: Vec<f64> = grid.r.iter().map(|r| r.powi(ell as i32)).collect();
        let mut k = Band::zeros(n, BW, BW);
        for i in 0..n {
            for j in i.saturating_sub(BW)..(i + BW + 1).min(n) {
                k.set(i, j, kg.get(i, j) / (rl[i] * rl[j]));
            }
        }
        let mass = (0..n).map(|i| mg[i] / (rl[i] * rl[i])).collect();
        RadialLaplacian { ell, stiffness: k, mass }
    }

    /// `-Delta_ell f`
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let kf = self.stiffness.matvec(f);
        (0..f.len()).map(|i| kf[i] / self.mass[i]).collect()
    }

    /// Band matrix of `K + M diag(shift + pot)`, symmetric.
    pub fn shifted_band(&self, shift: f64, pot: Option<&[f64]>) -> Band {
        let mut b = self.stiffness.clone();
        for i in 0..self.mass.len() {
            let p = pot.map_or(0.0, |v| v[i]);
            b.add(i, i, self.mass[i] * (shift + p));
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_integrates_gaussian_moments() {
        // int_0^inf r^{3+2p} e^{-r^2} dr = (p+1)!/2
        let g = make_grid(12.0, 600).unwrap();
        for p in 0..4 {
            let f: Vec<f64> = g.r.iter().map(|r| r.powi(2 * p) * (-r * r).exp()).collect();
            let exact: f64 = (1..=p + 1).map(|k| k as f64).product::<f64>() / 2.0;
            let v = g.integrate(&f);
            assert!((v / exact - 1.0).abs() < 1e-11, "p={p} rel={}", v / exact - 1.0);
        }
    }

    #[test]
    fn grid_quadrature_order_at_origin() {
        // odd integrand r^3 e^{-r}: error must fall at least like h^4
        let exact = 6.0;
        let err = |n: usize| {
            let g = make_grid(60.0, n).unwrap();
            let f: Vec<f64> = g.r.iter().map(|r| (-r).exp()).collect();
            (g.integrate(&f) - exact).abs()
        };
        let (e1, e2) = (err(600), err(1200));
        assert!(e1 / e2 > 12.0, "{e1} {e2}");
    }

    #[test]
    fn grid_bounds() {
        let g = make_grid(10.0, 1024).unwrap();
        assert!(g.r[0] >= 0.0 && g.r[g.n - 1] <= 10.0);
        assert!(g.r.windows(2).all(|w| w[1] > w[0]));
        assert!(g.w.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn grid_rejects_bad_args() {
        assert!(make_grid(0.0, 64).is_err());
        assert!(make_grid(-1.0, 64).is_err());
        assert!(make_grid(1.0, 8).is_err());
    }

    #[test]
    fn gaussian_inner_product() {
        let g = make_grid(12.0, 1024).unwrap();
        let u = RadialFn::from_fn(&g, Parity::Even, |r| (-r * r / 2.0).exp());
        let v = weighted_inner(&u, &u).unwrap();
        assert!((v.re - PI * PI).abs() < 1e-10);
        let z = RadialFn::zeros(&g, Parity::Even);
        assert_eq!(weighted_inner(&u, &z).unwrap().norm(), 0.0);
    }

    #[test]
    fn inner_rejects_mismatched_grids() {
        let a = RadialFn::zeros(&make_grid(10.0, 64).unwrap(), Parity::Even);
        let b = RadialFn::zeros(&make_grid(10.0, 128).unwrap(), Parity::Even);
        assert!(weighted_inner(&a, &b).is_err());
    }

    #[test]
    fn inner_is_conjugate_symmetric() {
        let g = make_grid(10.0, 256).unwrap();
        let u = RadialFn::new_complex(
            g.clone(),
            g.r.iter().map(|r| (-r).exp()).collect(),
            g.r.iter().map(|r| r * (-r * r).exp()).collect(),
            Parity::None,
        )
        .unwrap();
        let v = RadialFn::new_complex(
            g.clone(),
            g.r.iter().map(|r| (-r * r).exp()).collect(),
            g.r.iter().map(|r| (-2.0 * r).exp()).collect(),
            Parity::None,
        )
        .unwrap();
        let a = weighted_inner(&u, &v).unwrap();
        let b = weighted_inner(&v, &u).unwrap();
        assert!((a - b.conj()).norm() < 1e-14);
    }

    #[test]
    fn potential_far_field_of_unit_bump() {
        let g = make_grid(20.0, 2048).unwrap();
        let raw = RadialFn::from_fn(&g, Parity::Even, |r| (-4.0 * r * r).exp());
        let m = raw.norm2().sqrt();
        let mass_raw = OMEGA3 * g.integrate(&raw.re);
        let dens = raw.scale(1.0 / mass_raw);
        let _ = m;
        let p = radial_newton_potential(&dens).unwrap();
        assert!((p.mass - 1.0).abs() < 1e-10);
        for i in 0..g.n {
            let r = g.r[i];
            if r > 5.0 {
                assert!((p.phi.re[i] + 1.0 / (r * r)).abs() < 1e-6, "r={r}");
            }
        }
        assert!(p.phi.re.iter().all(|v| *v <= 0.0));
        assert!(!p.tail_warning);
    }

    #[test]
    fn potential_of_zero_is_zero() {
        let g = make_grid(10.0, 128).unwrap();
        let p = radial_newton_potential(&RadialFn::zeros(&g, Parity::Even)).unwrap();
        assert!(p.phi.re.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn potential_of_gaussian_matches_closed_form() {
        // -|x|^{-2} * e^{-|x|^2} = -pi^2 (1 - e^{-r^2}) / r^2
        let g = make_grid(15.0, 1500).unwrap();
        let dens = RadialFn::from_fn(&g, Parity::Even, |r| (-r * r).exp());
        let p = radial_newton_potential(&dens).unwrap();
        for i in 0..g.n {
            let r = g.r[i];
            let exact = -PI * PI * (1.0 - (-r * r).exp()) / (r * r);
            assert!((p.phi.re[i] - exact).abs() < 1e-9, "r={r} {} {}", p.phi.re[i], exact);
        }
    }

    #[test]
    fn sector_potential_radial_case_matches_newton_potential() {
        let g = make_grid(15.0, 600).unwrap();
        let dens = RadialFn::from_fn(&g, Parity::Even, |r| (-r * r).exp());
        let a = sector_potential(&dens, 0);
        let b = radial_newton_potential(&dens).unwrap().phi;
        for i in 0..g.n {
            assert!((a.re[i] - b.re[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn sector_potential_dipole_closed_form() {
        // g Y_1 with g = r e^{-r^2}: Delta(p) = 4 pi^2 g for the sector profile p;
        // check the far field -omega_3/2 * (int s^4 g ds) / r^3
        let g = make_grid(14.0, 1400).unwrap();
        let dens = RadialFn::from_fn(&g, Parity::Odd, |r| r * (-r * r).exp());
        let p = sector_potential(&dens, 1);
        // int_0^inf s^5 e^{-s^2} ds = 1
        for i in 0..g.n {
            let r = g.r[i];
            if r > 7.0 {
                let far = -OMEGA3 / 2.0 / r.powi(3);
                assert!((p.re[i] - far).abs() < 1e-9 * far.abs(), "r={r}");
            }
        }
        // sector Poisson equation, weighted norm over the interior
        let lap = RadialLaplacian::new(&g, 1);
        let lp = lap.apply(&p.re);
        let res: Vec<f64> = (0..g.n)
            .map(|i| if g.r[i] < 5.0 { lp[i] + POISSON * dens.re[i] } else { 0.0 })
            .collect();
        let rel = dens.with_values(res, Parity::Odd).norm() / dens.norm();
        assert!(rel < 1e-7, "{rel}");
    }

    #[test]
    fn untruncated_density_sets_warning() {
        let g = make_grid(5.0, 128).unwrap();
        let dens = RadialFn::from_fn(&g, Parity::Even, |r| (-r).exp());
        assert!(radial_newton_potential(&dens).unwrap().tail_warning);
    }

    #[test]
    fn lambda_of_r_squared_and_exponential() {
        let g = make_grid(10.0, 1024).unwrap();
        let u = RadialFn::from_fn(&g, Parity::Even, |r| r * r);
        let l = apply_lambda(&u, 1).unwrap();
        for i in 0..g.n {
            assert!((l.re[i] - 4.0 * g.r[i].powi(2)).abs() < 1e-8 * (1.0 + g.r[i].powi(2)));
        }
        let e = RadialFn::from_fn(&g, Parity::None, |r| (-r).exp());
        let l = apply_lambda(&e, 1).unwrap();
        for i in 0..g.n {
            let r = g.r[i];
            assert!((l.re[i] - (2.0 - r) * (-r).exp()).abs() < 1e-8);
        }
        assert!(apply_lambda(&e, 0).is_err());
        assert!(apply_lambda(&e, 4).is_err());
    }

    #[test]
    fn lambda_adjoint_relation() {
        let g = make_grid(14.0, 1400).unwrap();
        let u = RadialFn::from_fn(&g, Parity::Even, |r| (-r * r).exp());
        let v = RadialFn::from_fn(&g, Parity::Even, |r| (1.0 + r * r) * (-0.5 * r * r).exp());
        let lu = apply_lambda(&u, 1).unwrap();
        let lv = apply_lambda(&v, 1).unwrap();
        // Lambda is antisymmetric in L^2(R^4)
        let lhs = inner(&lu, &v) + inner(&u, &lv);
        assert!(lhs.abs() < 1e-9, "{lhs}");
    }

    #[test]
    fn laplacian_consistency() {
        let g = make_grid(12.0, 1200).unwrap();
        for ell in 0..5usize {
            let lap = RadialLaplacian::new(&g, ell);
            let l = ell as i32;
            let par = Parity::of_power(l);
            // f = r^ell e^{-r^2}: -Delta_ell f = (4(ell+2) - 4 r^2) f
            let f = RadialFn::from_fn(&g, par, |r| r.powi(l) * (-r * r).exp());
            let af = lap.apply(&f.re);
            let err: Vec<f64> = (0..g.n)
                .map(|i| {
                    let r = g.r[i];
                    af[i] - (4.0 * (ell as f64 + 2.0) - 4.0 * r * r) * f.re[i]
                })
                .collect();
            
            let e = f.with_values(err, par).norm() / f.norm();            assert!(e < 1e-7, "ell={ell} err={e}");
        }
    }

    #[test]
    fn laplacian_is_symmetric() {
        let g = make_grid(8.0, 64).unwrap();
        let lap = RadialLaplacian::new(&g, 1);
        for i in 0..g.n {
            for j in 0..g.n {
                let (a, b) = (lap.stiffness.get(i, j), lap.stiffness.get(j, i));
                assert!((a - b).abs() <= 1e-14 * a.abs().max(b.abs()));
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = make_grid(5.0, 32).unwrap();
        let u = RadialFn::from_fn(&g, Parity::Even, |r| (-r).exp());
        let v = RadialFn::from_csv(&u.to_csv()).unwrap();
        assert_eq!(u.re, v.re);
        assert_eq!(v.parity, Parity::Even);
    }
}

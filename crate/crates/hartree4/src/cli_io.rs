//! Run configuration, subcommand orchestration and JSON manifests.
//!
//! A run reads one TOML file (every key optional), applies `key.path=value`
//! overrides, validates the result and only then creates the output
//! directory. Every run writes `manifest.json` with the full configuration,
//! the tolerances used, the individual checks and the data files produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::approx_soliton::{
    assemble_r, build_corrections, lambda_identities, psi_order_fit, symmetric_pair, PsiOptions,
};
use crate::error::{invalid, Error, Result};
use crate::evolver::{pseudo_conformal, sample_radial, Kernel, Schedule, SpectralSolver};
use crate::field4::{Field4, Grid4};
use crate::ground_state::{
    energy_report, interp_profile, shooting_oracle, solve_ground_state, verify_root_identities, GroundStateBundle,
    GroundStateOptions,
};
use crate::linearized_ops::{assemble_sector, gamma_coeff, lowest_eigenvalue, Sign};
use crate::mbody::{
    central_config, classify_orbit, hyperbolic_scatter, integrate, BodyState, ParabolicOrbit,
};
use crate::modulation::{
    deviation_fits, mod_residual, solve_mod_traj_hyperbolic, solve_mod_traj_parabolic, DecayFit, ForceLaw, ModModel,
    Regime, TrajOptions,
};
use crate::multipole::truncation_order_fit;
use crate::radial_core::make_grid;
use crate::vec4::{self, Vec4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GroundState,
    LinopsVerify,
    MultipoleFit,
    Mbody,
    ModTraj,
    BuildApprox,
    ResidualOrder,
    Evolve,
    PcTransform,
    VerifyAll,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GroundState => "ground-state",
            Command::LinopsVerify => "linops-verify",
            Command::MultipoleFit => "multipole-fit",
            Command::Mbody => "mbody",
            Command::ModTraj => "mod-traj",
            Command::BuildApprox => "build-approx",
            Command::ResidualOrder => "residual-order",
            Command::Evolve => "evolve",
            Command::PcTransform => "pc-transform",
            Command::VerifyAll => "verify-all",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadialCfg {
    pub r_max: f64,
    pub n: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RadialCfg {
    fn default() -> Self {
        RadialCfg { r_max: 20.0, n: 2048, tol: 1e-10, max_iter: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Truncated,
    Periodic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCfg {
    pub n: usize,
    /// full box length
    pub length: f64,
    pub kernel: KernelChoice,
}

impl Default for GridCfg {
    fn default() -> Self {
        GridCfg { n: 48, length: 24.0, kernel: KernelChoice::Truncated }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultipoleCfg {
    pub orders: Vec<usize>,
    pub separations: Vec<f64>,
}

impl Default for MultipoleCfg {
    fn default() -> Self {
        MultipoleCfg { orders: vec![0, 1, 2], separations: vec![8.0, 12.0, 16.0, 24.0, 32.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MbodyMode {
    Integrate,
    Scatter,
    CentralConfig,
    Parabolic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbodyCfg {
    pub mode: MbodyMode,
    pub m: usize,
    pub eta: f64,
    /// positions (integrate: at t = 1; scatter: asymptotic offsets)
    pub x: Vec<Vec4>,
    /// velocities `alpha'` (integrate: at t = 1; scatter: asymptotic)
    pub v: Vec<Vec4>,
    pub t0: f64,
    pub t_end: f64,
    pub samples: usize,
    pub tol: f64,
    /// coupling; defaults to `||Q||^2` from the ground state
    pub kappa: Option<f64>,
}

impl Default for MbodyCfg {
    fn default() -> Self {
        MbodyCfg {
            mode: MbodyMode::Parabolic,
            m: 2,
            eta: 0.0,
            x: vec![[1.0, 0.5, 0.0, 0.0], [-1.0, -0.5, 0.0, 0.0]],
            v: vec![[1.0, 0.2, 0.0, 0.0], [-1.0, -0.2, 0.0, 0.0]],
            t0: 20.0,
            t_end: 1000.0,
            samples: 1001,
            tol: 1e-12,
            kappa: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModCfg {
    pub regime: Regime,
    pub order: usize,
    pub law: ForceLaw,
    pub t0: f64,
    /// one per soliton; empty means all ones
    pub lambda_inf: Vec<f64>,
    pub x: Vec<Vec4>,
    pub v: Vec<Vec4>,
    pub m: usize,
    pub eta: f64,
    pub nodes: usize,
    pub span: f64,
    pub samples: usize,
}

impl Default for ModCfg {
    fn default() -> Self {
        let t = TrajOptions::default();
        ModCfg {
            regime: Regime::Hyperbolic,
            order: 2,
            law: ForceLaw::Printed,
            t0: 20.0,
            lambda_inf: vec![1.0, 1.3],
            x: vec![[1.0, 0.5, 0.0, 0.0], [-1.0, -0.5, 0.0, 0.0]],
            v: vec![[1.0, 0.2, 0.0, 0.0], [-1.0, -0.2, 0.0, 0.0]],
            m: 2,
            eta: 0.0,
            nodes: t.nodes,
            span: t.span,
            samples: t.samples,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualCfg {
    pub orders: Vec<usize>,
    pub separations: Vec<f64>,
    /// velocity of the first soliton; the second moves with `-beta`
    pub beta: Vec4,
    pub law: ForceLaw,
    pub n: usize,
    pub half_width: f64,
    pub mod_tol: f64,
}

impl Default for ResidualCfg {
    fn default() -> Self {
        let o = PsiOptions::default();
        ResidualCfg {
            orders: vec![1, 2],
            separations: vec![8.0, 12.0, 16.0, 24.0],
            beta: [0.3, 0.2, 0.0, 0.0],
            law: ForceLaw::Consistent,
            n: o.n,
            half_width: o.half_width,
            mod_tol: o.mod_tol,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxCfg {
    pub order: usize,
    pub separation: f64,
    pub beta: Vec4,
}

impl Default for ApproxCfg {
    fn default() -> Self {
        ApproxCfg { order: 1, separation: 8.0, beta: [0.3, 0.2, 0.0, 0.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// `Q`, the stationary soliton
    Soliton,
    /// `amplitude e^{-|x|^2/2}`
    Gaussian,
    /// approximate two-soliton from `[approx]`
    Pair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveCfg {
    pub init: Init,
    pub amplitude: f64,
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub checkpoints: bool,
    pub track_radius: f64,
}

impl Default for EvolveCfg {
    fn default() -> Self {
        EvolveCfg { init: Init::Soliton, amplitude: 1.0, dt: 1e-3, steps: 100, stride: 10, checkpoints: false, track_radius: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcCfg {
    /// directory and stem of a saved field; unset means `e^{is} Q` sampled
    pub input_dir: Option<PathBuf>,
    pub input_stem: String,
    /// time `s` of the input field (a saved header time takes precedence)
    pub time: f64,
}

impl Default for PcCfg {
    fn default() -> Self {
        PcCfg { input_dir: None, input_stem: "final".into(), time: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// seed for the central-configuration restarts
    pub seed: u64,
    pub mem_cap_gb: Option<f64>,
    pub threads: Option<usize>,
    pub radial: RadialCfg,
    pub grid: GridCfg,
    pub multipole: MultipoleCfg,
    pub mbody: MbodyCfg,
    pub modulation: ModCfg,
    pub residual: ResidualCfg,
    pub approx: ApproxCfg,
    pub evolve: EvolveCfg,
    pub pc: PcCfg,
}

fn usage<T>(path: &str, msg: &str) -> Result<T> {
    invalid(format!("{path}: {msg}"))
}

impl RunConfig {
    /// Structural checks with the offending key path in the message.
    pub fn validate(&self) -> Result<()> {
        let pos = |path: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { usage(path, "must be positive") };
        pos("radial.r_max", self.radial.r_max)?;
        pos("radial.tol", self.radial.tol)?;
        if self.radial.n < 64 {
            return usage("radial.n", "must be at least 64");
        }
        if self.grid.n < 4 || self.grid.n % 2 != 0 {
            return usage("grid.n", "must be even and at least 4");
        }
        pos("grid.length", self.grid.length)?;
        if let Some(c) = self.mem_cap_gb {
            pos("mem_cap_gb", c)?;
        }
        if self.multipole.separations.len() < 4 {
            return usage("multipole.separations", "needs at least four values");
        }
        if self.mbody.x.len() != self.mbody.v.len() {
            return usage("mbody.v", "needs one velocity per position");
        }
        if self.mbody.m < 2 {
            return usage("mbody.m", "must be at least 2");
        }
        pos("mbody.t0", self.mbody.t0)?;
        if !(self.mbody.t_end >= 10.0) {
            return usage("mbody.t_end", "must be at least 10");
        }
        if self.mbody.samples < 2 {
            return usage("mbody.samples", "must be at least 2");
        }
        if !(self.mbody.eta >= 0.0) {
            return usage("mbody.eta", "must be non-negative");
        }
        if let Some(k) = self.mbody.kappa {
            pos("mbody.kappa", k)?;
        }
        if self.modulation.x.len() != self.modulation.v.len() {
            return usage("modulation.v", "needs one velocity per position");
        }
        pos("modulation.t0", self.modulation.t0)?;
        if self.residual.separations.len() < 2 {
            return usage("residual.separations", "needs at least two values");
        }
        pos("approx.separation", self.approx.separation)?;
        pos("evolve.dt", self.evolve.dt.abs())?;
        if self.evolve.stride == 0 {
            return usage("evolve.stride", "must be positive");
        }
        if self.pc.time == 0.0 || !self.pc.time.is_finite() {
            return usage("pc.time", "must be finite and nonzero");
        }
        Ok(())
    }

    pub fn mem_cap_bytes(&self) -> Option<usize> {
        self.mem_cap_gb.map(|g| (g * 1e9) as usize)
    }
}

/// Insert `value` at the dotted `path` of `table`.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::InvalidArgument(format!("bad key `{path}`")))?;
    let mut t = table;
    for k in keys {
        let entry = t.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = match entry {
            toml::Value::Table(inner) => inner,
            _ => return usage(path, "is not a table"),
        };
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parse `key.path=value`; the value is read as TOML and falls back to a string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("override `{s}` is not key=value")))?;
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Read the config (or the defaults), apply overrides and validate.
pub fn load_config(text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match text {
        Some(t) => toml::from_str(t).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut table, &k, v)?;
    }
    let cfg: RunConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::InvalidArgument(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    /// `|value| < tol`
    pub fn below(name: &str, value: f64, tol: f64) -> Check {
        Check { name: name.into(), value, tol, pass: value.abs() < tol }
    }

    /// `|value - want| <= tol`
    pub fn near(name: &str, value: f64, want: f64, tol: f64) -> Check {
        Check { name: name.into(), value, tol, pass: (value - want).abs() <= tol }
    }

    pub fn flag(name: &str, ok: bool) -> Check {
        Check { name: name.into(), value: if ok { 1.0 } else { 0.0 }, tol: 0.0, pass: ok }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub config: RunConfig,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub results: Value,
    pub files: Vec<String>,
    /// seconds since the Unix epoch; the only field that differs between reruns
    pub timestamp: u64,
}

/// What one stage hands back to the manifest writer.
#[derive(Default)]
struct Stage {
    checks: Vec<Check>,
    results: BTreeMap<String, Value>,
    files: Vec<String>,
}

impl Stage {
    fn put(&mut self, key: &str, v: impl Serialize) -> Result<()> {
        self.results.insert(key.into(), serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))?);
        Ok(())
    }

    fn write(&mut self, out: &Path, name: &str, text: &str) -> Result<()> {
        fs::write(out.join(name), text)?;
        self.files.push(name.into());
        Ok(())
    }

    fn absorb(&mut self, prefix: &str, other: Stage) {
        self.checks.extend(other.checks.into_iter().map(|c| Check { name: format!("{prefix}: {}", c.name), ..c }));
        self.results.insert(prefix.into(), Value::Object(other.results.into_iter().collect()));
        self.files.extend(other.files.into_iter().map(|f| format!("{prefix}/{f}")));
    }
}

/// Process exit code for an error: 2 usage, 3 convergence, 4 domain or resource.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::UnsupportedOrder { .. } | Error::Format(_) => 2,
        Error::Convergence { .. } | Error::Solver(_) | Error::NearSingularRhs { .. } | Error::Fit(_) => 3,
        Error::Domain(_)
        | Error::Resource(_)
        | Error::Collision { .. }
        | Error::BlowUp { .. }
        | Error::Precondition(_)
        | Error::Io(_) => 4,
    }
}

fn ground_state(cfg: &RunConfig) -> Result<GroundStateBundle> {
    let grid = make_grid(cfg.radial.r_max, cfg.radial.n)?;
    solve_ground_state(&grid, &GroundStateOptions { tol: cfg.radial.tol, max_iter: cfg.radial.max_iter })
}

fn stage_ground_state(cfg: &RunConfig, b: &GroundStateBundle, out: &Path) -> Result<Stage> {
    let mut st = Stage::default();
    b.save(&out.join("bundle"))?;
    st.files.push("bundle/".into());
    let shoot = shooting_oracle()?;
    st.checks.push(Check::below("equation residual / ||Q||", b.residual, 1e-8));
    st.checks.push(Check::below("shooting mass, relative", shoot.mass / b.mass_q - 1.0, 1e-5));
    st.put("mass", b.mass_q)?;
    st.put("xq_norm2", b.xq_norm2)?;
    st.put("iterations", b.iterations)?;
    st.put("shooting", &shoot)?;
    st.put("energy", energy_report(b))?;
    st.put("grid", json!({"r_max": cfg.radial.r_max, "n": cfg.radial.n}))?;
    Ok(st)
}

fn stage_linops(b: &GroundStateBundle) -> Result<Stage> {
    let mut st = Stage::default();
    let root = verify_root_identities(b)?;
    for c in &root.checks {
        st.checks.push(Check::below(&c.name, c.residual, c.tol));
    }
    let g0 = gamma_coeff(0, 0.5)?;
    st.checks.push(Check::near("Gamma_0(1/2) = ln 3", g0, 3f64.ln(), 1e-8));
    let ts: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut ordered = true;
    for &t in &ts {
        let vals = (0..=11).map(|l| gamma_coeff(l, t)).collect::<Result<Vec<_>>>()?;
        ordered &= vals.windows(2).all(|w| w[0] > w[1] && w[1] > 0.0);
    }
    st.checks.push(Check::flag("Gamma_l(t) > Gamma_(l+1)(t) > 0 for l <= 10", ordered));
    let lp1 = assemble_sector(b, 1, Sign::Plus)?;
    let lm0 = assemble_sector(b, 0, Sign::Minus)?;
    let e1 = lowest_eigenvalue(&lp1, &[b.q.derivative()])?;
    let e0 = lowest_eigenvalue(&lm0, &[b.q.clone()])?;
    st.checks.push(Check { name: "L+ (ell = 1) on Q'-perp, lowest > 0".into(), value: e1.lowest, tol: 0.0, pass: e1.lowest > 0.0 });
    st.checks.push(Check { name: "L- (ell = 0) on Q-perp, lowest > 0".into(), value: e0.lowest, tol: 0.0, pass: e0.lowest > 0.0 });
    let li = lambda_identities(b)?;
    st.checks.push(Check::below("second-order Lambda identity", li.second, 1e-4));
    st.checks.push(Check::below("fifth-order Lambda identity", li.fifth, 1e-4));
    st.put("lambda_identities", &li)?;
    st.put("eigen_l1_plus", &e1)?;
    st.put("eigen_l0_minus", &e0)?;
    Ok(st)
}

fn stage_multipole(cfg: &RunConfig, b: &GroundStateBundle, out: &Path) -> Result<Stage> {
    let mut st = Stage::default();
    let dens = b.q.mul(&b.q);
    let mut csv = String::from("order,a,error\n");
    let mut fits = Vec::new();
    for &n in &cfg.multipole.orders {
        let fit = truncation_order_fit(n, &dens, &cfg.multipole.separations)?;
        for (a, e) in fit.separations.iter().zip(&fit.errors) {
            csv.push_str(&format!("{n},{a},{e:.12e}\n"));
        }
        st.checks.push(Check::near(&format!("N = {n} slope"), fit.slope, -(n as f64 + 2.0), 0.3));
        fits.push(fit);
    }
    st.write(out, "multipole.csv", &csv)?;
    st.put("fits", fits)?;
    Ok(st)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn stage_mbody(cfg: &RunConfig, kappa: f64, mode: MbodyMode, out: &Path) -> Result<Stage> {
    let c = &cfg.mbody;
    let kappa = c.kappa.unwrap_or(kappa);
    let mut st = Stage::default();
    st.put("mode", mode)?;
    st.put("kappa", kappa)?;
    match mode {
        MbodyMode::Integrate => {
            let beta = c.v.iter().map(|v| vec4::scale(0.5, v)).collect();
            let s = BodyState::new(c.x.clone(), beta, kappa)?;
            let path = integrate(&s, &linspace(1.0, 1.0 + c.t_end, c.samples), c.tol)?;
            st.checks.push(Check::below("energy drift, relative", path.energy_drift(), 1e-9));
            st.put("orbit", classify_orbit(&path)?)?;
            st.write(out, "path.csv", &path.to_csv())?;
        }
        MbodyMode::Scatter => {
            let sc = hyperbolic_scatter(&c.x, &c.v, c.t0, kappa)?;
            st.checks.push(Check::below("scattering fixed point change", sc.residual, 1e-6));
            let path = sc.path(&linspace(sc.t0, 10.0 * sc.t0, c.samples))?;
            st.write(out, "path.csv", &path.to_csv())?;
            st.put("scatter", &sc)?;
        }
        MbodyMode::CentralConfig => {
            let cc = central_config(c.m, kappa, cfg.seed)?;
            st.checks.push(Check::below("Lagrange residual", cc.residual, 1e-8));
            st.checks.push(Check::below("c / 2U - 1 (forces against potential)", cc.c / (2.0 * cc.u) - 1.0, 1e-8));
            st.put("central_config", &cc)?;
        }
        MbodyMode::Parabolic => {
            let cc = central_config(c.m, kappa, cfg.seed)?;
            let orbit = ParabolicOrbit::new(&cc.b, c.eta, kappa)?;
            let times = linspace(1.0, c.t_end, c.samples);
            let worst = times.iter().map(|&t| orbit.ode_residual(t)).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
            st.checks.push(Check::below("closed-form ODE residual", worst, 1e-8));
            st.write(out, "path.csv", &orbit.path(&times)?.to_csv())?;
            st.put("central_config", &cc)?;
        }
    }
    Ok(st)
}

fn fit_value(f: &DecayFit) -> f64 {
    match *f {
        DecayFit::Exponent(p) => p,
        DecayFit::Vanishing(_) => f64::NEG_INFINITY,
    }
}

fn stage_mod_traj(cfg: &RunConfig, kappa: f64, regime: Regime, out: &Path) -> Result<Stage> {
    let c = &cfg.modulation;
    let mut st = Stage::default();
    let order = c.order.min(regime.max_order());
    let model = ModModel::new(regime, order, kappa, c.law)?;
    let opts = TrajOptions { nodes: c.nodes, span: c.span, samples: c.samples, ..TrajOptions::default() };
    let path = match regime {
        Regime::Hyperbolic => {
            let sc = hyperbolic_scatter(&c.x, &c.v, c.t0, model.body_kappa())?;
            let lam = if c.lambda_inf.is_empty() { vec![1.0; c.x.len()] } else { c.lambda_inf.clone() };
            solve_mod_traj_hyperbolic(&sc, &lam, &model, c.t0, &opts)?
        }
        Regime::Parabolic => {
            let cc = central_config(c.m, model.body_kappa(), cfg.seed)?;
            let orbit = ParabolicOrbit::new(&cc.b, c.eta, model.body_kappa())?;
            let l = c.lambda_inf.first().copied().unwrap_or(1.0);
            solve_mod_traj_parabolic(&orbit, &vec![l; c.m], &model, c.t0, &opts)?
        }
    };
    let res = mod_residual(&path, &model)?;
    let worst = res.values.iter().fold(0.0, |a: f64, b| a.max(*b));
    st.checks.push(Check::below("Mod(t) along the path", worst, 1e-6));
    let fits = deviation_fits(&path)?;
    if regime == Regime::Hyperbolic {
        for (name, f, budget) in [
            ("lambda", &fits.lambda, -1.5),
            ("beta", &fits.beta, -1.5),
            ("mu", &fits.mu, -2.5),
            ("delta", &fits.delta, -3.5),
        ] {
            st.checks.push(Check { name: format!("{name} deviation exponent <= {budget}"), value: fit_value(f), tol: budget, pass: f.within(budget) });
        }
    }
    st.put("model", model)?;
    st.put("fits", &fits)?;
    st.put("t0", path.t0)?;
    st.put("fixed_point_change", path.fixed_point_change)?;
    st.put("coarse_grid_warning", res.coarse_grid_warning)?;
    st.write(out, "path.csv", &path.to_csv())?;
    Ok(st)
}

fn grid4(cfg: &RunConfig) -> Result<Grid4> {
    Grid4::new(cfg.grid.n, cfg.grid.length)
}

fn solver(cfg: &RunConfig, grid: Grid4) -> Result<SpectralSolver> {
    let kernel = match cfg.grid.kernel {
        KernelChoice::Truncated => Kernel::default_for(&grid),
        KernelChoice::Periodic => Kernel::Periodic,
    };
    SpectralSolver::new(grid, kernel, cfg.mem_cap_bytes())
}

fn approx_pair(cfg: &RunConfig, b: &GroundStateBundle, grid: &Grid4) -> Result<(Field4, Vec<String>, Vec<Vec4>)> {
    let a = &cfg.approx;
    let p = symmetric_pair(a.separation, a.beta);
    let profiles = build_corrections(b, &p, a.order, Regime::Hyperbolic)?;
    let field = assemble_r(&profiles, &p, grid)?;
    Ok((field, profiles.omissions, p.alpha))
}

fn stage_build_approx(cfg: &RunConfig, b: &GroundStateBundle, out: &Path) -> Result<Stage> {
    let mut st = Stage::default();
    let grid = grid4(cfg)?;
    let (field, omissions, centers) = approx_pair(cfg, b, &grid)?;
    field.save(out, "approx", 0.0, json!({"approx": cfg.approx, "centers": centers}))?;
    st.files.extend(["approx.bin".to_string(), "approx.json".to_string()]);
    st.put("mass", field.norm2())?;
    st.put("mass_over_two_kappa", field.norm2() / (2.0 * b.mass_q))?;
    st.put("omissions", omissions)?;
    Ok(st)
}

fn stage_residual_order(cfg: &RunConfig, b: &GroundStateBundle, out: &Path) -> Result<Stage> {
    let c = &cfg.residual;
    let mut st = Stage::default();
    let opts = PsiOptions { n: c.n, half_width: c.half_width, mod_tol: c.mod_tol, ..PsiOptions::default() };
    let mut csv = String::from("order,a,sup,overlap\n");
    let mut fits = Vec::new();
    for &n in &c.orders {
        let model = ModModel::new(Regime::Hyperbolic, n, b.mass_q, c.law)?;
        let fit = psi_order_fit(b, &model, &c.separations, c.beta, &opts)?;
        for ((a, s), o) in fit.separations.iter().zip(&fit.sup).zip(&fit.overlap) {
            csv.push_str(&format!("{n},{a},{s:.12e},{o:.6e}\n"));
        }
        st.checks.push(Check::near(&format!("N = {n} slope"), fit.slope, -(n as f64 + 2.0), 0.3));
        fits.push(fit);
    }
    st.write(out, "residual.csv", &csv)?;
    st.put("fits", fits)?;
    Ok(st)
}

fn stage_evolve(cfg: &RunConfig, b: &GroundStateBundle, out: &Path) -> Result<Stage> {
    let e = &cfg.evolve;
    let mut st = Stage::default();
    let grid = grid4(cfg)?;
    let mut sol = solver(cfg, grid)?;
    let (init, track) = match e.init {
        Init::Soliton => (sample_radial(grid, &b.q, &[0.0; 4]), vec![[0.0; 4]]),
        Init::Gaussian => (
            Field4::from_fn(grid, |x| Complex64::new(e.amplitude * (-0.5 * vec4::norm2(x)).exp(), 0.0)),
            vec![[0.0; 4]],
        ),
        Init::Pair => {
            let (f, _, centers) = approx_pair(cfg, b, &grid)?;
            (f, centers)
        }
    };
    let mut sched = Schedule::new(e.dt, e.steps, e.stride);
    sched.track = track;
    sched.track_radius = e.track_radius;
    if e.checkpoints {
        sched.checkpoint_dir = Some(out.join("checkpoints"));
        st.files.push("checkpoints/".into());
    }
    let hist = sol.evolve(init.clone(), 0.0, &sched)?;
    st.checks.push(Check::below("mass drift, relative", hist.mass_drift(), 1e-10));
    st.put("energy_drift", hist.energy_drift())?;
    st.put("blow_up", hist.blow_up)?;
    st.put("warnings", &hist.warnings)?;
    st.put("kernel", sol.kernel)?;
    if let Some(f) = &hist.final_field {
        if e.init == Init::Soliton {
            let ex = Field4 { grid, data: init.data.iter().map(|z| z * Complex64::from_polar(1.0, hist.final_time)).collect() };
            st.put("stationarity", f.distance(&ex)? / init.norm2().sqrt())?;
        }
        f.save(out, "final", hist.final_time, json!({"dt": e.dt, "steps": e.steps}))?;
        st.files.extend(["final.bin".to_string(), "final.json".to_string()]);
    }
    st.write(out, "timeseries.csv", &hist.to_csv())?;
    Ok(st)
}

fn stage_pc(cfg: &RunConfig, b: &GroundStateBundle, out: &Path) -> Result<Stage> {
    let c = &cfg.pc;
    let mut st = Stage::default();
    let (field, s, analytic) = match &c.input_dir {
        Some(dir) => {
            let (f, h) = Field4::load(dir, &c.input_stem)?;
            (f, h.time, false)
        }
        None => {
            let grid = grid4(cfg)?;
            let q = sample_radial(grid, &b.q, &[0.0; 4]);
            let f = Field4 { grid, data: q.data.iter().map(|z| z * Complex64::from_polar(1.0, c.time)).collect() };
            (f, c.time, true)
        }
    };
    let (w, t) = pseudo_conformal(&field, s)?;
    st.checks.push(Check::below("mass change, relative", w.norm2() / field.norm2() - 1.0, 1e-12));
    if analytic {
        // S(t, x) = t^-2 Q(x/t) e^{i(-1/t + |x|^2/(4t))}
        let mut worst: f64 = 0.0;
        for (idx, z) in w.data.iter().enumerate() {
            let x = w.grid.point(idx);
            let sx = Complex64::from_polar(interp_profile(&b.q, vec4::norm(&x) / t) / (t * t), -1.0 / t + vec4::norm2(&x) / (4.0 * t));
            worst = worst.max((z - sx).norm());
        }
        st.checks.push(Check::below("pointwise gap to S(t)", worst, 1e-6));
    }
    w.save(out, "pc", t, json!({"source_time": s}))?;
    st.files.extend(["pc.bin".to_string(), "pc.json".to_string()]);
    st.put("time", t)?;
    st.put("length", w.grid.length)?;
    Ok(st)
}

/// Run a subcommand: `mbody_mode` selects the m-body stage (default from config).
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if cmd == Command::Evolve {
        let need = SpectralSolver::memory_estimate(&grid4(cfg)?);
        if let Some(cap) = cfg.mem_cap_bytes().filter(|&c| need > c) {
            return Err(Error::Resource(format!("grid needs {need} bytes, cap is {cap}")));
        }
    }
    fs::create_dir_all(out)?;
    let needs_q = !matches!(cmd, Command::Mbody | Command::ModTraj) || cfg.mbody.kappa.is_none();
    let b = if needs_q { Some(ground_state(cfg)?) } else { None };
    let kappa = cfg.mbody.kappa.or(b.as_ref().map(|b| b.mass_q)).unwrap_or(0.0);
    let bq = || b.as_ref().expect("ground state");
    let st = match cmd {
        Command::GroundState => stage_ground_state(cfg, bq(), out)?,
        Command::LinopsVerify => stage_linops(bq())?,
        Command::MultipoleFit => stage_multipole(cfg, bq(), out)?,
        Command::Mbody => stage_mbody(cfg, kappa, cfg.mbody.mode, out)?,
        Command::ModTraj => stage_mod_traj(cfg, kappa, cfg.modulation.regime, out)?,
        Command::BuildApprox => stage_build_approx(cfg, bq(), out)?,
        Command::ResidualOrder => stage_residual_order(cfg, bq(), out)?,
        Command::Evolve => stage_evolve(cfg, bq(), out)?,
        Command::PcTransform => stage_pc(cfg, bq(), out)?,
        Command::VerifyAll => {
            let b = bq();
            let mut all = Stage::default();
            let sub = |name: &str| -> Result<PathBuf> {
                let d = out.join(name);
                fs::create_dir_all(&d)?;
                Ok(d)
            };
            all.absorb("ground-state", stage_ground_state(cfg, b, &sub("ground-state")?)?);
            all.absorb("linops-verify", stage_linops(b)?);
            all.absorb("multipole-fit", stage_multipole(cfg, b, &sub("multipole-fit")?)?);
            for mode in [MbodyMode::Integrate, MbodyMode::Scatter, MbodyMode::CentralConfig, MbodyMode::Parabolic] {
                let name = format!("mbody-{}", serde_json::to_value(mode).unwrap_or_default().as_str().unwrap_or("mode"));
                let mut c = cfg.clone();
                if mode == MbodyMode::Integrate {
                    // unbound pair with zero total momentum
                    c.mbody.x = vec![[4.0, 0.0, 0.0, 0.0], [-4.0, 0.0, 0.0, 0.0]];
                    c.mbody.v = vec![[0.8, 0.3, 0.0, 0.0], [-0.8, -0.3, 0.0, 0.0]];
                }
                all.absorb(&name, stage_mbody(&c, kappa, mode, &sub(&name)?)?);
            }
            for regime in [Regime::Hyperbolic, Regime::Parabolic] {
                let name = format!("mod-traj-{}", serde_json::to_value(regime).unwrap_or_default().as_str().unwrap_or("regime"));
                all.absorb(&name, stage_mod_traj(cfg, kappa, regime, &sub(&name)?)?);
            }
            all
        }
    };
    let pass = st.checks.iter().all(|c| c.pass);
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let man = Manifest {
        subcommand: cmd.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        checks: st.checks,
        pass,
        results: Value::Object(st.results.into_iter().collect()),
        files: st.files,
        timestamp,
    };
    let text = serde_json::to_string_pretty(&man).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("manifest.json"), text)?;
    Ok(man)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg.radial.n, 2048);
        assert_eq!(cfg.grid.n, 48);
        let text = toml::to_string(&cfg).unwrap();
        let again = load_config(Some(&text), &[]).unwrap();
        assert_eq!(serde_json::to_value(&cfg).unwrap(), serde_json::to_value(&again).unwrap());
    }

    #[test]
    fn overrides_and_paths() {
        let cfg = load_config(
            Some("[mbody]\nm = 3\n"),
            &["mbody.eta=0.5".into(), "modulation.regime=parabolic".into(), "radial.n=512".into()],
        )
        .unwrap();
        assert_eq!(cfg.mbody.m, 3);
        assert_eq!(cfg.mbody.eta, 0.5);
        assert_eq!(cfg.modulation.regime, Regime::Parabolic);
        assert_eq!(cfg.radial.n, 512);
        let err = load_config(Some("[radial]\nr_max = -1.0\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("radial.r_max"));
        assert_eq!(exit_code(&err), 2);
        let err = load_config(None, &["radial.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(load_config(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn malformed_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = RunConfig::default();
        cfg.radial.r_max = -1.0;
        assert!(run(Command::GroundState, &cfg, &out).is_err());
        assert!(!out.exists());
        let cfg = load_config(None, &["mem_cap_gb=1e-6".into()]).unwrap();
        let err = run(Command::Evolve, &cfg, &out).unwrap_err();
        assert_eq!(exit_code(&err), 4);
        assert!(!out.exists());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Domain("x".into())), 4);
        assert_eq!(exit_code(&Error::Resource("x".into())), 4);
        assert_eq!(exit_code(&Error::Fit("x".into())), 3);
        assert_eq!(exit_code(&Error::Convergence { what: "x".into(), iterations: 1, residual: 1.0, history: vec![] }), 3);
    }

    #[test]
    fn mbody_parabolic_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(None, &["mbody.mode=parabolic".into(), "mbody.kappa=7.69".into()]).unwrap();
        let a = run(Command::Mbody, &cfg, &dir.path().join("a")).unwrap();
        let b = run(Command::Mbody, &cfg, &dir.path().join("b")).unwrap();
        assert!(a.pass, "{:?}", a.checks);
        assert_eq!(serde_json::to_value(&a.results).unwrap(), serde_json::to_value(&b.results).unwrap());
        let pa = fs::read(dir.path().join("a/path.csv")).unwrap();
        assert_eq!(pa, fs::read(dir.path().join("b/path.csv")).unwrap());
        assert!(dir.path().join("a/manifest.json").exists());
    }
}

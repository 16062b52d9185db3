//! End-to-end experiments: reference trajectories from the agent model, the
//! velocity-mismatch loss against Euler solves, the learning loop, and
//! micro/macro comparisons.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{
    default_r_min, sample_particles_1d, sample_particles_2d, simulate_observed, velocity_spread, AgentRunParams, BoxDomain,
    ParticleEnsemble, Snapshot, TrajectoryLog, DEFAULT_STIFFNESS_LIMIT,
};
use crate::bayesopt::{optimize_from, BoAbort, BoConfig, BoHistory};
use crate::error::{Error, Result};
use crate::fvm1d::{solve_euler_1d, velocity_of, EulerParams, EulerSolution1D, Grid1D, StepControl};
use crate::fvm2d::{solve_euler_2d, EulerSolution2D, Grid2D};
use crate::gpr::GpModel;
use crate::io::write_json;
use crate::kernel::KernelSpec;
use crate::scalar::Real;

/// Half-width of the preset domains `[-0.75, 0.75]^n`.
pub const HALF_WIDTH: f64 = 0.75;
const PERIOD: f64 = 1.5;

/// Closed-form initial data of the two preset scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 1D: `rho0 = (pi/3) cos(pi x / 1.5)`, `u0 = -c sin(pi x / 1.5)`, `c = 0.5`.
    Example1,
    /// 2D product of the 1D profiles, `c = 0.5 / sqrt(2)`.
    Example2,
}

impl Preset {
    pub fn dim(self) -> usize {
        match self {
            Preset::Example1 => 1,
            Preset::Example2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Example1 => "example1",
            Preset::Example2 => "example2",
        }
    }

    pub fn amplitude(self) -> f64 {
        match self {
            Preset::Example1 => 0.5,
            Preset::Example2 => 0.5 / std::f64::consts::SQRT_2,
        }
    }

    pub fn particles(self) -> usize {
        match self {
            Preset::Example1 => 1024,
            Preset::Example2 => 9976,
        }
    }

    /// Sampling subdomains per axis.
    pub fn subdomains(self) -> usize {
        match self {
            Preset::Example1 => 64,
            Preset::Example2 => 32,
        }
    }

    pub fn cells(self) -> Vec<usize> {
        match self {
            Preset::Example1 => vec![256],
            Preset::Example2 => vec![64, 64],
        }
    }

    pub fn agent_dt(self) -> f64 {
        match self {
            Preset::Example1 => 1e-3,
            Preset::Example2 => 5e-3,
        }
    }

    pub fn euler_control<T: Real>(self) -> StepControl<T> {
        match self {
            Preset::Example1 => StepControl::with_cfl(0.3),
            Preset::Example2 => StepControl::with_cfl(0.25),
        }
    }

    /// Bin coarsening factor for density comparisons (about 32 agents per bin).
    pub fn coarsening(self) -> usize {
        match self {
            Preset::Example1 => 8,
            Preset::Example2 => 4,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1" => Ok(Preset::Example1),
            "example2" => Ok(Preset::Example2),
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset `{other}`; expected example1 or example2"),
            )),
        }
    }
}

fn wave<T: Real>(x: T) -> T {
    T::PI() * x / T::lit(PERIOD)
}

/// `(pi/3) cos(pi x / 1.5)`.
pub fn rho0_1d<T: Real>(x: T) -> T {
    T::PI() / T::lit(3.0) * wave(x).cos()
}

/// `-c sin(pi x / 1.5)`.
pub fn u0_1d<T: Real>(x: T, c: T) -> T {
    -c * wave(x).sin()
}

/// `(pi/3)^2 cos(pi x / 1.5) cos(pi y / 1.5)`.
pub fn rho0_2d<T: Real>(x: T, y: T) -> T {
    rho0_1d(x) * rho0_1d(y)
}

/// `(-c sin(pi x / 1.5), -c sin(pi y / 1.5))`.
pub fn vel0_2d<T: Real>(x: T, y: T, c: T) -> (T, T) {
    (u0_1d(x, c), u0_1d(y, c))
}

/// How the loss combines the sample times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// One relative error over all times and particles stacked together.
    #[default]
    Stacked,
    /// Mean over times of the per-time relative errors.
    PerTime,
}

/// Recorded times `k * 0.1` for `k = 5..=20`.
pub fn preset_sample_times<T: Real>() -> Vec<T> {
    (5..=20).map(|k| T::from_usize_exact(k) / T::lit(10.0)).collect()
}

/// One experiment: initial data, resolutions, time steps and the hidden order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScenario<T>", into = "RawScenario<T>", bound = "T: Real")]
pub struct ScenarioConfig<T> {
    pub preset: Preset,
    /// Order used to generate the agent reference data.
    pub alpha: T,
    /// Velocity amplitude `c`.
    pub amplitude: T,
    pub particles: usize,
    pub subdomains: usize,
    /// `[K]` in 1D, `[K, L]` in 2D.
    pub cells: Vec<usize>,
    pub agent_dt: T,
    pub substepping: bool,
    pub stiffness_limit: T,
    pub r_min: T,
    pub sample_times: Vec<T>,
    pub seed: u64,
    pub euler: StepControl<T>,
    pub loss_mode: LossMode,
    /// Comparison bins merge this many cells per axis.
    pub coarsening: usize,
}

/// JSON form of [`ScenarioConfig`]: everything but the preset may be omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct RawScenario<T> {
    pub preset: Preset,
    #[serde(default)]
    pub alpha: Option<T>,
    #[serde(default)]
    pub amplitude: Option<T>,
    #[serde(default)]
    pub particles: Option<usize>,
    #[serde(default)]
    pub subdomains: Option<usize>,
    #[serde(default)]
    pub cells: Option<Vec<usize>>,
    #[serde(default)]
    pub agent_dt: Option<T>,
    #[serde(default)]
    pub substepping: Option<bool>,
    #[serde(default)]
    pub stiffness_limit: Option<T>,
    #[serde(default)]
    pub r_min: Option<T>,
    #[serde(default)]
    pub sample_times: Option<Vec<T>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub euler: Option<StepControl<T>>,
    #[serde(default)]
    pub loss_mode: Option<LossMode>,
    #[serde(default)]
    pub coarsening: Option<usize>,
}

impl<T: Real> RawScenario<T> {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset,
            alpha: None,
            amplitude: None,
            particles: None,
            subdomains: None,
            cells: None,
            agent_dt: None,
            substepping: None,
            stiffness_limit: None,
            r_min: None,
            sample_times: None,
            seed: None,
            euler: None,
            loss_mode: None,
            coarsening: None,
        }
    }
}

impl<T: Real> TryFrom<RawScenario<T>> for ScenarioConfig<T> {
    type Error = Error;
    fn try_from(r: RawScenario<T>) -> Result<Self> {
        let p = r.preset;
        let h = T::lit(HALF_WIDTH);
        let r_min = match p.dim() {
            1 => default_r_min(&BoxDomain { lower: [-h], upper: [h] }),
            _ => default_r_min(&BoxDomain { lower: [-h, -h], upper: [h, h] }),
        };
        let cfg = ScenarioConfig {
            preset: p,
            alpha: r.alpha.unwrap_or(T::lit(0.5)),
            amplitude: r.amplitude.unwrap_or(T::lit(p.amplitude())),
            particles: r.particles.unwrap_or(p.particles()),
            subdomains: r.subdomains.unwrap_or(p.subdomains()),
            cells: r.cells.unwrap_or_else(|| p.cells()),
            agent_dt: r.agent_dt.unwrap_or(T::lit(p.agent_dt())),
            substepping: r.substepping.unwrap_or(true),
            stiffness_limit: r.stiffness_limit.unwrap_or(T::lit(DEFAULT_STIFFNESS_LIMIT)),
            r_min: r.r_min.unwrap_or(r_min),
            sample_times: r.sample_times.unwrap_or_else(preset_sample_times),
            seed: r.seed.unwrap_or(0),
            euler: r.euler.unwrap_or_else(|| p.euler_control()),
            loss_mode: r.loss_mode.unwrap_or_default(),
            coarsening: r.coarsening.unwrap_or(p.coarsening()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl<T: Real> From<ScenarioConfig<T>> for RawScenario<T> {
    fn from(c: ScenarioConfig<T>) -> Self {
        RawScenario {
            preset: c.preset,
            alpha: Some(c.alpha),
            amplitude: Some(c.amplitude),
            particles: Some(c.particles),
            subdomains: Some(c.subdomains),
            cells: Some(c.cells),
            agent_dt: Some(c.agent_dt),
            substepping: Some(c.substepping),
            stiffness_limit: Some(c.stiffness_limit),
            r_min: Some(c.r_min),
            sample_times: Some(c.sample_times),
            seed: Some(c.seed),
            euler: Some(c.euler),
            loss_mode: Some(c.loss_mode),
            coarsening: Some(c.coarsening),
        }
    }
}

impl<T: Real> ScenarioConfig<T> {
    /// Preset defaults with the given hidden order.
    pub fn preset(preset: Preset, alpha: T) -> Result<Self> {
        let mut raw = RawScenario::from_preset(preset);
        raw.alpha = Some(alpha);
        Self::try_from(raw)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn dim(&self) -> usize {
        self.preset.dim()
    }

    pub fn t_end(&self) -> T {
        self.sample_times.last().copied().unwrap_or(T::zero())
    }

    pub fn validate(&self) -> Result<()> {
        KernelSpec::new(self.alpha, self.dim())?;
        let d = self.dim();
        if self.cells.len() != d {
            return Err(Error::invalid(
                "cells",
                format!("{} needs {d} cell counts, got {}", self.preset.name(), self.cells.len()),
            ));
        }
        if self.cells.iter().any(|&k| k < 2) {
            return Err(Error::invalid("cells", "need at least 2 cells per axis"));
        }
        if !(self.amplitude.is_finite()) {
            return Err(Error::invalid("amplitude", "must be finite"));
        }
        if self.subdomains == 0 || self.particles < self.subdomains.pow(d as u32) {
            return Err(Error::invalid(
                "particles",
                format!("{} particles cannot fill {}^{d} subdomains", self.particles, self.subdomains),
            ));
        }
        if !(self.agent_dt > T::zero()) {
            return Err(Error::invalid("agent_dt", "time step must be positive"));
        }
        if !(self.stiffness_limit > T::zero()) {
            return Err(Error::invalid("stiffness_limit", "must be positive"));
        }
        if !(self.r_min >= T::zero()) {
            return Err(Error::invalid("r_min", "must be non-negative"));
        }
        if self.sample_times.is_empty() {
            return Err(Error::invalid("sample_times", "need at least one sample time"));
        }
        for (i, t) in self.sample_times.iter().enumerate() {
            if !(*t >= T::zero()) || (i > 0 && !(*t > self.sample_times[i - 1])) {
                return Err(Error::invalid(
                    "sample_times",
                    "sample times must be non-negative and strictly increasing",
                ));
            }
            let k = (*t / self.agent_dt).round();
            if (*t - k * self.agent_dt).abs() > self.agent_dt * T::lit(0.5) * T::lit(1e-6) + T::epsilon() {
                return Err(Error::invalid(
                    "sample_times",
                    format!("sample time {t} is not a multiple of agent_dt = {}", self.agent_dt),
                ));
            }
        }
        if self.coarsening == 0 || self.cells.iter().any(|k| k % self.coarsening != 0) {
            return Err(Error::invalid("coarsening", "must divide the cell counts"));
        }
        Ok(())
    }

    pub fn domain_1d(&self) -> BoxDomain<T, 1> {
        let h = T::lit(HALF_WIDTH);
        BoxDomain { lower: [-h], upper: [h] }
    }

    pub fn domain_2d(&self) -> BoxDomain<T, 2> {
        let h = T::lit(HALF_WIDTH);
        BoxDomain {
            lower: [-h, -h],
            upper: [h, h],
        }
    }

    pub fn grid_1d(&self) -> Result<Grid1D<T>> {
        let h = T::lit(HALF_WIDTH);
        Grid1D::new(-h, h, self.cells[0])
    }

    pub fn grid_2d(&self) -> Result<Grid2D<T>> {
        let h = T::lit(HALF_WIDTH);
        let l = *self.cells.get(1).unwrap_or(&self.cells[0]);
        Grid2D::new((-h, h), (-h, h), self.cells[0], l)
    }

    pub fn agent_params(&self) -> AgentRunParams<T> {
        AgentRunParams {
            dt: self.agent_dt,
            t_end: self.t_end(),
            r_min: self.r_min,
            seed: self.seed,
            stiffness_limit: self.substepping.then_some(self.stiffness_limit),
        }
    }

    pub fn euler_params(&self, t_end: T) -> EulerParams<T> {
        EulerParams {
            t_end,
            k_hat: None,
            l_hat: None,
            control: self.euler,
        }
    }

    /// Agents at `t = 0`, placed from the preset density.
    pub fn initial_ensemble_1d(&self) -> Result<ParticleEnsemble<T, 1>> {
        self.expect_dim(1)?;
        let dom = self.domain_1d();
        let pos = sample_particles_1d(rho0_1d, &dom, self.subdomains, self.particles)?;
        let c = self.amplitude;
        ParticleEnsemble::with_velocity_field(pos, &dom, |x| [u0_1d(x[0], c)])
    }

    pub fn initial_ensemble_2d(&self) -> Result<ParticleEnsemble<T, 2>> {
        self.expect_dim(2)?;
        let dom = self.domain_2d();
        let pos = sample_particles_2d(|p: [T; 2]| rho0_2d(p[0], p[1]), &dom, self.subdomains, self.particles)?;
        let c = self.amplitude;
        ParticleEnsemble::with_velocity_field(pos, &dom, |p| {
            let (u, v) = vel0_2d(p[0], p[1], c);
            [u, v]
        })
    }

    fn expect_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::invalid(
                "preset",
                format!("{} is {}-dimensional, this operation needs {d}D", self.preset.name(), self.dim()),
            ));
        }
        Ok(())
    }
}

/// Agent data the loss compares against: positions and velocities per sample time.
pub type ReferenceDataset<T, const D: usize> = TrajectoryLog<T, D>;

/// Reference data of either dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference<T> {
    OneD(ReferenceDataset<T, 1>),
    TwoD(ReferenceDataset<T, 2>),
}

impl<T: Real> Reference<T> {
    pub fn sample_times(&self) -> Vec<T> {
        match self {
            Reference::OneD(r) => r.sample_times(),
            Reference::TwoD(r) => r.sample_times(),
        }
    }

    pub fn loss(&self, alpha: T, cfg: &ScenarioConfig<T>) -> Result<T> {
        match self {
            Reference::OneD(r) => loss_1d(alpha, r, cfg),
            Reference::TwoD(r) => loss_2d(alpha, r, cfg),
        }
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        match self {
            Reference::OneD(r) => crate::io::write_trajectory(r, dir).map(|_| ()),
            Reference::TwoD(r) => crate::io::write_trajectory(r, dir).map(|_| ()),
        }
    }
}

fn check_reference<T: Real, const D: usize>(log: &TrajectoryLog<T, D>) -> Result<()> {
    log.validate()?;
    for s in &log.snapshots {
        if s.positions.iter().chain(&s.velocities).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite agent data at t = {}", s.time)));
        }
    }
    Ok(())
}

pub fn generate_reference_1d<T: Real>(cfg: &ScenarioConfig<T>) -> Result<ReferenceDataset<T, 1>> {
    generate_reference_1d_observed(cfg, |_, _| {})
}

/// [`generate_reference_1d`] reporting each snapshot as in [`simulate_observed`].
pub fn generate_reference_1d_observed<T: Real>(
    cfg: &ScenarioConfig<T>,
    observe: impl FnMut(&Snapshot<T, 1>, usize),
) -> Result<ReferenceDataset<T, 1>> {
    let spec = KernelSpec::new(cfg.alpha, 1)?;
    let e = cfg.initial_ensemble_1d()?;
    let log = simulate_observed(e, &cfg.domain_1d(), &spec, &cfg.agent_params(), &cfg.sample_times, observe)?;
    check_reference(&log)?;
    Ok(log)
}

pub fn generate_reference_2d<T: Real>(cfg: &ScenarioConfig<T>) -> Result<ReferenceDataset<T, 2>> {
    generate_reference_2d_observed(cfg, |_, _| {})
}

pub fn generate_reference_2d_observed<T: Real>(
    cfg: &ScenarioConfig<T>,
    observe: impl FnMut(&Snapshot<T, 2>, usize),
) -> Result<ReferenceDataset<T, 2>> {
    let spec = KernelSpec::new(cfg.alpha, 2)?;
    let e = cfg.initial_ensemble_2d()?;
    let log = simulate_observed(e, &cfg.domain_2d(), &spec, &cfg.agent_params(), &cfg.sample_times, observe)?;
    check_reference(&log)?;
    Ok(log)
}

/// Runs the agent model at the scenario's hidden order.
pub fn generate_reference<T: Real>(cfg: &ScenarioConfig<T>) -> Result<Reference<T>> {
    match cfg.dim() {
        1 => generate_reference_1d(cfg).map(Reference::OneD),
        _ => generate_reference_2d(cfg).map(Reference::TwoD),
    }
}

/// Euler solve of the scenario at order `alpha`, recording `times`.
pub fn solve_scenario_1d<T: Real>(cfg: &ScenarioConfig<T>, alpha: T, times: &[T]) -> Result<EulerSolution1D<T>> {
    cfg.expect_dim(1)?;
    let spec = KernelSpec::new(alpha, 1)?;
    let t_end = times.last().copied().unwrap_or(T::zero());
    let c = cfg.amplitude;
    solve_euler_1d(rho0_1d, |x| u0_1d(x, c), &cfg.grid_1d()?, &spec, &cfg.euler_params(t_end), times)
}

pub fn solve_scenario_2d<T: Real>(cfg: &ScenarioConfig<T>, alpha: T, times: &[T]) -> Result<EulerSolution2D<T>> {
    cfg.expect_dim(2)?;
    let spec = KernelSpec::new(alpha, 2)?;
    let t_end = times.last().copied().unwrap_or(T::zero());
    let c = cfg.amplitude;
    solve_euler_2d(
        rho0_2d,
        |x, y| vel0_2d(x, y, c),
        &cfg.grid_2d()?,
        &spec,
        &cfg.euler_params(t_end),
        times,
    )
}

fn time_index<T: Real>(times: &[T], t: T) -> Result<usize> {
    let tol = T::lit(1e-9) * t.abs().max(T::one());
    times.iter().position(|s| (*s - t).abs() <= tol).ok_or_else(|| {
        Error::TimeMismatch(format!("time {t} is not among the recorded solution times"))
    })
}

/// `u = m / rho` of the cell containing each point; outside points use the
/// nearest boundary cell.
pub fn eval_velocity_at_points_1d<T: Real>(sol: &EulerSolution1D<T>, time: T, points: &[[T; 1]]) -> Result<Vec<T>> {
    let f = &sol.fields[time_index(&sol.times, time)?];
    Ok(points
        .iter()
        .map(|p| {
            let j = sol.grid.locate(p[0]);
            velocity_of(f.rho[j], f.m[j])
        })
        .collect())
}

pub fn eval_velocity_at_points_2d<T: Real>(
    sol: &EulerSolution2D<T>,
    time: T,
    points: &[[T; 2]],
) -> Result<Vec<[T; 2]>> {
    let f = &sol.fields[time_index(&sol.times, time)?];
    Ok(points
        .iter()
        .map(|p| {
            let (i, j) = sol.grid.locate((p[0], p[1]));
            let c = sol.grid.index(i, j);
            [velocity_of(f.rho[c], f.m1[c]), velocity_of(f.rho[c], f.m2[c])]
        })
        .collect())
}

fn ratio<T: Real>(num: T, den: T) -> Result<T> {
    if !(den > T::zero()) {
        return Err(Error::Domain("reference velocities are identically zero".into()));
    }
    Ok((num / den).sqrt())
}

/// Per-time squared mismatch and reference norm for each velocity component.
fn mismatch_sums<T: Real, const D: usize>(
    dataset: &TrajectoryLog<T, D>,
    mut eval: impl FnMut(&Snapshot<T, D>) -> Result<Vec<[T; D]>>,
) -> Result<Vec<[(T, T); D]>> {
    let mut out = Vec::with_capacity(dataset.snapshots.len());
    for s in &dataset.snapshots {
        let num = eval(s)?;
        let mut acc = [(T::zero(), T::zero()); D];
        for (a, b) in num.iter().zip(&s.velocities) {
            for d in 0..D {
                acc[d].0 += (a[d] - b[d]).powi(2);
                acc[d].1 += b[d] * b[d];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

fn combine_loss<T: Real, const D: usize>(sums: &[[(T, T); D]], mode: LossMode) -> Result<T> {
    let dn = T::from_usize_exact(D);
    match mode {
        LossMode::Stacked => {
            let mut total = T::zero();
            for d in 0..D {
                let num: T = sums.iter().map(|s| s[d].0).sum();
                let den: T = sums.iter().map(|s| s[d].1).sum();
                total += ratio(num, den)?;
            }
            Ok(total / dn)
        }
        LossMode::PerTime => {
            let mut total = T::zero();
            for s in sums {
                let mut per = T::zero();
                for &(num, den) in s.iter() {
                    per += ratio(num, den)?;
                }
                total += per / dn;
            }
            Ok(total / T::from_usize_exact(sums.len().max(1)))
        }
    }
}

/// `F(alpha) = |u_num - u_agents| / |u_agents|` over all sample times and agents.
pub fn loss_1d<T: Real>(alpha: T, dataset: &ReferenceDataset<T, 1>, cfg: &ScenarioConfig<T>) -> Result<T> {
    let times = dataset.sample_times();
    let sol = solve_scenario_1d(cfg, alpha, &times)?;
    let sums = mismatch_sums(dataset, |s| {
        Ok(eval_velocity_at_points_1d(&sol, s.time, &s.positions)?
            .into_iter()
            .map(|u| [u])
            .collect())
    })?;
    combine_loss(&sums, cfg.loss_mode)
}

/// Average of the `u` and `v` relative errors.
pub fn loss_2d<T: Real>(alpha: T, dataset: &ReferenceDataset<T, 2>, cfg: &ScenarioConfig<T>) -> Result<T> {
    let times = dataset.sample_times();
    let sol = solve_scenario_2d(cfg, alpha, &times)?;
    let sums = mismatch_sums(dataset, |s| eval_velocity_at_points_2d(&sol, s.time, &s.positions))?;
    combine_loss(&sums, cfg.loss_mode)
}

/// Reference built from the Euler solver at `alpha0`, observed at the
/// initial agent sites (self-closure check).
pub fn euler_reference<T: Real>(cfg: &ScenarioConfig<T>, alpha0: T) -> Result<Reference<T>> {
    let times = cfg.sample_times.clone();
    match cfg.dim() {
        1 => {
            let e = cfg.initial_ensemble_1d()?;
            let sol = solve_scenario_1d(cfg, alpha0, &times)?;
            let mut snapshots = Vec::with_capacity(times.len());
            for &t in &times {
                let u = eval_velocity_at_points_1d(&sol, t, e.positions())?;
                snapshots.push(Snapshot {
                    time: t,
                    positions: e.positions().to_vec(),
                    velocities: u.into_iter().map(|v| [v]).collect(),
                });
            }
            Ok(Reference::OneD(TrajectoryLog {
                alpha_used: alpha0,
                dt: cfg.agent_dt,
                seed: cfg.seed,
                domain: cfg.domain_1d(),
                max_substeps: 1,
                snapshots,
            }))
        }
        _ => {
            let e = cfg.initial_ensemble_2d()?;
            let sol = solve_scenario_2d(cfg, alpha0, &times)?;
            let mut snapshots = Vec::with_capacity(times.len());
            for &t in &times {
                snapshots.push(Snapshot {
                    time: t,
                    positions: e.positions().to_vec(),
                    velocities: eval_velocity_at_points_2d(&sol, t, e.positions())?,
                });
            }
            Ok(Reference::TwoD(TrajectoryLog {
                alpha_used: alpha0,
                dt: cfg.agent_dt,
                seed: cfg.seed,
                domain: cfg.domain_2d(),
                max_substeps: 1,
                snapshots,
            }))
        }
    }
}

/// `F` on a list of orders, evaluated on parallel threads; failed
/// evaluations are `None`.
pub fn loss_landscape<T: Real>(reference: &Reference<T>, cfg: &ScenarioConfig<T>, alphas: &[T]) -> Vec<(T, Option<T>)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(alphas.len().max(1));
    let chunk = alphas.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = alphas
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|&a| (a, reference.loss(a, cfg).ok())).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("loss worker panicked")).collect()
    })
}

/// One row of the loss-evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LossEvaluation<T> {
    pub evaluation: usize,
    pub alpha: T,
    #[serde(rename = "F")]
    pub loss: Option<T>,
    pub status: String,
}

/// Outcome of [`learn_alpha`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LearnReport<T> {
    pub dimension: usize,
    pub given_alpha: T,
    pub learned_alpha: T,
    #[serde(rename = "output_F")]
    pub output_f: T,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub history: BoHistory<T>,
    #[serde(skip)]
    pub evaluations_log: Vec<LossEvaluation<T>>,
}

/// A learning run that stopped early, with what was evaluated so far.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct LearnAbort<T: Real> {
    pub error: Error,
    pub history: BoHistory<T>,
    pub evaluations_log: Vec<LossEvaluation<T>>,
}

impl<T: Real> From<Error> for LearnAbort<T> {
    fn from(error: Error) -> Self {
        Self {
            error,
            history: BoHistory::default(),
            evaluations_log: Vec::new(),
        }
    }
}

impl<T: Real> LearnReport<T> {
    /// Writes `report.json`, `history.csv` and `loss_log.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_json(dir.join("report.json"), self)?;
        self.history.write_csv(dir.join("history.csv"))?;
        write_loss_log(&self.evaluations_log, dir.join("loss_log.csv"))
    }
}

pub fn write_loss_log<T: Real>(log: &[LossEvaluation<T>], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A finished learning run with its surrogate, or the abort state.
pub type LearnOutcome<T> = std::result::Result<(LearnReport<T>, Option<GpModel<T>>), LearnAbort<T>>;

/// Runs the learning loop against reference data.
///
/// `prior` observations (for instance the training data of a saved surrogate)
/// seed the loop in place of the initial design.
pub fn learn_alpha_with<T: Real>(
    reference: &Reference<T>,
    cfg: &ScenarioConfig<T>,
    bo: &BoConfig<T>,
    prior: Option<&GpModel<T>>,
) -> LearnOutcome<T> {
    let prior: Vec<(T, T)> = prior
        .map(|m| m.inputs().iter().map(|x| x[0]).zip(m.outputs().iter().copied()).collect())
        .unwrap_or_default();
    let mut log = Vec::new();
    let loss = |a: T| {
        let r = reference.loss(a, cfg);
        log.push(LossEvaluation {
            evaluation: log.len() + 1,
            alpha: a,
            loss: r.as_ref().ok().copied(),
            status: match &r {
                Ok(_) => "ok".to_owned(),
                Err(e) => e.to_string(),
            },
        });
        r
    };
    let out = optimize_from(loss, bo, &prior);
    match out {
        Ok(o) => Ok((
            LearnReport {
                dimension: cfg.dim(),
                given_alpha: cfg.alpha,
                learned_alpha: o.best_alpha,
                output_f: o.best_loss,
                iterations: o.history.iterations(),
                evaluations: o.history.len(),
                converged: o.converged,
                history: o.history,
                evaluations_log: log,
            },
            o.model,
        )),
        Err(BoAbort { error, history }) => Err(LearnAbort {
            error,
            history,
            evaluations_log: log,
        }),
    }
}

/// Generates the agent reference at the hidden order, then learns it back.
pub fn learn_alpha<T: Real>(
    cfg: &ScenarioConfig<T>,
    bo: &BoConfig<T>,
) -> std::result::Result<LearnReport<T>, LearnAbort<T>> {
    let reference = generate_reference(cfg)?;
    learn_alpha_with(&reference, cfg, bo, None).map(|(r, _)| r)
}

/// Agent histogram against coarsened Euler cell averages at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BinnedComparison<T> {
    pub time: T,
    /// Bins per axis.
    pub bins: Vec<usize>,
    /// Coordinates of each bin center, x fastest in 2D.
    pub centers: Vec<Vec<T>>,
    pub agent_density: Vec<T>,
    pub euler_density: Vec<T>,
    /// Per component; `NaN` in empty agent bins.
    pub agent_velocity: Vec<Vec<T>>,
    pub euler_velocity: Vec<Vec<T>>,
    /// `|rho_agents - rho_euler| / |rho_euler|` over all bins.
    pub density_error: T,
    /// Mean over components of the relative velocity error on bins with
    /// Euler density above `1e-3` and at least one agent.
    pub velocity_error: T,
    /// `max_i |v_i - mean v|` per component.
    pub spread: Vec<T>,
}

const VELOCITY_MASK: f64 = 1e-3;

fn rel_l2<T: Real>(a: &[T], b: &[T]) -> T {
    let num: T = a.iter().zip(b).map(|(x, y)| (*x - *y).powi(2)).sum();
    let den: T = b.iter().map(|y| *y * *y).sum();
    if den > T::zero() { (num / den).sqrt() } else { num.sqrt() }
}

fn velocity_error<T: Real>(agent: &[Vec<T>], euler: &[Vec<T>], euler_rho: &[T], counts: &[usize]) -> T {
    let mask: Vec<bool> = euler_rho
        .iter()
        .zip(counts)
        .map(|(r, c)| *r > T::lit(VELOCITY_MASK) && *c > 0)
        .collect();
    let mut total = T::zero();
    for (a, e) in agent.iter().zip(euler) {
        let (aa, ee): (Vec<T>, Vec<T>) = a
            .iter()
            .zip(e)
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((x, y), _)| (*x, *y))
            .unzip();
        total += rel_l2(&aa, &ee);
    }
    total / T::from_usize_exact(agent.len().max(1))
}

/// Compares every agent snapshot with the Euler snapshot at the same time.
/// Agent counts are normalized by `N` and the bin length.
pub fn compare_1d<T: Real>(
    log: &TrajectoryLog<T, 1>,
    sol: &EulerSolution1D<T>,
    coarsening: usize,
) -> Result<Vec<BinnedComparison<T>>> {
    let k = sol.grid.cells();
    if coarsening == 0 || !k.is_multiple_of(coarsening) {
        return Err(Error::invalid("coarsening", format!("{coarsening} does not divide {k} cells")));
    }
    let nb = k / coarsening;
    let coarse = Grid1D::new(sol.grid.a(), sol.grid.b(), nb)?;
    let bw = coarse.dx();
    let mut out = Vec::with_capacity(log.snapshots.len());
    for s in &log.snapshots {
        let f = &sol.fields[time_index(&sol.times, s.time)?];
        let n = T::from_usize_exact(s.positions.len());
        let mut counts = vec![0usize; nb];
        let mut vsum = vec![T::zero(); nb];
        for (p, v) in s.positions.iter().zip(&s.velocities) {
            let b = coarse.locate(p[0]);
            counts[b] += 1;
            vsum[b] += v[0];
        }
        let agent_density: Vec<T> = counts.iter().map(|c| T::from_usize_exact(*c) / (n * bw)).collect();
        let agent_u: Vec<T> = counts
            .iter()
            .zip(&vsum)
            .map(|(c, v)| if *c > 0 { *v / T::from_usize_exact(*c) } else { T::nan() })
            .collect();
        let cf = T::from_usize_exact(coarsening);
        let mut euler_density = Vec::with_capacity(nb);
        let mut euler_u = Vec::with_capacity(nb);
        for b in 0..nb {
            let r: T = f.rho[b * coarsening..(b + 1) * coarsening].iter().copied().sum();
            let m: T = f.m[b * coarsening..(b + 1) * coarsening].iter().copied().sum();
            euler_density.push(r / cf);
            euler_u.push(velocity_of(r, m));
        }
        let density_error = rel_l2(&agent_density, &euler_density);
        let agent_velocity = vec![agent_u];
        let euler_velocity = vec![euler_u];
        let velocity_error = velocity_error(&agent_velocity, &euler_velocity, &euler_density, &counts);
        out.push(BinnedComparison {
            time: s.time,
            bins: vec![nb],
            centers: coarse.centers().into_iter().map(|x| vec![x]).collect(),
            agent_density,
            euler_density,
            agent_velocity,
            euler_velocity,
            density_error,
            velocity_error,
            spread: velocity_spread(&s.velocities).to_vec(),
        });
    }
    Ok(out)
}

pub fn compare_2d<T: Real>(
    log: &TrajectoryLog<T, 2>,
    sol: &EulerSolution2D<T>,
    coarsening: usize,
) -> Result<Vec<BinnedComparison<T>>> {
    let g = &sol.grid;
    if coarsening == 0 || !g.nx().is_multiple_of(coarsening) || !g.ny().is_multiple_of(coarsening) {
        return Err(Error::invalid("coarsening", format!("{coarsening} does not divide the grid")));
    }
    let (bx, by) = (g.nx() / coarsening, g.ny() / coarsening);
    let coarse = Grid2D::new(g.x_range(), g.y_range(), bx, by)?;
    let area = coarse.dx() * coarse.dy();
    let mut out = Vec::with_capacity(log.snapshots.len());
    for s in &log.snapshots {
        let f = &sol.fields[time_index(&sol.times, s.time)?];
        let n = T::from_usize_exact(s.positions.len());
        let nb = bx * by;
        let mut counts = vec![0usize; nb];
        let mut usum = vec![T::zero(); nb];
        let mut vsum = vec![T::zero(); nb];
        for (p, v) in s.positions.iter().zip(&s.velocities) {
            let (i, j) = coarse.locate((p[0], p[1]));
            let b = coarse.index(i, j);
            counts[b] += 1;
            usum[b] += v[0];
            vsum[b] += v[1];
        }
        let agent_density: Vec<T> = counts.iter().map(|c| T::from_usize_exact(*c) / (n * area)).collect();
        let mean = |sum: &[T]| -> Vec<T> {
            counts
                .iter()
                .zip(sum)
                .map(|(c, v)| if *c > 0 { *v / T::from_usize_exact(*c) } else { T::nan() })
                .collect()
        };
        let (agent_u, agent_v) = (mean(&usum), mean(&vsum));
        let cells = T::from_usize_exact(coarsening * coarsening);
        let mut euler_density = vec![T::zero(); nb];
        let mut eu = vec![T::zero(); nb];
        let mut ev = vec![T::zero(); nb];
        let mut centers = Vec::with_capacity(nb);
        for j in 0..by {
            for i in 0..bx {
                let (mut r, mut m1, mut m2) = (T::zero(), T::zero(), T::zero());
                for jj in j * coarsening..(j + 1) * coarsening {
                    for ii in i * coarsening..(i + 1) * coarsening {
                        let c = g.index(ii, jj);
                        r += f.rho[c];
                        m1 += f.m1[c];
                        m2 += f.m2[c];
                    }
                }
                let b = coarse.index(i, j);
                euler_density[b] = r / cells;
                eu[b] = velocity_of(r, m1);
                ev[b] = velocity_of(r, m2);
                let (x, y) = coarse.center(i, j);
                centers.push(vec![x, y]);
            }
        }
        let density_error = rel_l2(&agent_density, &euler_density);
        let agent_velocity = vec![agent_u, agent_v];
        let euler_velocity = vec![eu, ev];
        let velocity_error = velocity_error(&agent_velocity, &euler_velocity, &euler_density, &counts);
        out.push(BinnedComparison {
            time: s.time,
            bins: vec![bx, by],
            centers,
            agent_density,
            euler_density,
            agent_velocity,
            euler_velocity,
            density_error,
            velocity_error,
            spread: velocity_spread(&s.velocities).to_vec(),
        });
    }
    Ok(out)
}

/// Relative differences between two Euler runs on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FieldDifference<T> {
    pub time: T,
    pub density_error: T,
    pub velocity_error: T,
}

fn field_difference<T: Real>(
    time: T,
    rho: (&[T], &[T]),
    vel: (&[Vec<T>], &[Vec<T>]),
) -> FieldDifference<T> {
    let counts = vec![1usize; rho.1.len()];
    FieldDifference {
        time,
        density_error: rel_l2(rho.0, rho.1),
        velocity_error: velocity_error(vel.0, vel.1, rho.1, &counts),
    }
}

/// Compares `a` against `b` at every time of `a`.
pub fn compare_solutions_1d<T: Real>(a: &EulerSolution1D<T>, b: &EulerSolution1D<T>) -> Result<Vec<FieldDifference<T>>> {
    if a.grid != b.grid {
        return Err(Error::invalid("grid", "solutions live on different grids"));
    }
    a.times
        .iter()
        .zip(&a.fields)
        .map(|(&t, fa)| {
            let fb = &b.fields[time_index(&b.times, t)?];
            Ok(field_difference(t, (&fa.rho, &fb.rho), (&[fa.velocity()], &[fb.velocity()])))
        })
        .collect()
}

pub fn compare_solutions_2d<T: Real>(a: &EulerSolution2D<T>, b: &EulerSolution2D<T>) -> Result<Vec<FieldDifference<T>>> {
    if a.grid != b.grid {
        return Err(Error::invalid("grid", "solutions live on different grids"));
    }
    a.times
        .iter()
        .zip(&a.fields)
        .map(|(&t, fa)| {
            let fb = &b.fields[time_index(&b.times, t)?];
            let (ua, va) = fa.velocity();
            let (ub, vb) = fb.velocity();
            Ok(field_difference(t, (&fa.rho, &fb.rho), (&[ua, va], &[ub, vb])))
        })
        .collect()
}

/// Writes `summary.csv` (time, errors, spread) and one overlay CSV per time.
pub fn write_comparison<T: Real>(rows: &[BinnedComparison<T>], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let dim = rows.first().map_or(1, |r| r.bins.len());
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    let mut head = vec!["time".to_owned(), "density_error".to_owned(), "velocity_error".to_owned()];
    head.extend(["spread_u", "spread_v"][..dim].iter().map(|s| (*s).to_owned()));
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.time.to_string(), r.density_error.to_string(), r.velocity_error.to_string()];
        rec.extend(r.spread.iter().map(|s| s.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    for (k, r) in rows.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("overlay_{k:03}.csv")))?;
        let mut head: Vec<String> = ["x", "y"][..dim].iter().map(|s| (*s).to_owned()).collect();
        head.extend(["agent_rho", "euler_rho"].iter().map(|s| (*s).to_owned()));
        for c in &["u", "v"][..dim] {
            head.push(format!("agent_{c}"));
            head.push(format!("euler_{c}"));
        }
        w.write_record(&head)?;
        for b in 0..r.agent_density.len() {
            let mut rec: Vec<String> = r.centers[b].iter().map(|c| c.to_string()).collect();
            rec.push(r.agent_density[b].to_string());
            rec.push(r.euler_density[b].to_string());
            for d in 0..dim {
                rec.push(r.agent_velocity[d][b].to_string());
                rec.push(r.euler_velocity[d][b].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

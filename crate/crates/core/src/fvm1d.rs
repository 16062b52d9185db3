//! Finite volume solver for the 1D fractional Euler alignment system
//! `rho_t + m_x = 0`, `m_t + (rho u^2)_x = rho L(m) - m L(rho)`.
//!
//! Interface fluxes come from the Godunov solver for pressureless gas
//! dynamics. The nonlocal operator `L` is discretized on the cell averages as
//! a symmetric Toeplitz matrix applied through a circulant FFT embedding, and
//! time is advanced with the two-stage SSP Runge-Kutta scheme.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::quad::gauss5_mean;
use crate::scalar::Real;

/// Density floor in `u = m / max(rho, floor)`. Any larger floor breaks the
/// proportionality of mass and momentum fluxes in cells draining to vacuum.
pub const RHO_FLOOR: f64 = f64::MIN_POSITIVE;
/// Average speeds within this many ulps of the interface speeds count as zero
/// in the Godunov flux, so mirror-symmetric data meets the symmetric branch.
pub const SPEED_TIE_ULPS: f64 = 64.0;
/// Most negative density tolerated before a run is aborted.
pub const NEGATIVITY_TOLERANCE: f64 = 1e-12;

/// Uniform partition of `[a, b]` into `K` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Grid1D<T> {
    a: T,
    b: T,
    cells: usize,
}

impl<T: Real> Grid1D<T> {
    pub fn new(a: T, b: T, cells: usize) -> Result<Self> {
        if !(b > a) {
            return Err(Error::invalid("grid", format!("need b > a, got [{a}, {b}]")));
        }
        if cells < 2 {
            return Err(Error::invalid("cells", format!("need at least 2 cells, got {cells}")));
        }
        Ok(Self { a, b, cells })
    }

    pub fn a(&self) -> T {
        self.a
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dx(&self) -> T {
        (self.b - self.a) / T::from_usize_exact(self.cells)
    }

    pub fn center(&self, j: usize) -> T {
        self.a + self.dx() * (T::from_usize_exact(j) + T::lit(0.5))
    }

    pub fn centers(&self) -> Vec<T> {
        (0..self.cells).map(|j| self.center(j)).collect()
    }

    /// Index of the cell containing `x`, clamped to the grid.
    pub fn locate(&self, x: T) -> usize {
        let s = ((x - self.a) / self.dx()).floor();
        if s <= T::zero() {
            0
        } else {
            s.to_usize().unwrap_or(usize::MAX).min(self.cells - 1)
        }
    }
}

/// Vector spaces the SSP-RK2 stepper can combine.
pub trait LinearState<T>: Clone {
    /// `self * a + other * b`.
    fn combine(&self, a: T, other: &Self, b: T) -> Self;
}

impl<T: Real> LinearState<T> for Vec<T> {
    fn combine(&self, a: T, other: &Self, b: T) -> Self {
        self.iter().zip(other).map(|(x, y)| *x * a + *y * b).collect()
    }
}

/// Cell averages of density and momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ConservedField1D<T> {
    pub rho: Vec<T>,
    pub m: Vec<T>,
}

impl<T: Real> LinearState<T> for ConservedField1D<T> {
    fn combine(&self, a: T, other: &Self, b: T) -> Self {
        Self {
            rho: self.rho.combine(a, &other.rho, b),
            m: self.m.combine(a, &other.m, b),
        }
    }
}

pub(crate) fn velocity_of<T: Real>(rho: T, m: T) -> T {
    if rho > T::zero() {
        m / rho.max(T::lit(RHO_FLOOR))
    } else {
        T::zero()
    }
}

impl<T: Real> ConservedField1D<T> {
    pub fn zeros(cells: usize) -> Self {
        Self {
            rho: vec![T::zero(); cells],
            m: vec![T::zero(); cells],
        }
    }

    pub fn new(rho: Vec<T>, m: Vec<T>) -> Result<Self> {
        if rho.len() != m.len() {
            return Err(Error::invalid("m", "density and momentum lengths differ"));
        }
        let f = Self { rho, m };
        f.validate(0, T::zero())?;
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn scaled(mut self, a: T) -> Self {
        for x in self.rho.iter_mut().chain(self.m.iter_mut()) {
            *x *= a;
        }
        self
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// `u_j = m_j / rho_j`, zero in vacuum.
    pub fn velocity(&self) -> Vec<T> {
        self.rho.iter().zip(&self.m).map(|(r, m)| velocity_of(*r, *m)).collect()
    }

    pub fn total_mass(&self, dx: T) -> T {
        self.rho.iter().copied().sum::<T>() * dx
    }

    pub fn total_momentum(&self, dx: T) -> T {
        self.m.iter().copied().sum::<T>() * dx
    }

    /// Checks finiteness and density nonnegativity.
    pub fn validate(&self, step: usize, time: T) -> Result<()> {
        for (j, (r, m)) in self.rho.iter().zip(&self.m).enumerate() {
            if !r.is_finite() || !m.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("state in cell {j}"),
                });
            }
            if *r < -T::lit(NEGATIVITY_TOLERANCE) {
                return Err(Error::NegativeDensity {
                    step,
                    cell: j,
                    value: r.to_f64_lossy(),
                    time: time.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }
}

/// Godunov flux for pressureless gas dynamics between states `(rho, m)`.
pub fn godunov_flux_1d<T: Real>(left: (T, T), right: (T, T)) -> (T, T) {
    let (rl, ml) = left;
    let (rr, mr) = right;
    let ul = velocity_of(rl, ml);
    let ur = velocity_of(rr, mr);
    let flux_l = (ml, rl * ul * ul);
    let flux_r = (mr, rr * ur * ur);
    let zero = T::zero();
    if ul > zero && ur > zero {
        flux_l
    } else if ul <= zero && ur > zero {
        (zero, zero)
    } else if ul <= zero && ur <= zero {
        flux_r
    } else {
        let (sl, sr) = (rl.max(zero).sqrt(), rr.max(zero).sqrt());
        let v = (sl * ul + sr * ur) / (sl + sr);
        let tie = T::lit(SPEED_TIE_ULPS) * T::epsilon() * ul.abs().max(ur.abs());
        if v > tie {
            flux_l
        } else if v < -tie {
            flux_r
        } else {
            let half = T::lit(0.5);
            ((ml + mr) * half, (flux_l.1 + flux_r.1) * half)
        }
    }
}

/// Symmetric Toeplitz discretization `G` of the nonlocal operator.
#[derive(Clone)]
pub struct NonlocalOperator1D<T: Real> {
    cells: usize,
    k_hat: usize,
    tail_weight: T,
    first_column: Vec<T>,
    spectrum: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> fmt::Debug for NonlocalOperator1D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlocalOperator1D")
            .field("cells", &self.cells)
            .field("k_hat", &self.k_hat)
            .field("tail_weight", &self.tail_weight)
            .field("diagonal", &self.first_column[0])
            .finish_non_exhaustive()
    }
}

/// Symbol of `G` for offsets `0..=K_hat + 1`: the diagonal, `dx phi(i dx)`
/// for `1 <= i <= K_hat`, and the tail mass as ghost weight. Also returns the
/// tail mass.
fn symbol_1d<T: Real>(spec: &KernelSpec<T>, dx: T, k_hat: usize) -> Result<(Vec<T>, T)> {
    let mut col = Vec::with_capacity(k_hat + 2);
    col.push(T::zero());
    let mut sum = T::zero();
    for k in 1..=k_hat {
        let w = dx * spec.influence(dx * T::from_usize_exact(k))?;
        sum += w;
        col.push(w);
    }
    let tail = spec.tail_mass_1d(dx * T::from_usize_exact(k_hat))?;
    col.push(tail);
    col[0] = -T::lit(2.0) * (sum + tail);
    Ok((col, tail))
}

impl<T: Real> NonlocalOperator1D<T> {
    /// Builds `G` for `grid` with stencil truncation `k_hat`.
    pub fn build(grid: &Grid1D<T>, spec: &KernelSpec<T>, k_hat: usize) -> Result<Self> {
        if spec.dim() != 1 {
            return Err(Error::invalid("kernel", "the 1D operator needs a 1D kernel"));
        }
        if k_hat < 1 {
            return Err(Error::invalid("k_hat", "stencil truncation must be at least 1"));
        }
        let k = grid.cells();
        let (symbol, tail) = symbol_1d(spec, grid.dx(), k_hat)?;
        let mut first_column = vec![T::zero(); k];
        for (i, w) in symbol.iter().enumerate().take(k) {
            first_column[i] = *w;
        }
        let size = 2 * k;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let mut spectrum = vec![Complex::new(T::zero(), T::zero()); size];
        spectrum[0].re = first_column[0];
        for i in 1..k {
            spectrum[i].re = first_column[i];
            spectrum[size - i].re = first_column[i];
        }
        forward.process(&mut spectrum);
        let scale = T::one() / T::from_usize_exact(size);
        let spectrum: Vec<T> = spectrum.iter().map(|z| z.re * scale).collect();
        Ok(Self {
            cells: k,
            k_hat,
            tail_weight: tail,
            first_column,
            spectrum,
            forward,
            inverse,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn k_hat(&self) -> usize {
        self.k_hat
    }

    pub fn tail_weight(&self) -> T {
        self.tail_weight
    }

    pub fn diagonal(&self) -> T {
        self.first_column[0]
    }

    /// `G_{j, j+i}` for `|i| < K`.
    pub fn first_column(&self) -> &[T] {
        &self.first_column
    }

    pub fn entry(&self, i: usize, j: usize) -> T {
        self.first_column[i.abs_diff(j)]
    }

    /// Dense `K x K` matrix, row major.
    pub fn dense(&self) -> Vec<T> {
        let k = self.cells;
        let mut g = vec![T::zero(); k * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] = self.entry(i, j);
            }
        }
        g
    }

    /// `G v` with zero exterior values, via the circulant embedding.
    pub fn apply(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cells, "vector length must match the grid");
        self.convolve(v.iter().map(|x| Complex::new(*x, T::zero())), |r| {
            r.iter().map(|z| z.re).collect()
        })
    }

    /// Applies `G` to two vectors with one complex transform pair.
    pub fn apply_pair(&self, x: &[T], y: &[T]) -> (Vec<T>, Vec<T>) {
        assert_eq!(x.len(), self.cells, "vector length must match the grid");
        assert_eq!(y.len(), self.cells, "vector length must match the grid");
        self.convolve(x.iter().zip(y).map(|(a, b)| Complex::new(*a, *b)), |r| {
            r.iter().map(|z| (z.re, z.im)).unzip()
        })
    }

    fn convolve<R>(&self, input: impl Iterator<Item = Complex<T>>, out: impl FnOnce(&[Complex<T>]) -> R) -> R {
        let zero = Complex::new(T::zero(), T::zero());
        let size = 2 * self.cells;
        let scratch = self
            .forward
            .get_outofplace_scratch_len()
            .max(self.inverse.get_outofplace_scratch_len());
        let mut work = Vec::with_capacity(2 * size + scratch);
        work.extend(input);
        work.resize(2 * size + scratch, zero);
        let (a, rest) = work.split_at_mut(size);
        let (b, scratch) = rest.split_at_mut(size);
        self.forward.process_outofplace_with_scratch(a, b, scratch);
        for (z, s) in b.iter_mut().zip(&self.spectrum) {
            *z = z.scale(*s);
        }
        self.inverse.process_outofplace_with_scratch(b, a, scratch);
        out(&a[..self.cells])
    }
}

/// Momentum source per unit `dt/dx`: `s_j = dx (rho_j (G m)_j - m_j (G rho)_j)`.
pub fn source_1d<T: Real>(state: &ConservedField1D<T>, op: &NonlocalOperator1D<T>, dx: T) -> Vec<T> {
    let (gm, grho) = op.apply_pair(&state.m, &state.rho);
    (0..state.len())
        .map(|j| dx * (state.rho[j] * gm[j] - state.m[j] * grho[j]))
        .collect()
}

/// Increment of the scheme per unit `dt/dx`: `-(h_{j+1/2} - h_{j-1/2}) + [0, s_j]`.
/// Exterior ghost cells are vacuum.
pub fn fv_rhs_1d<T: Real>(
    state: &ConservedField1D<T>,
    op: &NonlocalOperator1D<T>,
    dx: T,
) -> ConservedField1D<T> {
    let k = state.len();
    let cell = |j: isize| -> (T, T) {
        if j < 0 || j as usize >= k {
            (T::zero(), T::zero())
        } else {
            (state.rho[j as usize], state.m[j as usize])
        }
    };
    let fluxes: Vec<(T, T)> = (0..=k as isize)
        .map(|i| godunov_flux_1d(cell(i - 1), cell(i)))
        .collect();
    let source = source_1d(state, op, dx);
    let mut out = ConservedField1D::zeros(k);
    for j in 0..k {
        out.rho[j] = -(fluxes[j + 1].0 - fluxes[j].0);
        out.m[j] = -(fluxes[j + 1].1 - fluxes[j].1) + source[j];
    }
    out
}

/// `w1 = w + dt L(w)`, `w_next = w/2 + (w1 + dt L(w1))/2`.
pub fn ssp_rk2_step<T: Real, S: LinearState<T>>(
    w: &S,
    dt: T,
    mut rhs: impl FnMut(&S) -> Result<S>,
) -> Result<S> {
    let w1 = w.combine(T::one(), &rhs(w)?, dt);
    let w2 = w1.combine(T::one(), &rhs(&w1)?, dt);
    let half = T::lit(0.5);
    Ok(w.combine(half, &w2, half))
}

/// Time-step control shared by the 1D and 2D solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct StepControl<T> {
    /// Courant number for the transport part.
    pub cfl: T,
    /// Velocity floor in the CFL estimate.
    pub u_floor: T,
    /// `dt <= stiff_factor / (|G_diag| max rho)`.
    pub stiff_factor: T,
    /// Fixed step; overrides the adaptive choice when set.
    #[serde(default)]
    pub dt: Option<T>,
    /// Abort when this many steps are exceeded.
    pub max_steps: usize,
}

impl<T: Real> StepControl<T> {
    pub fn with_cfl(cfl: f64) -> Self {
        Self {
            cfl: T::lit(cfl),
            u_floor: T::lit(1e-8),
            stiff_factor: T::lit(0.5),
            dt: None,
            max_steps: 10_000_000,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.cfl > T::zero()) {
            return Err(Error::invalid("cfl", "Courant number must be positive"));
        }
        if let Some(dt) = self.dt {
            if !(dt > T::zero()) {
                return Err(Error::invalid("dt", format!("time step must be positive, got {dt}")));
            }
        }
        if !(self.stiff_factor > T::zero()) {
            return Err(Error::invalid("stiff_factor", "must be positive"));
        }
        Ok(())
    }

    /// Step from the transport speed `speed/h` and the source stiffness.
    pub(crate) fn choose(&self, speed_over_h: T, stiffness: T) -> T {
        if let Some(dt) = self.dt {
            return dt;
        }
        let transport = self.cfl / speed_over_h.max(self.u_floor);
        if stiffness > T::zero() {
            transport.min(self.stiff_factor / stiffness)
        } else {
            transport
        }
    }
}

impl<T: Real> Default for StepControl<T> {
    fn default() -> Self {
        Self::with_cfl(0.3)
    }
}

/// Solver run settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EulerParams<T> {
    pub t_end: T,
    /// Stencil truncation along x; defaults to the cell count.
    #[serde(default)]
    pub k_hat: Option<usize>,
    /// Stencil truncation along y (2D only).
    #[serde(default)]
    pub l_hat: Option<usize>,
    #[serde(default)]
    pub control: StepControl<T>,
}

impl<T: Real> EulerParams<T> {
    /// Full-domain stencil with Courant number 0.3.
    pub fn new_1d(t_end: T) -> Self {
        Self {
            t_end,
            k_hat: None,
            l_hat: None,
            control: StepControl::with_cfl(0.3),
        }
    }

    /// Full-domain stencil with Courant number 0.25.
    pub fn new_2d(t_end: T) -> Self {
        Self {
            control: StepControl::with_cfl(0.25),
            ..Self::new_1d(t_end)
        }
    }
}

/// Statistics of an Euler run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RunStats<T> {
    pub steps: usize,
    pub dt_min: T,
    pub dt_max: T,
    /// Largest Courant number over the run.
    pub max_cfl: T,
    pub warnings: Vec<String>,
}

impl<T: Real> RunStats<T> {
    pub(crate) fn new() -> Self {
        Self {
            steps: 0,
            dt_min: T::infinity(),
            dt_max: T::zero(),
            max_cfl: T::zero(),
            warnings: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, dt: T, cfl_number: T, limit: T, t: T) {
        self.steps += 1;
        self.dt_min = self.dt_min.min(dt);
        self.dt_max = self.dt_max.max(dt);
        if cfl_number > limit && self.max_cfl <= limit {
            self.warnings.push(format!(
                "Courant number {cfl_number} exceeds the limit {limit} at t = {t}"
            ));
        }
        self.max_cfl = self.max_cfl.max(cfl_number);
    }
}

/// Recorded solution of a 1D run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EulerSolution1D<T> {
    pub grid: Grid1D<T>,
    pub alpha: T,
    pub times: Vec<T>,
    pub fields: Vec<ConservedField1D<T>>,
    pub stats: RunStats<T>,
}

/// Cell averages of `rho0` and `rho0 u0` by five-point Gauss quadrature.
pub fn project_initial_1d<T: Real>(
    grid: &Grid1D<T>,
    rho0: impl Fn(T) -> T,
    u0: impl Fn(T) -> T,
) -> ConservedField1D<T> {
    let dx = grid.dx();
    let mut field = ConservedField1D::zeros(grid.cells());
    for j in 0..grid.cells() {
        let lo = grid.a() + dx * T::from_usize_exact(j);
        field.rho[j] = gauss5_mean(lo, lo + dx, &rho0);
        field.m[j] = gauss5_mean(lo, lo + dx, |x| rho0(x) * u0(x));
    }
    field
}

pub(crate) fn check_sample_times<T: Real>(sample_times: &[T], t_end: T) -> Result<()> {
    if !(t_end >= T::zero()) {
        return Err(Error::invalid("t_end", "must be non-negative"));
    }
    for (i, t) in sample_times.iter().enumerate() {
        if *t < T::zero() || *t > t_end {
            return Err(Error::invalid(
                "sample_times",
                format!("sample time {t} lies outside [0, {t_end}]"),
            ));
        }
        if i > 0 && !(*t > sample_times[i - 1]) {
            return Err(Error::invalid("sample_times", "sample times must be strictly increasing"));
        }
    }
    Ok(())
}

/// Marches `state` from `t = 0` to `t_end`, landing exactly on each sample
/// time. `step` advances by a given `dt`; `pick_dt` proposes the next step and
/// its Courant number.
pub(crate) fn march<T: Real, S: Clone>(
    mut state: S,
    t_end: T,
    sample_times: &[T],
    control: &StepControl<T>,
    mut pick_dt: impl FnMut(&S) -> (T, T),
    mut step: impl FnMut(&S, T, usize, T) -> Result<S>,
) -> Result<(Vec<S>, RunStats<T>)> {
    let mut stats = RunStats::new();
    let mut out = Vec::with_capacity(sample_times.len());
    let mut t = T::zero();
    let mut next = 0;
    while next < sample_times.len() && sample_times[next] <= t {
        out.push(state.clone());
        next += 1;
    }
    let eps = t_end.abs().max(T::one()) * T::epsilon() * T::lit(16.0);
    while t_end - t > eps {
        if stats.steps >= control.max_steps {
            return Err(Error::invalid(
                "max_steps",
                format!("step budget {} exhausted at t = {t}", control.max_steps),
            ));
        }
        let (mut dt, speed_over_h) = pick_dt(&state);
        let target = if next < sample_times.len() { sample_times[next] } else { t_end };
        let landing = target - t <= dt * (T::one() + T::lit(1e-9));
        if landing {
            dt = target - t;
        }
        state = step(&state, dt, stats.steps + 1, t + dt)?;
        stats.record(dt, speed_over_h * dt, control.cfl, t + dt);
        t = if landing { target } else { t + dt };
        while next < sample_times.len() && sample_times[next] <= t + eps {
            out.push(state.clone());
            next += 1;
        }
    }
    Ok((out, stats))
}

/// Solves the 1D system from analytic initial data, recording `sample_times`.
pub fn solve_euler_1d<T: Real>(
    rho0: impl Fn(T) -> T,
    u0: impl Fn(T) -> T,
    grid: &Grid1D<T>,
    spec: &KernelSpec<T>,
    params: &EulerParams<T>,
    sample_times: &[T],
) -> Result<EulerSolution1D<T>> {
    params.control.validate()?;
    check_sample_times(sample_times, params.t_end)?;
    let initial = project_initial_1d(grid, rho0, u0);
    let dx = grid.dx();
    let mass = initial.total_mass(dx);
    if (mass - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::invalid(
            "density",
            format!("initial density must integrate to 1, got {mass}"),
        ));
    }
    initial.validate(0, T::zero())?;
    let op = NonlocalOperator1D::build(grid, spec, params.k_hat.unwrap_or(grid.cells()))?;
    let diag = op.diagonal().abs();
    let control = params.control;
    let pick = |w: &ConservedField1D<T>| {
        let speed = w.velocity().iter().fold(T::zero(), |a, u| a.max(u.abs()));
        let rho_max = w.rho.iter().fold(T::zero(), |a, r| a.max(*r));
        let dt = control.choose(speed / dx, diag * rho_max);
        (dt, speed / dx)
    };
    let step = |w: &ConservedField1D<T>, dt: T, n: usize, t: T| {
        let next = ssp_rk2_step(w, dt, |s: &ConservedField1D<T>| {
            Ok(fv_rhs_1d(s, &op, dx).scaled(T::one() / dx))
        })?;
        next.validate(n, t)?;
        Ok(next)
    };
    let (fields, stats) = march(initial, params.t_end, sample_times, &control, pick, step)?;
    Ok(EulerSolution1D {
        grid: *grid,
        alpha: spec.alpha(),
        times: sample_times.to_vec(),
        fields,
        stats,
    })
}

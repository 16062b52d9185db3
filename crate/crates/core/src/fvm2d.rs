//! Finite volume solver for the 2D fractional Euler alignment system on a
//! uniform rectangular mesh.
//!
//! Fields are stored x-fastest: cell `(i, j)` lives at index `j * K + i`.
//! Interface fluxes are dimension split, and the nonlocal operator is a
//! block-Toeplitz-Toeplitz-block matrix applied through a 2D FFT.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvm1d::{
    check_sample_times, march, ssp_rk2_step, velocity_of, EulerParams, LinearState, RunStats,
    NEGATIVITY_TOLERANCE, SPEED_TIE_ULPS,
};
use crate::kernel::KernelSpec;
use crate::quad::{GAUSS5_NODES, GAUSS5_WEIGHTS};
use crate::scalar::Real;

/// Uniform `K x L` mesh of `[a, b] x [c, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Grid2D<T> {
    x: (T, T),
    y: (T, T),
    k: usize,
    l: usize,
}

impl<T: Real> Grid2D<T> {
    pub fn new(x: (T, T), y: (T, T), k: usize, l: usize) -> Result<Self> {
        if !(x.1 > x.0) || !(y.1 > y.0) {
            return Err(Error::invalid("grid", "rectangle bounds must be increasing"));
        }
        if k < 2 || l < 2 {
            return Err(Error::invalid("cells", format!("need at least 2 x 2 cells, got {k} x {l}")));
        }
        Ok(Self { x, y, k, l })
    }

    pub fn x_range(&self) -> (T, T) {
        self.x
    }

    pub fn y_range(&self) -> (T, T) {
        self.y
    }

    pub fn nx(&self) -> usize {
        self.k
    }

    pub fn ny(&self) -> usize {
        self.l
    }

    pub fn len(&self) -> usize {
        self.k * self.l
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> T {
        (self.x.1 - self.x.0) / T::from_usize_exact(self.k)
    }

    pub fn dy(&self) -> T {
        (self.y.1 - self.y.0) / T::from_usize_exact(self.l)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.k + i
    }

    pub fn center(&self, i: usize, j: usize) -> (T, T) {
        let half = T::lit(0.5);
        (
            self.x.0 + self.dx() * (T::from_usize_exact(i) + half),
            self.y.0 + self.dy() * (T::from_usize_exact(j) + half),
        )
    }

    /// Cell containing `(x, y)`, clamped to the mesh.
    pub fn locate(&self, p: (T, T)) -> (usize, usize) {
        let clamp = |s: T, n: usize| {
            let s = s.floor();
            if s <= T::zero() {
                0
            } else {
                s.to_usize().unwrap_or(usize::MAX).min(n - 1)
            }
        };
        (
            clamp((p.0 - self.x.0) / self.dx(), self.k),
            clamp((p.1 - self.y.0) / self.dy(), self.l),
        )
    }
}

/// Cell averages of density and both momentum components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ConservedField2D<T> {
    pub rho: Vec<T>,
    pub m1: Vec<T>,
    pub m2: Vec<T>,
}

impl<T: Real> LinearState<T> for ConservedField2D<T> {
    fn combine(&self, a: T, other: &Self, b: T) -> Self {
        Self {
            rho: self.rho.combine(a, &other.rho, b),
            m1: self.m1.combine(a, &other.m1, b),
            m2: self.m2.combine(a, &other.m2, b),
        }
    }
}

impl<T: Real> ConservedField2D<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            rho: vec![T::zero(); len],
            m1: vec![T::zero(); len],
            m2: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn scaled(mut self, a: T) -> Self {
        for x in self.rho.iter_mut().chain(self.m1.iter_mut()).chain(self.m2.iter_mut()) {
            *x *= a;
        }
        self
    }

    pub fn velocity(&self) -> (Vec<T>, Vec<T>) {
        let u = self.rho.iter().zip(&self.m1).map(|(r, m)| velocity_of(*r, *m)).collect();
        let v = self.rho.iter().zip(&self.m2).map(|(r, m)| velocity_of(*r, *m)).collect();
        (u, v)
    }

    pub fn total_mass(&self, cell_area: T) -> T {
        self.rho.iter().copied().sum::<T>() * cell_area
    }

    pub fn total_momentum(&self, cell_area: T) -> (T, T) {
        (
            self.m1.iter().copied().sum::<T>() * cell_area,
            self.m2.iter().copied().sum::<T>() * cell_area,
        )
    }

    pub fn validate(&self, step: usize, time: T) -> Result<()> {
        for c in 0..self.len() {
            let (r, a, b) = (self.rho[c], self.m1[c], self.m2[c]);
            if !r.is_finite() || !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("state in cell {c}"),
                });
            }
            if r < -T::lit(NEGATIVITY_TOLERANCE) {
                return Err(Error::NegativeDensity {
                    step,
                    cell: c,
                    value: r.to_f64_lossy(),
                    time: time.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }
}

/// Godunov flux across a vertical interface between `(rho, m1, m2)` states.
pub fn godunov_flux_2d_x<T: Real>(left: (T, T, T), right: (T, T, T)) -> (T, T, T) {
    let (rl, m1l, m2l) = left;
    let (rr, m1r, m2r) = right;
    let (ul, vl) = (velocity_of(rl, m1l), velocity_of(rl, m2l));
    let (ur, vr) = (velocity_of(rr, m1r), velocity_of(rr, m2r));
    let flux_l = (m1l, rl * ul * ul, rl * ul * vl);
    let flux_r = (m1r, rr * ur * ur, rr * ur * vr);
    let zero = T::zero();
    if ul > zero && ur > zero {
        flux_l
    } else if ul <= zero && ur > zero {
        (zero, zero, zero)
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
            (
                half * (m1l + m1r),
                half * (flux_l.1 + flux_r.1),
                half * (m1l * vl + m1r * vr),
            )
        }
    }
}

/// Flux across a horizontal interface, `left` below and `right` above.
pub fn godunov_flux_2d_y<T: Real>(left: (T, T, T), right: (T, T, T)) -> (T, T, T) {
    let f = godunov_flux_2d_x((left.0, left.2, left.1), (right.0, right.2, right.1));
    (f.0, f.2, f.1)
}

/// Separable complex 2D FFT on an x-fastest `nx x ny` buffer.
#[derive(Clone)]
struct Fft2d<T: Real> {
    nx: usize,
    ny: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2d<T> {
    fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx,
            ny,
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
        }
    }

    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut col = vec![Complex::new(T::zero(), T::zero()); self.ny];
        for i in 0..self.nx {
            for (q, c) in col.iter_mut().enumerate() {
                *c = buf[q * self.nx + i];
            }
            cols.process(&mut col);
            for (q, c) in col.iter().enumerate() {
                buf[q * self.nx + i] = *c;
            }
        }
    }
}

/// BTTB discretization of the nonlocal operator on a [`Grid2D`].
#[derive(Clone)]
pub struct NonlocalOperator2D<T: Real> {
    k: usize,
    l: usize,
    k_hat: usize,
    l_hat: usize,
    /// `symbol[q * K + p]` couples cells offset by `(±p, ±q)`.
    symbol: Vec<T>,
    tail_weight: T,
    spectrum: Vec<T>,
    fft: Fft2d<T>,
}

impl<T: Real> fmt::Debug for NonlocalOperator2D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlocalOperator2D")
            .field("cells", &(self.k, self.l))
            .field("truncation", &(self.k_hat, self.l_hat))
            .field("tail_weight", &self.tail_weight)
            .field("diagonal", &self.symbol[0])
            .finish_non_exhaustive()
    }
}

/// Kernel weight `phi_kl` for `k, l >= 1`; an index equal to 1 stands for a
/// half-cell offset.
pub fn weight_2d<T: Real>(spec: &KernelSpec<T>, dx: T, dy: T, k: usize, l: usize) -> Result<T> {
    let half = T::lit(0.5);
    let ox = if k == 1 { dx * half } else { dx * T::from_usize_exact(k) };
    let oy = if l == 1 { dy * half } else { dy * T::from_usize_exact(l) };
    spec.influence((ox * ox + oy * oy).sqrt())
}

impl<T: Real> NonlocalOperator2D<T> {
    pub fn build(grid: &Grid2D<T>, spec: &KernelSpec<T>, k_hat: usize, l_hat: usize) -> Result<Self> {
        if spec.dim() != 2 {
            return Err(Error::invalid("kernel", "the 2D operator needs a 2D kernel"));
        }
        if k_hat < 1 || l_hat < 1 {
            return Err(Error::invalid("k_hat", "stencil truncations must be at least 1"));
        }
        let (k, l) = (grid.nx(), grid.ny());
        let (dx, dy) = (grid.dx(), grid.dy());
        let area = dx * dy;
        let mut symbol = vec![T::zero(); k * l];
        let mut sum = T::zero();
        for q in 1..=l_hat {
            for p in 1..=k_hat {
                let w = area * weight_2d(spec, dx, dy, p, q)?;
                sum += w;
                if p < k && q < l {
                    symbol[q * k + p] = w;
                }
            }
        }
        let tail = spec.tail_mass_2d((dx * T::from_usize_exact(k_hat), dy * T::from_usize_exact(l_hat)))?;
        if k_hat + 1 < k && l_hat + 1 < l {
            symbol[(l_hat + 1) * k + k_hat + 1] = tail;
        }
        symbol[0] = -T::lit(4.0) * (sum + tail);

        let (nx, ny) = (2 * k, 2 * l);
        let fft = Fft2d::new(nx, ny);
        let mut spectrum = vec![Complex::new(T::zero(), T::zero()); nx * ny];
        let wrap = |d: usize, n: usize, period: usize| -> Option<usize> {
            // circulant position p in [0, period) maps to offset |p| < n
            match d {
                d if d < n => Some(d),
                d if d > period - n => Some(period - d),
                _ => None,
            }
        };
        for q in 0..ny {
            let Some(oq) = wrap(q, l, ny) else { continue };
            for p in 0..nx {
                let Some(op) = wrap(p, k, nx) else { continue };
                spectrum[q * nx + p].re = symbol[oq * k + op];
            }
        }
        fft.run(&mut spectrum, false);
        let scale = T::one() / T::from_usize_exact(nx * ny);
        let spectrum: Vec<T> = spectrum.iter().map(|z| z.re * scale).collect();
        Ok(Self {
            k,
            l,
            k_hat,
            l_hat,
            symbol,
            tail_weight: tail,
            spectrum,
            fft,
        })
    }

    pub fn diagonal(&self) -> T {
        self.symbol[0]
    }

    pub fn tail_weight(&self) -> T {
        self.tail_weight
    }

    pub fn truncation(&self) -> (usize, usize) {
        (self.k_hat, self.l_hat)
    }

    /// Coupling between cells offset by `(dp, dq)`.
    pub fn coupling(&self, dp: usize, dq: usize) -> T {
        if dp < self.k && dq < self.l {
            self.symbol[dq * self.k + dp]
        } else {
            T::zero()
        }
    }

    /// Dense `KL x KL` matrix in the x-fastest ordering, row major.
    pub fn dense(&self) -> Vec<T> {
        let n = self.k * self.l;
        let mut g = vec![T::zero(); n * n];
        for r in 0..n {
            let (ri, rj) = (r % self.k, r / self.k);
            for c in 0..n {
                let (ci, cj) = (c % self.k, c / self.k);
                g[r * n + c] = self.coupling(ri.abs_diff(ci), rj.abs_diff(cj));
            }
        }
        g
    }

    fn convolve(&self, x: &[T], y: &[T]) -> (Vec<T>, Vec<T>) {
        let (k, l) = (self.k, self.l);
        assert_eq!(x.len(), k * l, "field size must match the grid");
        assert_eq!(y.len(), k * l, "field size must match the grid");
        let nx = 2 * k;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); nx * 2 * l];
        for j in 0..l {
            for i in 0..k {
                buf[j * nx + i] = Complex::new(x[j * k + i], y[j * k + i]);
            }
        }
        self.fft.run(&mut buf, false);
        for (z, s) in buf.iter_mut().zip(&self.spectrum) {
            *z = z.scale(*s);
        }
        self.fft.run(&mut buf, true);
        let mut gx = Vec::with_capacity(k * l);
        let mut gy = Vec::with_capacity(k * l);
        for j in 0..l {
            for i in 0..k {
                let z = buf[j * nx + i];
                gx.push(z.re);
                gy.push(z.im);
            }
        }
        (gx, gy)
    }

    /// `G f` with zero exterior values.
    pub fn apply(&self, f: &[T]) -> Vec<T> {
        let zeros = vec![T::zero(); f.len()];
        self.convolve(f, &zeros).0
    }

    /// `(G x, G y)` with one complex transform pair.
    pub fn apply_pair(&self, x: &[T], y: &[T]) -> (Vec<T>, Vec<T>) {
        self.convolve(x, y)
    }
}

/// Momentum sources per unit `dt / (dx dy)`:
/// `s_nu = dx dy (rho * G m_nu - m_nu * G rho)` for `nu = 1, 2`.
pub fn source_2d<T: Real>(
    state: &ConservedField2D<T>,
    op: &NonlocalOperator2D<T>,
    cell_area: T,
) -> (Vec<T>, Vec<T>) {
    let (g1, g2) = op.apply_pair(&state.m1, &state.m2);
    let grho = op.apply(&state.rho);
    let n = state.len();
    let mut s1 = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    for c in 0..n {
        let r = state.rho[c];
        s1.push(cell_area * (r * g1[c] - state.m1[c] * grho[c]));
        s2.push(cell_area * (r * g2[c] - state.m2[c] * grho[c]));
    }
    (s1, s2)
}

/// Time derivative `-dh1/dx - dh2/dy + (rho G m - m G rho)` with vacuum
/// outside the mesh.
pub fn fv_rhs_2d<T: Real>(
    state: &ConservedField2D<T>,
    grid: &Grid2D<T>,
    op: &NonlocalOperator2D<T>,
) -> ConservedField2D<T> {
    let (k, l) = (grid.nx(), grid.ny());
    let (dx, dy) = (grid.dx(), grid.dy());
    let zero = T::zero();
    let cell = |i: isize, j: isize| -> (T, T, T) {
        if i < 0 || j < 0 || i as usize >= k || j as usize >= l {
            (zero, zero, zero)
        } else {
            let c = j as usize * k + i as usize;
            (state.rho[c], state.m1[c], state.m2[c])
        }
    };
    let (s1, s2) = source_2d(state, op, T::one());
    let mut out = ConservedField2D::zeros(k * l);
    let (inv_dx, inv_dy) = (T::one() / dx, T::one() / dy);
    for j in 0..l as isize {
        let mut west = godunov_flux_2d_x(cell(-1, j), cell(0, j));
        for i in 0..k as isize {
            let east = godunov_flux_2d_x(cell(i, j), cell(i + 1, j));
            let south = godunov_flux_2d_y(cell(i, j - 1), cell(i, j));
            let north = godunov_flux_2d_y(cell(i, j), cell(i, j + 1));
            let c = j as usize * k + i as usize;
            out.rho[c] = -(east.0 - west.0) * inv_dx - (north.0 - south.0) * inv_dy;
            out.m1[c] = -(east.1 - west.1) * inv_dx - (north.1 - south.1) * inv_dy + s1[c];
            out.m2[c] = -(east.2 - west.2) * inv_dx - (north.2 - south.2) * inv_dy + s2[c];
            west = east;
        }
    }
    out
}

/// Recorded solution of a 2D run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EulerSolution2D<T> {
    pub grid: Grid2D<T>,
    pub alpha: T,
    pub times: Vec<T>,
    pub fields: Vec<ConservedField2D<T>>,
    pub stats: RunStats<T>,
}

/// Cell averages of `rho0`, `rho0 u0`, `rho0 v0` by 5 x 5 Gauss quadrature.
pub fn project_initial_2d<T: Real>(
    grid: &Grid2D<T>,
    rho0: impl Fn(T, T) -> T,
    vel0: impl Fn(T, T) -> (T, T),
) -> ConservedField2D<T> {
    let (dx, dy) = (grid.dx(), grid.dy());
    let half = T::lit(0.5);
    let mut f = ConservedField2D::zeros(grid.len());
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let (cx, cy) = grid.center(i, j);
            let (mut r, mut a, mut b) = (T::zero(), T::zero(), T::zero());
            for (xn, xw) in GAUSS5_NODES.iter().zip(&GAUSS5_WEIGHTS) {
                for (yn, yw) in GAUSS5_NODES.iter().zip(&GAUSS5_WEIGHTS) {
                    let x = cx + dx * half * T::lit(*xn);
                    let y = cy + dy * half * T::lit(*yn);
                    let w = T::lit(xw * yw);
                    let d = rho0(x, y);
                    let (u, v) = vel0(x, y);
                    r += w * d;
                    a += w * d * u;
                    b += w * d * v;
                }
            }
            let c = grid.index(i, j);
            let quarter = T::lit(0.25);
            f.rho[c] = r * quarter;
            f.m1[c] = a * quarter;
            f.m2[c] = b * quarter;
        }
    }
    f
}

/// Solves the 2D system from analytic initial data, recording `sample_times`.
pub fn solve_euler_2d<T: Real>(
    rho0: impl Fn(T, T) -> T,
    vel0: impl Fn(T, T) -> (T, T),
    grid: &Grid2D<T>,
    spec: &KernelSpec<T>,
    params: &EulerParams<T>,
    sample_times: &[T],
) -> Result<EulerSolution2D<T>> {
    params.control.validate()?;
    check_sample_times(sample_times, params.t_end)?;
    let initial = project_initial_2d(grid, rho0, vel0);
    let area = grid.dx() * grid.dy();
    let mass = initial.total_mass(area);
    if (mass - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::invalid(
            "density",
            format!("initial density must integrate to 1, got {mass}"),
        ));
    }
    initial.validate(0, T::zero())?;
    let op = NonlocalOperator2D::build(
        grid,
        spec,
        params.k_hat.unwrap_or(grid.nx()),
        params.l_hat.unwrap_or(grid.ny()),
    )?;
    let diag = op.diagonal().abs();
    let h = grid.dx().min(grid.dy());
    let control = params.control;
    let pick = |w: &ConservedField2D<T>| {
        let (u, v) = w.velocity();
        let speed = u.iter().zip(&v).fold(T::zero(), |a, (p, q)| a.max(p.abs() + q.abs()));
        let rho_max = w.rho.iter().fold(T::zero(), |a, r| a.max(*r));
        (control.choose(speed / h, diag * rho_max), speed / h)
    };
    let step = |w: &ConservedField2D<T>, dt: T, n: usize, t: T| {
        let next = ssp_rk2_step(w, dt, |s: &ConservedField2D<T>| Ok(fv_rhs_2d(s, grid, &op)))?;
        next.validate(n, t)?;
        Ok(next)
    };
    let (fields, stats) = march(initial, params.t_end, sample_times, &control, pick, step)?;
    Ok(EulerSolution2D {
        grid: *grid,
        alpha: spec.alpha(),
        times: sample_times.to_vec(),
        fields,
        stats,
    })
}

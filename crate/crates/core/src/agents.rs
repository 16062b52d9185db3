//! Agent-level Cucker-Smale dynamics with the singular influence function.
//!
//! Particles are placed deterministically in proportion to an initial density,
//! given velocities from an initial velocity field, and advanced with a
//! velocity-Verlet integrator. The alignment force is an exact `O(N^2)` pair
//! sum evaluated in a fixed order, so runs are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::quad;
use crate::scalar::Real;

/// Axis-aligned simulation box `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BoxDomain<T, const D: usize> {
    #[serde(with = "serde_arrays")]
    pub lower: [T; D],
    #[serde(with = "serde_arrays")]
    pub upper: [T; D],
}

/// serde support for `[T; D]` with a const generic length.
pub(crate) mod serde_arrays {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize, const D: usize>(
        v: &[T; D],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, T: Deserialize<'de>, const D: usize>(
        d: De,
    ) -> Result<[T; D], De::Error> {
        let v = Vec::<T>::deserialize(d)?;
        let len = v.len();
        v.try_into()
            .map_err(|_| De::Error::custom(format!("expected {D} components, got {len}")))
    }
}

impl<T: Real, const D: usize> BoxDomain<T, D> {
    pub fn new(lower: [T; D], upper: [T; D]) -> Result<Self> {
        for d in 0..D {
            if !(upper[d] > lower[d]) {
                return Err(Error::invalid(
                    "domain",
                    format!("axis {d}: upper bound {} must exceed lower bound {}", upper[d], lower[d]),
                ));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn diameter(&self) -> T {
        (0..D)
            .map(|d| (self.upper[d] - self.lower[d]).powi(2))
            .sum::<T>()
            .sqrt()
    }

    pub fn contains(&self, p: &[T; D]) -> bool {
        (0..D).all(|d| p[d] >= self.lower[d] && p[d] <= self.upper[d])
    }

    pub fn volume(&self) -> T {
        (0..D).map(|d| self.upper[d] - self.lower[d]).fold(T::one(), |a, b| a * b)
    }
}

/// Default pair-distance floor: `1e-4` times the domain diameter.
pub fn default_r_min<T: Real, const D: usize>(domain: &BoxDomain<T, D>) -> T {
    T::lit(1e-4) * domain.diameter()
}

/// Positions and velocities of `N` agents, plus the force from the last
/// evaluation (needed by the next Verlet half kick).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble<T, const D: usize> {
    positions: Vec<[T; D]>,
    velocities: Vec<[T; D]>,
    acceleration: Option<(Vec<[T; D]>, T)>,
}

impl<T: Real, const D: usize> ParticleEnsemble<T, D> {
    pub fn new(positions: Vec<[T; D]>, velocities: Vec<[T; D]>, domain: &BoxDomain<T, D>) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(Error::invalid(
                "velocities",
                format!("{} velocities for {} positions", velocities.len(), positions.len()),
            ));
        }
        if positions.len() < 2 {
            return Err(Error::invalid("positions", "need at least two particles"));
        }
        if let Some(i) = positions.iter().position(|p| !domain.contains(p)) {
            return Err(Error::invalid(
                "positions",
                format!("particle {i} at {:?} lies outside the domain", positions[i]),
            ));
        }
        Ok(Self {
            positions,
            velocities,
            acceleration: None,
        })
    }

    /// Ensemble with velocities drawn from the field `v0` at each position.
    pub fn with_velocity_field(
        positions: Vec<[T; D]>,
        domain: &BoxDomain<T, D>,
        v0: impl Fn(&[T; D]) -> [T; D],
    ) -> Result<Self> {
        let velocities = positions.iter().map(&v0).collect();
        Self::new(positions, velocities, domain)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[T; D]] {
        &self.positions
    }

    pub fn velocities(&self) -> &[[T; D]] {
        &self.velocities
    }

    pub fn mean_velocity(&self) -> [T; D] {
        mean(&self.velocities)
    }

    /// Overwrites every velocity with `v0(x_i)`.
    pub fn assign_velocities(&mut self, v0: impl Fn(&[T; D]) -> [T; D]) {
        for (v, x) in self.velocities.iter_mut().zip(&self.positions) {
            *v = v0(x);
        }
        self.acceleration = None;
    }

    /// One velocity-Verlet step:
    /// `v' = v + a dt/2`, `x += v' dt`, `a = F(x, v')`, `v = v' + a dt/2`.
    pub fn velocity_verlet_step(&mut self, spec: &KernelSpec<T>, dt: T, r_min: T) -> Result<()> {
        if !(dt > T::zero()) {
            return Err(Error::invalid("dt", format!("time step must be positive, got {dt}")));
        }
        let half = dt * T::lit(0.5);
        let (acc, _) = match self.acceleration.take() {
            Some(a) => a,
            None => pair_force(&self.positions, &self.velocities, spec, r_min)?,
        };
        for ((x, v), a) in self.positions.iter_mut().zip(self.velocities.iter_mut()).zip(&acc) {
            for d in 0..D {
                v[d] += a[d] * half;
                x[d] += v[d] * dt;
            }
        }
        let (acc, rate) = pair_force(&self.positions, &self.velocities, spec, r_min)?;
        for (v, a) in self.velocities.iter_mut().zip(&acc) {
            for d in 0..D {
                v[d] += a[d] * half;
            }
        }
        self.acceleration = Some((acc, rate));
        Ok(())
    }

    /// Largest relaxation rate `max_i (1/N) sum_j phi_ij` at the current positions.
    pub fn stiffness(&mut self, spec: &KernelSpec<T>, r_min: T) -> Result<T> {
        if self.acceleration.is_none() {
            self.acceleration = Some(pair_force(&self.positions, &self.velocities, spec, r_min)?);
        }
        Ok(self.acceleration.as_ref().map_or(T::zero(), |a| a.1))
    }

    fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        for (i, (x, v)) in self.positions.iter().zip(&self.velocities).enumerate() {
            if x.iter().any(|c| !c.is_finite()) {
                return Some((i, "position"));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Some((i, "velocity"));
            }
        }
        None
    }
}

fn mean<T: Real, const D: usize>(vs: &[[T; D]]) -> [T; D] {
    let mut m = [T::zero(); D];
    for v in vs {
        for d in 0..D {
            m[d] += v[d];
        }
    }
    let n = T::from_usize_exact(vs.len().max(1));
    m.map(|c| c / n)
}

/// Componentwise `max_i |v_i - mean(v)|`.
pub fn velocity_spread<T: Real, const D: usize>(velocities: &[[T; D]]) -> [T; D] {
    let m = mean(velocities);
    let mut spread = [T::zero(); D];
    for v in velocities {
        for d in 0..D {
            spread[d] = spread[d].max((v[d] - m[d]).abs());
        }
    }
    spread
}

/// `a_i = (1/N) sum_{j != i} phi(max(|x_i - x_j|, r_min)) (v_j - v_i)`.
///
/// Each unordered pair is weighted once and applied to both ends. Since the
/// pair weight and velocity difference are exactly antisymmetric in floating
/// point, every `a_i` still receives its terms in ascending `j` order, which
/// is the same result a per-row loop produces.
pub fn alignment_acceleration<T: Real, const D: usize>(
    positions: &[[T; D]],
    velocities: &[[T; D]],
    spec: &KernelSpec<T>,
    r_min: T,
) -> Result<Vec<[T; D]>> {
    pair_force(positions, velocities, spec, r_min).map(|(acc, _)| acc)
}

/// Alignment acceleration together with the largest relaxation rate
/// `max_i (1/N) sum_{j != i} phi_ij`.
fn pair_force<T: Real, const D: usize>(
    positions: &[[T; D]],
    velocities: &[[T; D]],
    spec: &KernelSpec<T>,
    r_min: T,
) -> Result<(Vec<[T; D]>, T)> {
    if spec.dim() != D {
        return Err(Error::invalid(
            "kernel",
            format!("kernel dimension {} does not match particle dimension {D}", spec.dim()),
        ));
    }
    if !(r_min >= T::zero()) {
        return Err(Error::invalid("r_min", format!("must be non-negative, got {r_min}")));
    }
    let n = positions.len();
    let r_min2 = r_min * r_min;
    let mut acc = vec![[T::zero(); D]; n];
    let mut rate = vec![T::zero(); n];
    for i in 0..n {
        let xi = positions[i];
        let vi = velocities[i];
        let mut ai = acc[i];
        let mut wi = rate[i];
        for j in (i + 1)..n {
            let xj = &positions[j];
            let mut r2 = T::zero();
            for d in 0..D {
                let dx = xj[d] - xi[d];
                r2 += dx * dx;
            }
            if r2 < r_min2 || r2 == T::zero() {
                if r_min2 == T::zero() {
                    return Err(Error::Domain(format!(
                        "particles {i} and {j} coincide and no distance floor is set"
                    )));
                }
                r2 = r_min2;
            }
            let w = spec.influence_from_sq(r2);
            wi += w;
            rate[j] += w;
            let vj = &velocities[j];
            let aj = &mut acc[j];
            for d in 0..D {
                let f = w * (vj[d] - vi[d]);
                ai[d] += f;
                aj[d] -= f;
            }
        }
        acc[i] = ai;
        rate[i] = wi;
    }
    let inv_n = T::one() / T::from_usize_exact(n);
    for a in &mut acc {
        for c in a.iter_mut() {
            *c *= inv_n;
        }
    }
    let max_rate = rate.iter().fold(T::zero(), |m, &w| m.max(w)) * inv_n;
    Ok((acc, max_rate))
}

/// Splits `n` among bins proportionally to `mass` by the largest-remainder
/// rule: floors of the quotas, then one extra to the largest fractional parts
/// (ties to the lower index). The result always sums to `n`.
pub fn largest_remainder<T: Real>(mass: &[T], n: usize) -> Result<Vec<usize>> {
    if mass.iter().any(|m| !(*m >= T::zero())) {
        return Err(Error::invalid("density", "bin masses must be non-negative"));
    }
    let total: T = mass.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::invalid("density", "total mass must be positive"));
    }
    let nf = T::from_usize_exact(n);
    let quotas: Vec<T> = mass.iter().map(|m| *m / total * nf).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor().to_usize().unwrap_or(0)).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = n.saturating_sub(assigned);
    for &k in order.iter().cycle().take(remaining.max(1) * mass.len()) {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    Ok(counts)
}

const MASS_TOLERANCE: f64 = 1e-6;

fn check_unit_mass<T: Real>(masses: &[T]) -> Result<()> {
    let total: T = masses.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(MASS_TOLERANCE) {
        return Err(Error::invalid(
            "density",
            format!("initial density must integrate to 1, got {total}"),
        ));
    }
    Ok(())
}

/// Deterministic proportional sampling on an interval.
///
/// The interval is cut into `subdomains` equal pieces; each receives
/// `round(N rho_p)` particles (largest-remainder corrected) placed at the
/// midpoints of that many equal sub-pieces.
pub fn sample_particles_1d<T: Real>(
    density: impl Fn(T) -> T,
    domain: &BoxDomain<T, 1>,
    subdomains: usize,
    n: usize,
) -> Result<Vec<[T; 1]>> {
    if subdomains == 0 {
        return Err(Error::invalid("subdomains", "need at least one subdomain"));
    }
    if n < subdomains {
        return Err(Error::invalid(
            "n",
            format!("particle count {n} is smaller than the subdomain count {subdomains}"),
        ));
    }
    let a = domain.lower[0];
    let width = (domain.upper[0] - a) / T::from_usize_exact(subdomains);
    let tol = T::default_quad_tol();
    let masses = (0..subdomains)
        .map(|p| {
            let lo = a + width * T::from_usize_exact(p);
            quad::integrate(&density, lo, lo + width, tol, tol)
        })
        .collect::<Result<Vec<T>>>()?;
    check_unit_mass(&masses)?;
    let counts = largest_remainder(&masses, n)?;
    let mut positions = Vec::with_capacity(n);
    for (p, &np) in counts.iter().enumerate() {
        let lo = a + width * T::from_usize_exact(p);
        let sub = width / T::from_usize_exact(np.max(1));
        for q in 0..np {
            positions.push([lo + sub * (T::from_usize_exact(q) + T::lit(0.5))]);
        }
    }
    Ok(positions)
}

/// 2D analogue of [`sample_particles_1d`] on a `cells x cells` grid.
///
/// Inside a cell holding `N_p` particles the sites are the sub-cell centers
/// of the most square `cols x rows` grid with `cols = ceil(sqrt(N_p))`,
/// `rows = ceil(N_p / cols)`, filled row by row.
pub fn sample_particles_2d<T: Real>(
    density: impl Fn([T; 2]) -> T,
    domain: &BoxDomain<T, 2>,
    cells: usize,
    n: usize,
) -> Result<Vec<[T; 2]>> {
    if cells == 0 {
        return Err(Error::invalid("subdomains", "need at least one subdomain"));
    }
    if n < cells * cells {
        return Err(Error::invalid(
            "n",
            format!("particle count {n} is smaller than the cell count {}", cells * cells),
        ));
    }
    let [ax, ay] = domain.lower;
    let hx = (domain.upper[0] - ax) / T::from_usize_exact(cells);
    let hy = (domain.upper[1] - ay) / T::from_usize_exact(cells);
    let tol = T::lit(1e-10).max(T::default_quad_tol());
    let mut masses = Vec::with_capacity(cells * cells);
    for j in 0..cells {
        let y0 = ay + hy * T::from_usize_exact(j);
        for i in 0..cells {
            let x0 = ax + hx * T::from_usize_exact(i);
            let m = quad::integrate(
                |y| {
                    quad::integrate(|x| density([x, y]), x0, x0 + hx, tol, tol * T::lit(1e-3))
                        .unwrap_or(T::nan())
                },
                y0,
                y0 + hy,
                tol,
                tol,
            )?;
            masses.push(m);
        }
    }
    check_unit_mass(&masses)?;
    let counts = largest_remainder(&masses, n)?;
    let mut positions = Vec::with_capacity(n);
    for j in 0..cells {
        let y0 = ay + hy * T::from_usize_exact(j);
        for i in 0..cells {
            let x0 = ax + hx * T::from_usize_exact(i);
            let np = counts[j * cells + i];
            if np == 0 {
                continue;
            }
            let cols = (np as f64).sqrt().ceil() as usize;
            let rows = np.div_ceil(cols);
            let sx = hx / T::from_usize_exact(cols);
            let sy = hy / T::from_usize_exact(rows);
            for k in 0..np {
                let (r, c) = (k / cols, k % cols);
                positions.push([
                    x0 + sx * (T::from_usize_exact(c) + T::lit(0.5)),
                    y0 + sy * (T::from_usize_exact(r) + T::lit(0.5)),
                ]);
            }
        }
    }
    Ok(positions)
}

/// Positions and velocities at one sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T, const D: usize> {
    pub time: T,
    pub positions: Vec<[T; D]>,
    pub velocities: Vec<[T; D]>,
}

/// Recorded agent trajectories at the requested sample times.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog<T, const D: usize> {
    pub alpha_used: T,
    pub dt: T,
    pub seed: u64,
    pub domain: BoxDomain<T, D>,
    /// Largest number of Verlet sub-steps taken within one step.
    pub max_substeps: usize,
    pub snapshots: Vec<Snapshot<T, D>>,
}

impl<T: Real, const D: usize> TrajectoryLog<T, D> {
    pub fn sample_times(&self) -> Vec<T> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn particle_count(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.positions.len())
    }

    /// Checks the recorded log is well formed: increasing times, constant N.
    pub fn validate(&self) -> Result<()> {
        let n = self.particle_count();
        for w in self.snapshots.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Format("sample times must be strictly increasing".into()));
            }
        }
        if let Some(s) = self
            .snapshots
            .iter()
            .find(|s| s.positions.len() != n || s.velocities.len() != n)
        {
            return Err(Error::Format(format!(
                "snapshot at t = {} does not hold {n} particles",
                s.time
            )));
        }
        Ok(())
    }
}

const MAX_SUBSTEPS: usize = 1 << 20;

/// Integration settings for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AgentRunParams<T> {
    pub dt: T,
    pub t_end: T,
    pub r_min: T,
    #[serde(default)]
    pub seed: u64,
    /// Bound on `h * stiffness` per Verlet sub-step; `None` disables sub-stepping.
    #[serde(default = "default_stiffness_limit")]
    pub stiffness_limit: Option<T>,
}

fn default_stiffness_limit<T: Real>() -> Option<T> {
    Some(T::lit(DEFAULT_STIFFNESS_LIMIT))
}

pub const DEFAULT_STIFFNESS_LIMIT: f64 = 0.5;

impl<T: Real> AgentRunParams<T> {
    pub fn new(dt: T, t_end: T, r_min: T) -> Self {
        Self {
            dt,
            t_end,
            r_min,
            seed: 0,
            stiffness_limit: default_stiffness_limit(),
        }
    }
}

/// Advances `ensemble` to `t_end`, recording a snapshot at each sample time.
///
/// Sample times are quantized to the nearest step; two sample times falling
/// on the same step, or times outside `[0, t_end]`, are rejected.
///
/// With a stiffness limit set, each step of length `dt` is split into
/// `ceil(dt * S / limit)` equal Verlet sub-steps, where `S` is the relaxation
/// rate at the start of the step. The alignment term is stiff when particles
/// crowd together under the singular kernel.
pub fn simulate<T: Real, const D: usize>(
    ensemble: ParticleEnsemble<T, D>,
    domain: &BoxDomain<T, D>,
    spec: &KernelSpec<T>,
    params: &AgentRunParams<T>,
    sample_times: &[T],
) -> Result<TrajectoryLog<T, D>> {
    simulate_observed(ensemble, domain, spec, params, sample_times, |_, _| {})
}

/// [`simulate`] calling `observe(snapshot, max_substeps_so_far)` as each
/// snapshot is recorded.
pub fn simulate_observed<T: Real, const D: usize>(
    mut ensemble: ParticleEnsemble<T, D>,
    domain: &BoxDomain<T, D>,
    spec: &KernelSpec<T>,
    params: &AgentRunParams<T>,
    sample_times: &[T],
    mut observe: impl FnMut(&Snapshot<T, D>, usize),
) -> Result<TrajectoryLog<T, D>> {
    let dt = params.dt;
    if !(dt > T::zero()) {
        return Err(Error::invalid("dt", format!("time step must be positive, got {dt}")));
    }
    if !(params.t_end >= T::zero()) {
        return Err(Error::invalid("t_end", "must be non-negative"));
    }
    let total_steps = (params.t_end / dt).round().to_usize().unwrap_or(0);
    let mut sample_steps = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        let k = (t / dt).round();
        if t < T::zero() || k.to_usize().is_none_or(|k| k > total_steps) {
            return Err(Error::invalid(
                "sample_times",
                format!("sample time {t} lies outside [0, {}]", params.t_end),
            ));
        }
        let k = k.to_usize().unwrap_or(0);
        if sample_steps.last().is_some_and(|&prev| k <= prev) {
            return Err(Error::invalid(
                "sample_times",
                format!("sample time {t} is not strictly after the previous one at dt = {dt}"),
            ));
        }
        sample_steps.push(k);
    }

    if let Some(limit) = params.stiffness_limit {
        if !(limit > T::zero()) {
            return Err(Error::invalid("stiffness_limit", format!("must be positive, got {limit}")));
        }
    }
    let mut snapshots = Vec::with_capacity(sample_steps.len());
    let mut max_substeps = 1;
    let mut next = 0;
    for step in 0..=total_steps {
        if step > 0 {
            let subs = match params.stiffness_limit {
                Some(limit) => {
                    let s = ensemble.stiffness(spec, params.r_min)?;
                    (dt * s / limit).ceil().to_usize().unwrap_or(usize::MAX).max(1)
                }
                None => 1,
            };
            if subs > MAX_SUBSTEPS {
                return Err(Error::NonFinite {
                    step,
                    what: format!("alignment stiffness ({subs} sub-steps needed)"),
                });
            }
            max_substeps = max_substeps.max(subs);
            let h = dt / T::from_usize_exact(subs);
            for _ in 0..subs {
                ensemble.velocity_verlet_step(spec, h, params.r_min)?;
            }
            if let Some((i, what)) = ensemble.first_non_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("{what} of particle {i}"),
                });
            }
        }
        while next < sample_steps.len() && sample_steps[next] == step {
            snapshots.push(Snapshot {
                time: sample_times[next],
                positions: ensemble.positions.clone(),
                velocities: ensemble.velocities.clone(),
            });
            if let Some(s) = snapshots.last() {
                observe(s, max_substeps);
            }
            next += 1;
        }
    }

    Ok(TrajectoryLog {
        alpha_used: spec.alpha(),
        dt,
        seed: params.seed,
        domain: *domain,
        max_substeps,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> BoxDomain<f64, 1> {
        BoxDomain::new([0.0], [1.0]).unwrap()
    }

    #[test]
    fn uniform_midpoints() {
        let p = sample_particles_1d(|_| 1.0, &unit(), 2, 4).unwrap();
        let xs: Vec<f64> = p.iter().map(|x| x[0]).collect();
        for (a, b) in xs.iter().zip([0.125, 0.375, 0.625, 0.875]) {
            assert_relative_eq!(*a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn rejects_unnormalized_density() {
        assert!(sample_particles_1d(|_| 2.0, &unit(), 4, 16).is_err());
        assert!(sample_particles_1d(|_| 1.0, &unit(), 8, 4).is_err());
    }

    #[test]
    fn largest_remainder_always_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let bins = rng.random_range(1..40);
            let n = rng.random_range(bins..5000);
            let mass: Vec<f64> = (0..bins).map(|_| rng.random::<f64>()).collect();
            let counts = largest_remainder(&mass, n).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), n);
            let total: f64 = mass.iter().sum();
            for (c, m) in counts.iter().zip(&mass) {
                assert!((*c as f64 - m / total * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn uniform_2d_single_cell() {
        let dom = BoxDomain::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let p = sample_particles_2d(|_| 1.0, &dom, 1, 4).unwrap();
        assert_eq!(p, vec![[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]);
    }

    #[test]
    fn zero_velocity_field() {
        let pos = sample_particles_1d(|_| 1.0, &unit(), 2, 8).unwrap();
        let e = ParticleEnsemble::with_velocity_field(pos, &unit(), |_| [0.0]).unwrap();
        assert!(e.velocities().iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn two_particle_force() {
        let k = KernelSpec::new(0.5, 1).unwrap();
        let a = alignment_acceleration(&[[0.0], [1.0]], &[[0.0], [1.0]], &k, 0.0).unwrap();
        let expect = k.normalization_constant() / 2.0;
        assert_relative_eq!(a[0][0], expect, max_relative = 1e-14);
        assert_eq!(a[1][0], -a[0][0]);
    }

    #[test]
    fn equal_velocities_give_zero_force() {
        let k = KernelSpec::new(1.2, 2).unwrap();
        let pos: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 0.1, (i % 3) as f64 * 0.2]).collect();
        let vel = vec![[0.3, -0.2]; 20];
        let a = alignment_acceleration(&pos, &vel, &k, 0.0).unwrap();
        assert!(a.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn coincident_particles_need_floor() {
        let k = KernelSpec::new(0.5, 1).unwrap();
        let pos = [[0.5], [0.5]];
        let vel = [[0.0], [1.0]];
        assert!(alignment_acceleration(&pos, &vel, &k, 0.0).is_err());
        let a = alignment_acceleration(&pos, &vel, &k, 1e-3).unwrap();
        assert_relative_eq!(a[0][0], k.influence(1e-3).unwrap() / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let k = KernelSpec::new(0.5, 2).unwrap();
        assert!(alignment_acceleration(&[[0.0], [1.0]], &[[0.0], [1.0]], &k, 0.0).is_err());
    }

    #[test]
    fn verlet_two_particle_hand_step() {
        let spec = KernelSpec::new(0.5, 1).unwrap();
        let dom = BoxDomain::new([-1.0], [2.0]).unwrap();
        let mut e = ParticleEnsemble::new(vec![[0.0], [1.0]], vec![[0.0], [1.0]], &dom).unwrap();
        let dt = 0.01;
        e.velocity_verlet_step(&spec, dt, 0.0).unwrap();
        // hand evaluation
        let phi = |r: f64| spec.normalization_constant() * r.powf(-1.5);
        let a0 = phi(1.0) / 2.0;
        let (vh1, vh2) = (a0 * dt / 2.0, 1.0 - a0 * dt / 2.0);
        let (x1, x2) = (vh1 * dt, 1.0 + vh2 * dt);
        let a1 = phi(x2 - x1) * (vh2 - vh1) / 2.0;
        let (v1, v2) = (vh1 + a1 * dt / 2.0, vh2 - a1 * dt / 2.0);
        assert_relative_eq!(e.positions()[0][0], x1, max_relative = 1e-13);
        assert_relative_eq!(e.positions()[1][0], x2, max_relative = 1e-13);
        assert_relative_eq!(e.velocities()[0][0], v1, max_relative = 1e-13);
        assert_relative_eq!(e.velocities()[1][0], v2, max_relative = 1e-13);
    }

    #[test]
    fn verlet_converges_first_order() {
        // The force sees the half-step velocity, so halving dt halves the error.
        let spec = KernelSpec::new(0.8, 1).unwrap();
        let dom = BoxDomain::new([-2.0], [2.0]).unwrap();
        let run = |dt: f64| {
            let x: Vec<[f64; 1]> = (0..6).map(|i| [-0.5 + 0.2 * i as f64]).collect();
            let v: Vec<[f64; 1]> = (0..6).map(|i| [0.3 * (i as f64 * 1.7).sin()]).collect();
            let mut e = ParticleEnsemble::new(x, v, &dom).unwrap();
            let steps = (0.4 / dt).round() as usize;
            for _ in 0..steps {
                e.velocity_verlet_step(&spec, dt, 0.0).unwrap();
            }
            e.velocities()[0][0]
        };
        let reference = run(1e-5);
        let e1 = (run(0.02) - reference).abs();
        let e2 = (run(0.01) - reference).abs();
        let ratio = e1 / e2;
        assert!(ratio > 1.7 && ratio < 2.3, "ratio {ratio}");
    }

    #[test]
    fn fixed_point_at_rest() {
        let spec = KernelSpec::new(0.5, 1).unwrap();
        let pos = sample_particles_1d(|_| 1.0, &unit(), 4, 16).unwrap();
        let e0 = ParticleEnsemble::with_velocity_field(pos, &unit(), |_| [0.0]).unwrap();
        let mut e = e0.clone();
        for _ in 0..10 {
            e.velocity_verlet_step(&spec, 1e-3, 1e-4).unwrap();
        }
        assert_eq!(e.positions(), e0.positions());
        assert_eq!(e.velocities(), e0.velocities());
    }

    #[test]
    fn simulate_with_zero_horizon() {
        let spec = KernelSpec::new(0.5, 1).unwrap();
        let pos = sample_particles_1d(|_| 1.0, &unit(), 4, 16).unwrap();
        let e = ParticleEnsemble::with_velocity_field(pos, &unit(), |x| [x[0] - 0.5]).unwrap();
        let params = AgentRunParams::new(1e-3, 0.0, 1e-4);
        let log = simulate(e.clone(), &unit(), &spec, &params, &[0.0]).unwrap();
        assert_eq!(log.snapshots.len(), 1);
        assert_eq!(log.snapshots[0].positions, e.positions());
        assert!(simulate(e.clone(), &unit(), &spec, &params, &[0.5]).is_err());
        let params = AgentRunParams { t_end: 0.01, ..params };
        assert!(simulate(e, &unit(), &spec, &params, &[0.005, 0.0052]).is_err());
    }

    #[test]
    fn simulate_reports_blowup_step() {
        let spec = KernelSpec::new(0.5, 1).unwrap();
        let dom = BoxDomain::new([0.0], [1.0]).unwrap();
        let e = ParticleEnsemble::new(vec![[0.2], [0.8]], vec![[0.0], [f64::INFINITY]], &dom).unwrap();
        let params = AgentRunParams { stiffness_limit: None, ..AgentRunParams::new(1.0, 3.0, 1e-4) };
        match simulate(e, &dom, &spec, &params, &[0.0]) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected non-finite failure, got {other:?}"),
        }
    }
}

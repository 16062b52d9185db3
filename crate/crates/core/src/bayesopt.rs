//! Bayesian optimization of a scalar loss over an interval: expected
//! improvement on a Gaussian process surrogate, maximized by DIRECT.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::{FitOptions, GpModel};
use crate::scalar::Real;
use crate::special::{normal_cdf, normal_pdf};

const SIGMA_EPS: f64 = 1e-12;
const DUPLICATE_RADIUS: f64 = 1e-6;
const DUPLICATE_SHIFT: f64 = 1e-3;
const MAX_CONSECUTIVE_FAILURES: usize = 3;

/// `EI(x) = (f* - m) Phi(z) + s phi(z)`, `z = (f* - m) / s`, with `f*` the
/// smallest observed output. For `s <= 1e-12` returns `max(f* - m, 0)`.
pub fn expected_improvement<T: Real>(model: &GpModel<T>, x: T) -> T {
    let (m, s) = model.predict_1d(x);
    ei_from_moments(model.best_output(), m, s)
}

/// Expected improvement below `best` of a normal variable `N(m, s^2)`.
pub fn ei_from_moments<T: Real>(best: T, m: T, s: T) -> T {
    let gap = best - m;
    if s <= T::lit(SIGMA_EPS) {
        return gap.max(T::zero());
    }
    let z = gap / s;
    (gap * normal_cdf(z) + s * normal_pdf(z)).max(T::zero())
}

/// Settings for the dividing-rectangles search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DirectOptions<T> {
    /// Balance parameter of the potential-optimality test.
    pub epsilon: T,
    pub max_evaluations: usize,
    /// Stop once the best interval is narrower than this fraction of the
    /// bounds. Zero runs the full evaluation budget.
    pub min_width: T,
}

impl<T: Real> Default for DirectOptions<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(1e-4),
            max_evaluations: 200,
            min_width: T::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Interval<T> {
    center: T,
    half: T,
    value: T,
}

fn check_bounds<T: Real>(bounds: (T, T)) -> Result<()> {
    if !(bounds.0.is_finite() && bounds.1.is_finite() && bounds.1 > bounds.0) {
        return Err(Error::invalid(
            "bounds",
            format!("need a finite interval with lo < hi, got [{}, {}]", bounds.0, bounds.1),
        ));
    }
    Ok(())
}

/// Indices of potentially optimal intervals for minimization of `value`.
///
/// One representative per distinct size (smallest value, lowest index), then
/// the lower-right convex hull from the overall minimum, then the epsilon test
/// `f_j - K_j h_j <= f_min - eps |f_min|` with `K_j` the slope to the next hull point.
fn potentially_optimal<T: Real>(ivs: &[Interval<T>], eps: T) -> Vec<usize> {
    let mut reps: Vec<usize> = Vec::new();
    for (i, iv) in ivs.iter().enumerate() {
        match reps.iter_mut().find(|r| ivs[**r].half == iv.half) {
            Some(r) => {
                if iv.value < ivs[*r].value {
                    *r = i;
                }
            }
            None => reps.push(i),
        }
    }
    reps.sort_by(|&a, &b| ivs[a].half.partial_cmp(&ivs[b].half).unwrap_or(std::cmp::Ordering::Equal));
    let f_min = reps.iter().map(|&r| ivs[r].value).fold(T::infinity(), T::min);
    // largest size attaining the minimum
    let start = reps
        .iter()
        .rposition(|&r| ivs[r].value == f_min)
        .unwrap_or(0);
    let mut hull = vec![start];
    let mut cur = start;
    while cur + 1 < reps.len() {
        let (hc, fc) = (ivs[reps[cur]].half, ivs[reps[cur]].value);
        let mut next = cur + 1;
        let mut best = T::infinity();
        for k in (cur + 1)..reps.len() {
            let slope = (ivs[reps[k]].value - fc) / (ivs[reps[k]].half - hc);
            if slope <= best {
                best = slope;
                next = k;
            }
        }
        hull.push(next);
        cur = next;
    }
    let mut out = Vec::with_capacity(hull.len());
    for (pos, &h) in hull.iter().enumerate() {
        let iv = ivs[reps[h]];
        let keep = match hull.get(pos + 1) {
            None => true,
            Some(&nx) => {
                let nv = ivs[reps[nx]];
                let k = (nv.value - iv.value) / (nv.half - iv.half);
                iv.value - k * iv.half <= f_min - eps * f_min.abs()
            }
        };
        if keep {
            out.push(reps[h]);
        }
    }
    out
}

/// Maximizes `f` on `bounds` by DIRECT trisection. Returns `(argmax, max)`;
/// the best evaluated center is returned even when the budget runs out.
pub fn direct_maximize<T: Real>(
    mut f: impl FnMut(T) -> T,
    bounds: (T, T),
    opts: &DirectOptions<T>,
) -> Result<(T, T)> {
    check_bounds(bounds)?;
    let (lo, hi) = bounds;
    let width = hi - lo;
    let neg = |v: T| if v.is_nan() { T::infinity() } else { -v };
    let half = T::lit(0.5);
    let third = T::one() / T::lit(3.0);
    let c0 = (lo + hi) * half;
    let mut ivs = vec![Interval {
        center: c0,
        half: width * half,
        value: neg(f(c0)),
    }];
    let mut evals = 1;
    let best_of = |ivs: &[Interval<T>]| {
        ivs.iter()
            .enumerate()
            .fold(0, |b, (i, iv)| if iv.value < ivs[b].value { i } else { b })
    };
    while evals + 2 <= opts.max_evaluations.max(1) {
        let b = best_of(&ivs);
        if T::lit(2.0) * ivs[b].half < opts.min_width * width {
            break;
        }
        let chosen = potentially_optimal(&ivs, opts.epsilon);
        let mut progressed = false;
        for j in chosen {
            if evals + 2 > opts.max_evaluations {
                break;
            }
            let Interval { center, half: h, value } = ivs[j];
            let nh = h * third;
            let offset = T::lit(2.0) * nh;
            let (l, r) = (center - offset, center + offset);
            let (fl, fr) = (neg(f(l)), neg(f(r)));
            evals += 2;
            ivs[j] = Interval { center, half: nh, value };
            ivs.push(Interval { center: l, half: nh, value: fl });
            ivs.push(Interval { center: r, half: nh, value: fr });
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    let b = best_of(&ivs);
    Ok((ivs[b].center, -ivs[b].value))
}

/// Maximizes expected improvement of `model` over `bounds`.
pub fn maximize_acquisition<T: Real>(
    model: &GpModel<T>,
    bounds: (T, T),
    opts: &DirectOptions<T>,
) -> Result<(T, T)> {
    direct_maximize(|x| expected_improvement(model, x), bounds, opts)
}

/// How the loop picks its first evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound = "T: Real")]
pub enum InitialDesign<T> {
    /// This many points drawn uniformly from the bounds with the config seed.
    Random(usize),
    Points(Vec<T>),
}

/// Loop controls for [`optimize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BoConfig<T> {
    pub bounds: (T, T),
    pub max_iterations: usize,
    pub ei_tolerance: T,
    pub initial_design: InitialDesign<T>,
    pub seed: u64,
    #[serde(default)]
    pub fit: FitOptions<T>,
    #[serde(default)]
    pub direct: DirectOptions<T>,
}

impl<T: Real> Default for BoConfig<T> {
    fn default() -> Self {
        Self {
            bounds: (T::lit(0.1), T::lit(1.9)),
            max_iterations: 30,
            ei_tolerance: T::lit(1e-6),
            initial_design: InitialDesign::Random(2),
            seed: 0,
            fit: FitOptions::default(),
            direct: DirectOptions::default(),
        }
    }
}

impl<T: Real> BoConfig<T> {
    pub fn validate(&self) -> Result<()> {
        check_bounds(self.bounds)?;
        if !(self.bounds.0 > T::zero() && self.bounds.1 < T::lit(2.0)) {
            return Err(Error::invalid(
                "bounds",
                format!("search interval must lie inside (0, 2), got [{}, {}]", self.bounds.0, self.bounds.1),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.ei_tolerance >= T::zero()) {
            return Err(Error::invalid("ei_tolerance", "must be non-negative"));
        }
        match &self.initial_design {
            InitialDesign::Random(0) => Err(Error::invalid("initial_design", "need at least one initial point")),
            InitialDesign::Points(p) if p.is_empty() => {
                Err(Error::invalid("initial_design", "need at least one initial point"))
            }
            InitialDesign::Points(p) if p.iter().any(|x| !(*x >= self.bounds.0 && *x <= self.bounds.1)) => Err(
                Error::invalid("initial_design", "initial points must lie inside the bounds"),
            ),
            _ => Ok(()),
        }
    }
}

/// One loss evaluation of the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BoRecord<T> {
    /// 0 for initial-design and resumed points, then 1, 2, ...
    pub iteration: usize,
    pub alpha: T,
    /// `inf` marks a failed evaluation.
    #[serde(rename = "F")]
    pub loss: T,
    /// Acquisition value at selection; empty for initial points.
    #[serde(rename = "EI")]
    pub ei: Option<T>,
    pub best: T,
}

/// Ordered record of every loss evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BoHistory<T> {
    pub records: Vec<BoRecord<T>>,
}

impl<T: Real> BoHistory<T> {
    fn push(&mut self, iteration: usize, alpha: T, loss: T, ei: Option<T>) {
        let prev = self.records.last().map_or(T::infinity(), |r| r.best);
        let best = if loss < prev { loss } else { prev };
        self.records.push(BoRecord {
            iteration,
            alpha,
            loss,
            ei,
            best,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of acquisition-driven iterations.
    pub fn iterations(&self) -> usize {
        self.records.iter().map(|r| r.iteration).max().unwrap_or(0)
    }

    /// Successful evaluations as `(alpha, F)`.
    pub fn observations(&self) -> Vec<(T, T)> {
        self.records
            .iter()
            .filter(|r| r.loss.is_finite())
            .map(|r| (r.alpha, r.loss))
            .collect()
    }

    /// Argmin over successful evaluations (earliest on ties).
    pub fn incumbent(&self) -> Option<(T, T)> {
        self.observations()
            .into_iter()
            .fold(None, |b: Option<(T, T)>, o| match b {
                Some(bb) if bb.1 <= o.1 => Some(bb),
                _ => Some(o),
            })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<BoRecord<T>>, _>>()?;
        Ok(Self { records })
    }
}

/// Result of a completed loop.
#[derive(Debug, Clone)]
pub struct BoOutcome<T: Real> {
    pub best_alpha: T,
    pub best_loss: T,
    pub history: BoHistory<T>,
    /// Surrogate fitted to all successful evaluations.
    pub model: Option<GpModel<T>>,
    /// True when the loop stopped on the acquisition tolerance.
    pub converged: bool,
}

/// An aborted loop, with everything evaluated before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct BoAbort<T: Real> {
    pub error: Error,
    pub history: BoHistory<T>,
}

fn nudge<T: Real>(x: T, existing: &[T], bounds: (T, T)) -> T {
    let width = bounds.1 - bounds.0;
    let centre = (bounds.0 + bounds.1) * T::lit(0.5);
    let mut x = x;
    for _ in 0..1000 {
        if !existing.iter().any(|e| (*e - x).abs() <= T::lit(DUPLICATE_RADIUS)) {
            break;
        }
        let step = T::lit(DUPLICATE_SHIFT) * width;
        x = if x < centre { x + step } else { x - step };
    }
    x.max(bounds.0).min(bounds.1)
}

/// Minimizes `loss` over `config.bounds`.
///
/// Evaluates the initial design, then repeats fit, acquisition maximization
/// and evaluation until `max_iterations` or until the maximal expected
/// improvement drops below `ei_tolerance`. A failed evaluation is recorded
/// with loss `inf` and left out of the surrogate; three failures in a row
/// abort the loop.
pub fn optimize<T: Real>(
    loss: impl FnMut(T) -> Result<T>,
    config: &BoConfig<T>,
) -> std::result::Result<BoOutcome<T>, BoAbort<T>> {
    optimize_from(loss, config, &[])
}

/// [`optimize`] seeded with earlier observations `(alpha, F)`; with at least
/// two of them the initial design is skipped.
pub fn optimize_from<T: Real>(
    mut loss: impl FnMut(T) -> Result<T>,
    config: &BoConfig<T>,
    prior: &[(T, T)],
) -> std::result::Result<BoOutcome<T>, BoAbort<T>> {
    let mut history = BoHistory::default();
    if let Err(error) = config.validate() {
        return Err(BoAbort { error, history });
    }
    let bounds = config.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = move || {
        let u: f64 = rng.random();
        bounds.0 + (bounds.1 - bounds.0) * T::lit(u)
    };
    let mut failures = 0;
    let mut evaluated: Vec<T> = Vec::new();

    macro_rules! evaluate {
        ($iter:expr, $x:expr, $ei:expr) => {{
            let x = $x;
            evaluated.push(x);
            match loss(x).ok().filter(|v| v.is_finite()) {
                Some(v) => {
                    failures = 0;
                    history.push($iter, x, v, $ei);
                }
                None => {
                    failures += 1;
                    history.push($iter, x, T::infinity(), $ei);
                    if failures >= MAX_CONSECUTIVE_FAILURES {
                        return Err(BoAbort {
                            error: Error::TooManyFailures { failures },
                            history,
                        });
                    }
                }
            }
        }};
    }

    for &(a, f) in prior {
        evaluated.push(a);
        history.push(0, a, if f.is_finite() { f } else { T::infinity() }, None);
    }
    if history.observations().len() < 2 {
        let initial: Vec<T> = match &config.initial_design {
            InitialDesign::Random(n) => (0..*n).map(|_| draw()).collect(),
            InitialDesign::Points(p) => p.clone(),
        };
        for x in initial {
            let x = nudge(x, &evaluated, bounds);
            evaluate!(0, x, None);
        }
    }

    let mut model = None;
    let mut converged = false;
    for it in 1..=config.max_iterations {
        let obs = history.observations();
        if obs.len() < 2 {
            let x = nudge(draw(), &evaluated, bounds);
            evaluate!(it, x, None);
            continue;
        }
        let fitted = match GpModel::fit(obs.iter().map(|o| vec![o.0]).collect(), obs.iter().map(|o| o.1).collect(), config.fit)
        {
            Ok(m) => m,
            Err(error) => return Err(BoAbort { error, history }),
        };
        let (x, ei) = match maximize_acquisition(&fitted, bounds, &config.direct) {
            Ok(v) => v,
            Err(error) => return Err(BoAbort { error, history }),
        };
        model = Some(fitted);
        if ei < config.ei_tolerance {
            converged = true;
            break;
        }
        let x = nudge(x, &evaluated, bounds);
        evaluate!(it, x, Some(ei));
    }

    let obs = history.observations();
    if obs.len() >= 2 {
        if let Ok(m) = GpModel::fit(obs.iter().map(|o| vec![o.0]).collect(), obs.iter().map(|o| o.1).collect(), config.fit)
        {
            model = Some(m);
        }
    }
    match history.incumbent() {
        Some((best_alpha, best_loss)) => Ok(BoOutcome {
            best_alpha,
            best_loss,
            history,
            model,
            converged,
        }),
        None => Err(BoAbort {
            error: Error::TooManyFailures { failures },
            history,
        }),
    }
}

//! Gaussian process regression with the Matérn-5/2 ARD covariance.
//!
//! Hyperparameters are chosen by maximizing the log marginal likelihood with a
//! deterministic multi-start coordinate search in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smallest noise variance ever placed on the covariance diagonal.
pub const NOISE_FLOOR: f64 = 1e-10;

const JITTER_LEVELS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Matérn-5/2 signal variance, per-dimension lengthscales and noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GpHyperparams<T> {
    pub signal_variance: T,
    pub lengthscales: Vec<T>,
    pub noise_variance: T,
}

impl<T: Real> GpHyperparams<T> {
    pub fn new(signal_variance: T, lengthscales: Vec<T>, noise_variance: T) -> Result<Self> {
        let h = Self {
            signal_variance,
            lengthscales,
            noise_variance,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > T::zero() && self.signal_variance.is_finite()) {
            return Err(Error::invalid("signal_variance", "must be positive and finite"));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("lengthscales", "need one lengthscale per input dimension"));
        }
        if self.lengthscales.iter().any(|l| !(*l > T::zero() && l.is_finite())) {
            return Err(Error::invalid("lengthscales", "must be positive and finite"));
        }
        if !(self.noise_variance >= T::zero() && self.noise_variance.is_finite()) {
            return Err(Error::invalid("noise_variance", "must be non-negative and finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// `sigma^2 (1 + h + h^2/3) exp(-h)` with `h = sqrt(sum 5 (x_i - y_i)^2 / theta_i^2)`.
pub fn matern52_ard<T: Real>(x: &[T], y: &[T], hyp: &GpHyperparams<T>) -> T {
    let five = T::lit(5.0);
    let h2: T = x
        .iter()
        .zip(y)
        .zip(&hyp.lengthscales)
        .map(|((a, b), l)| five * (*a - *b).powi(2) / (*l * *l))
        .sum();
    let h = h2.sqrt();
    hyp.signal_variance * (T::one() + h + h2 / T::lit(3.0)) * (-h).exp()
}

/// Prior mean used by the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Constant equal to the mean of the training outputs.
    #[default]
    Centered,
    Zero,
}

/// Whether the noise variance is fitted or held fixed. A fixed value is used
/// as given, so `Fixed(0.0)` interpolates (jitter is added only if the
/// factorization needs it).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound = "T: Real")]
pub enum NoiseMode<T> {
    /// Fitted, never below [`NOISE_FLOOR`].
    #[default]
    Learned,
    Fixed(T),
}

/// Options for [`GpModel::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FitOptions<T> {
    #[serde(default)]
    pub mean: MeanMode,
    #[serde(default)]
    pub noise: NoiseMode<T>,
}

/// Lower-triangular Cholesky factor stored row-major.
#[derive(Debug, Clone, PartialEq)]
struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    fn factor(a: &[T], n: usize) -> Option<Self> {
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > T::zero()) {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    /// Solves `L z = b`.
    fn forward(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[i * n + k] * z[k];
            }
            z[i] = s / self.l[i * n + i];
        }
        z
    }

    /// Solves `L^T x = z`.
    fn backward(&self, z: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    fn log_det_half(&self) -> T {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum()
    }
}

struct Factored<T> {
    chol: Cholesky<T>,
    weights: Vec<T>,
    jitter: T,
}

fn factorize<T: Real>(inputs: &[Vec<T>], centered: &[T], hyp: &GpHyperparams<T>) -> Result<Factored<T>> {
    let n = inputs.len();
    let noise = hyp.noise_variance;
    let mut gram = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let k = matern52_ard(&inputs[i], &inputs[j], hyp);
            gram[i * n + j] = k;
            gram[j * n + i] = k;
        }
    }
    for &level in &JITTER_LEVELS {
        let jitter = T::lit(level) * hyp.signal_variance;
        let mut a = gram.clone();
        for i in 0..n {
            a[i * n + i] += noise + jitter;
        }
        if let Some(chol) = Cholesky::factor(&a, n) {
            let weights = chol.backward(&chol.forward(centered));
            return Ok(Factored { chol, weights, jitter });
        }
    }
    Err(Error::Factorization {
        jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1],
    })
}

fn log_marginal<T: Real>(centered: &[T], f: &Factored<T>) -> T {
    let fit: T = centered.iter().zip(&f.weights).map(|(y, w)| *y * *w).sum();
    let n = T::from_usize_exact(centered.len());
    -T::lit(0.5) * fit - f.chol.log_det_half() - T::lit(0.5) * n * (T::TAU()).ln()
}

/// Fitted Gaussian process: training data, hyperparameters and the
/// factorization of `K + sigma_n^2 I`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "GpState<T>", into = "GpState<T>", bound = "T: Real")]
pub struct GpModel<T: Real> {
    inputs: Vec<Vec<T>>,
    outputs: Vec<T>,
    hyper: GpHyperparams<T>,
    options: FitOptions<T>,
    prior_mean: T,
    chol: Cholesky<T>,
    weights: Vec<T>,
    jitter: T,
}

impl<T: Real> std::fmt::Debug for GpModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GpModel")
            .field("inputs", &self.inputs)
            .field("outputs", &self.outputs)
            .field("hyper", &self.hyper)
            .field("prior_mean", &self.prior_mean)
            .finish_non_exhaustive()
    }
}

/// Serialized form of a [`GpModel`]; the factorization is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GpState<T> {
    pub inputs: Vec<Vec<T>>,
    pub outputs: Vec<T>,
    pub hyperparams: GpHyperparams<T>,
    #[serde(default)]
    pub options: FitOptions<T>,
}

impl<T: Real> TryFrom<GpState<T>> for GpModel<T> {
    type Error = Error;
    fn try_from(s: GpState<T>) -> Result<Self> {
        GpModel::with_hyperparams(s.inputs, s.outputs, s.hyperparams, s.options)
    }
}

impl<T: Real> From<GpModel<T>> for GpState<T> {
    fn from(m: GpModel<T>) -> Self {
        GpState {
            inputs: m.inputs,
            outputs: m.outputs,
            hyperparams: m.hyper,
            options: m.options,
        }
    }
}

fn check_training<T: Real>(inputs: &[Vec<T>], outputs: &[T]) -> Result<usize> {
    if inputs.len() != outputs.len() {
        return Err(Error::invalid(
            "outputs",
            format!("{} outputs for {} inputs", outputs.len(), inputs.len()),
        ));
    }
    let d = inputs.first().map_or(0, |x| x.len());
    if d == 0 || inputs.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("inputs", "inputs must share one non-zero dimension"));
    }
    if inputs.iter().flatten().chain(outputs).any(|v| !v.is_finite()) {
        return Err(Error::invalid("inputs", "training data must be finite"));
    }
    Ok(d)
}

/// Merges identical inputs, averaging their outputs. Keeps first-seen order.
fn merge_duplicates<T: Real>(inputs: Vec<Vec<T>>, outputs: Vec<T>) -> (Vec<Vec<T>>, Vec<T>) {
    let mut xs: Vec<Vec<T>> = Vec::with_capacity(inputs.len());
    let mut sums: Vec<(T, usize)> = Vec::with_capacity(inputs.len());
    for (x, y) in inputs.into_iter().zip(outputs) {
        match xs.iter().position(|u| *u == x) {
            Some(k) => {
                sums[k].0 += y;
                sums[k].1 += 1;
            }
            None => {
                xs.push(x);
                sums.push((y, 1));
            }
        }
    }
    let ys = sums.into_iter().map(|(s, c)| s / T::from_usize_exact(c)).collect();
    (xs, ys)
}

fn sort_training<T: Real>(inputs: Vec<Vec<T>>, outputs: Vec<T>) -> (Vec<Vec<T>>, Vec<T>) {
    let mut pairs: Vec<(Vec<T>, T)> = inputs.into_iter().zip(outputs).collect();
    pairs.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(u, v)| u.partial_cmp(v).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pairs.into_iter().unzip()
}

impl<T: Real> GpModel<T> {
    /// Builds the model at fixed hyperparameters.
    pub fn with_hyperparams(
        inputs: Vec<Vec<T>>,
        outputs: Vec<T>,
        hyper: GpHyperparams<T>,
        options: FitOptions<T>,
    ) -> Result<Self> {
        let d = check_training(&inputs, &outputs)?;
        hyper.validate()?;
        if hyper.dim() != d {
            return Err(Error::invalid(
                "lengthscales",
                format!("{} lengthscales for {d}-dimensional inputs", hyper.dim()),
            ));
        }
        let (inputs, outputs) = merge_duplicates(inputs, outputs);
        let mut hyper = hyper;
        if options.noise == NoiseMode::Learned {
            hyper.noise_variance = hyper.noise_variance.max(T::lit(NOISE_FLOOR));
        }
        let prior_mean = prior_mean(&outputs, options.mean);
        let centered: Vec<T> = outputs.iter().map(|y| *y - prior_mean).collect();
        let f = factorize(&inputs, &centered, &hyper)?;
        Ok(Self {
            inputs,
            outputs,
            hyper,
            options,
            prior_mean,
            chol: f.chol,
            weights: f.weights,
            jitter: f.jitter,
        })
    }

    /// Fits hyperparameters by maximum marginal likelihood.
    ///
    /// Search box in log space: lengthscales `[1e-2, 1e1]` times the input
    /// span, signal variance `[1e-4, 1e2]` times the output variance, noise
    /// `[1e-10, 1e-1]` times the output variance. Five starts, three rounds of
    /// coordinate grid refinement each.
    pub fn fit(inputs: Vec<Vec<T>>, outputs: Vec<T>, options: FitOptions<T>) -> Result<Self> {
        let d = check_training(&inputs, &outputs)?;
        let (inputs, outputs) = merge_duplicates(inputs, outputs);
        if inputs.len() < 2 {
            return Err(Error::invalid("inputs", "need at least two distinct training inputs"));
        }
        // order invariance: the search sees the data in a canonical order
        let (inputs, outputs) = sort_training(inputs, outputs);
        let mean = prior_mean(&outputs, options.mean);
        let centered: Vec<T> = outputs.iter().map(|y| *y - mean).collect();
        let n = T::from_usize_exact(centered.len());
        let var = centered.iter().map(|c| *c * *c).sum::<T>() / n;
        let var = if var > T::lit(1e-300) { var } else { T::one() };

        let mut lo = Vec::with_capacity(d + 2);
        let mut hi = Vec::with_capacity(d + 2);
        for k in 0..d {
            let (mn, mx) = inputs
                .iter()
                .map(|x| x[k])
                .fold((T::infinity(), T::neg_infinity()), |(a, b), v| (a.min(v), b.max(v)));
            let span = if mx > mn { mx - mn } else { T::one() };
            lo.push((span * T::lit(1e-2)).ln());
            hi.push((span * T::lit(1e1)).ln());
        }
        lo.push((var * T::lit(1e-4)).ln());
        hi.push((var * T::lit(1e2)).ln());
        let fixed_noise = match options.noise {
            NoiseMode::Learned => None,
            NoiseMode::Fixed(s) => Some(s),
        };
        if fixed_noise.is_none() {
            lo.push(T::lit(NOISE_FLOOR).max(var * T::lit(1e-10)).ln());
            hi.push((var * T::lit(1e-1)).max(T::lit(NOISE_FLOOR)).ln());
        }

        let to_hyper = |p: &[T]| GpHyperparams {
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
            signal_variance: p[d].exp(),
            noise_variance: fixed_noise.unwrap_or_else(|| p[d + 1].exp()),
        };
        let objective = |p: &[T]| -> T {
            match factorize(&inputs, &centered, &to_hyper(p)) {
                Ok(f) => log_marginal(&centered, &f),
                Err(_) => T::neg_infinity(),
            }
        };

        let dims = lo.len();
        let starts = [0.5, 0.2, 0.8, 0.35, 0.65];
        let mut best_p = Vec::new();
        let mut best_v = T::neg_infinity();
        for (s, frac) in starts.iter().enumerate() {
            let mut p: Vec<T> = (0..dims)
                .map(|k| {
                    // stagger the start across coordinates
                    let f = starts[(s + k) % starts.len()];
                    let f = if k == 0 { *frac } else { f };
                    lo[k] + (hi[k] - lo[k]) * T::lit(f)
                })
                .collect();
            let mut v = objective(&p);
            let mut step: Vec<T> = (0..dims).map(|k| (hi[k] - lo[k]) / T::lit(8.0)).collect();
            for _round in 0..3 {
                for _sweep in 0..4 {
                    let mut improved = false;
                    for k in 0..dims {
                        let centre = p[k];
                        for g in -4i32..=4 {
                            if g == 0 {
                                continue;
                            }
                            let cand = (centre + step[k] * T::lit(f64::from(g))).max(lo[k]).min(hi[k]);
                            let mut q = p.clone();
                            q[k] = cand;
                            let w = objective(&q);
                            if w > v {
                                v = w;
                                p = q;
                                improved = true;
                            }
                        }
                    }
                    if !improved {
                        break;
                    }
                }
                for st in &mut step {
                    *st /= T::lit(4.0);
                }
            }
            if v > best_v {
                best_v = v;
                best_p = p;
            }
        }
        if best_p.is_empty() {
            return Err(Error::Factorization {
                jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1],
            });
        }
        Self::with_hyperparams(inputs, outputs, to_hyper(&best_p), options)
    }

    pub fn inputs(&self) -> &[Vec<T>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[T] {
        &self.outputs
    }

    pub fn hyperparams(&self) -> &GpHyperparams<T> {
        &self.hyper
    }

    pub fn options(&self) -> FitOptions<T> {
        self.options
    }

    pub fn prior_mean(&self) -> T {
        self.prior_mean
    }

    /// Diagonal jitter that was needed for the factorization.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// Smallest observed output.
    pub fn best_output(&self) -> T {
        self.outputs.iter().copied().fold(T::infinity(), T::min)
    }

    /// Log marginal likelihood of the centered outputs.
    pub fn log_marginal_likelihood(&self) -> T {
        let centered: Vec<T> = self.outputs.iter().map(|y| *y - self.prior_mean).collect();
        let fit: T = centered.iter().zip(&self.weights).map(|(y, w)| *y * *w).sum();
        let n = T::from_usize_exact(centered.len());
        -T::lit(0.5) * fit - self.chol.log_det_half() - T::lit(0.5) * n * T::TAU().ln()
    }

    /// Predictive mean and standard deviation at `x`.
    pub fn predict(&self, x: &[T]) -> (T, T) {
        let k: Vec<T> = self.inputs.iter().map(|xi| matern52_ard(x, xi, &self.hyper)).collect();
        let mean = self.prior_mean + k.iter().zip(&self.weights).map(|(a, b)| *a * *b).sum::<T>();
        let v = self.chol.forward(&k);
        let var = self.hyper.signal_variance - v.iter().map(|c| *c * *c).sum::<T>();
        (mean, var.max(T::zero()).sqrt())
    }

    /// Scalar-input convenience for [`GpModel::predict`].
    pub fn predict_1d(&self, x: T) -> (T, T) {
        self.predict(&[x])
    }
}

fn prior_mean<T: Real>(outputs: &[T], mode: MeanMode) -> T {
    match mode {
        MeanMode::Centered => outputs.iter().copied().sum::<T>() / T::from_usize_exact(outputs.len().max(1)),
        MeanMode::Zero => T::zero(),
    }
}

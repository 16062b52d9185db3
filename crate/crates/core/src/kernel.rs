//! Singular power-law influence function `phi(r) = c(n, alpha) r^-(n + alpha)`.
//!
//! The normalization `c(n, alpha) = alpha Gamma((n + alpha)/2) / (2 pi^(alpha + n/2) Gamma(1 - alpha/2))`
//! ties the kernel to the fractional Laplacian of order `alpha`. Besides point
//! evaluation, the finite volume quadrature needs the kernel mass beyond the
//! truncated stencil, in 1D (closed form) and 2D (quarter plane minus a
//! rectangle).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;
use crate::scalar::Real;
use crate::special::gamma;

/// Fractional order and spatial dimension of the influence function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec<T>", into = "RawKernelSpec<T>")]
#[serde(bound = "T: Real")]
pub struct KernelSpec<T> {
    alpha: T,
    dim: usize,
    coeff: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct RawKernelSpec<T> {
    alpha: T,
    dim: usize,
}

impl<T: Real> TryFrom<RawKernelSpec<T>> for KernelSpec<T> {
    type Error = Error;
    fn try_from(raw: RawKernelSpec<T>) -> Result<Self> {
        KernelSpec::new(raw.alpha, raw.dim)
    }
}

impl<T: Real> From<KernelSpec<T>> for RawKernelSpec<T> {
    fn from(k: KernelSpec<T>) -> Self {
        RawKernelSpec {
            alpha: k.alpha,
            dim: k.dim,
        }
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if !(alpha > T::zero() && alpha < T::lit(2.0)) {
        return Err(Error::invalid(
            "alpha",
            format!("fractional order must lie in the open interval (0, 2), got {alpha}"),
        ));
    }
    Ok(())
}

fn check_dim(dim: usize) -> Result<()> {
    if dim != 1 && dim != 2 {
        return Err(Error::invalid(
            "dim",
            format!("spatial dimension must be 1 or 2, got {dim}"),
        ));
    }
    Ok(())
}

/// `c(n, alpha)` for `0 < alpha < 2`, `n` in {1, 2}.
pub fn normalization_constant<T: Real>(alpha: T, dim: usize) -> Result<T> {
    check_alpha(alpha)?;
    check_dim(dim)?;
    let n = T::from_usize_exact(dim);
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let num = alpha * gamma((n + alpha) * half);
    let den = two * T::PI().powf(alpha + n * half) * gamma(T::one() - alpha * half);
    Ok(num / den)
}

impl<T: Real> KernelSpec<T> {
    pub fn new(alpha: T, dim: usize) -> Result<Self> {
        let coeff = normalization_constant(alpha, dim)?;
        Ok(Self { alpha, dim, coeff })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalization_constant(&self) -> T {
        self.coeff
    }

    /// Power-law exponent `n + alpha`.
    pub fn exponent(&self) -> T {
        T::from_usize_exact(self.dim) + self.alpha
    }

    /// `phi(r)`; `r <= 0` hits the singularity and is rejected.
    pub fn influence(&self, r: T) -> Result<T> {
        if !(r > T::zero()) {
            return Err(Error::Domain(format!(
                "influence function is singular at r = {r}; need r > 0"
            )));
        }
        Ok(self.coeff * r.powf(-self.exponent()))
    }

    /// `phi` evaluated from a squared distance, without the domain check.
    #[inline]
    pub fn influence_from_sq(&self, r2: T) -> T {
        self.coeff * r2.powf(-self.exponent() * T::lit(0.5))
    }

    /// One-sided tail mass `int_R^inf phi(z) dz = c R^-alpha / alpha` (1D kernel).
    pub fn tail_mass_1d(&self, radius: T) -> Result<T> {
        if self.dim != 1 {
            return Err(Error::invalid("dim", "tail_mass_1d needs the 1D kernel"));
        }
        if !(radius > T::zero()) {
            return Err(Error::invalid("radius", format!("must be positive, got {radius}")));
        }
        Ok(self.coeff * radius.powf(-self.alpha) / self.alpha)
    }

    /// Mass of `phi` over the open quarter plane minus `[0, a] x [0, b]` (2D kernel).
    ///
    /// In polar coordinates the radial integral is analytic,
    /// `int_{rb}^inf c r^-(2+alpha) r dr = c rb^-alpha / alpha`, where `rb(theta)`
    /// is the exit distance from the rectangle. The angular integral splits at
    /// the corner angle into two smooth pieces handled by adaptive quadrature.
    pub fn tail_mass_2d(&self, half_widths: (T, T)) -> Result<T> {
        if self.dim != 2 {
            return Err(Error::invalid("dim", "tail_mass_2d needs the 2D kernel"));
        }
        let (a, b) = half_widths;
        if !(a > T::zero() && b > T::zero()) {
            return Err(Error::invalid(
                "half_widths",
                format!("both must be positive, got ({a}, {b})"),
            ));
        }
        let alpha = self.alpha;
        let corner = (b / a).atan();
        let tol = T::default_quad_tol();
        // theta < corner: the ray leaves through x = a, rb = a / cos(theta)
        let right = quad::integrate(|t: T| t.cos().powf(alpha), T::zero(), corner, tol, T::zero())?;
        // theta > corner: leaves through y = b, rb = b / sin(theta)
        let top = quad::integrate(
            |t: T| t.sin().powf(alpha),
            corner,
            T::FRAC_PI_2(),
            tol,
            T::zero(),
        )?;
        Ok(self.coeff / alpha * (a.powf(-alpha) * right + b.powf(-alpha) * top))
    }
}

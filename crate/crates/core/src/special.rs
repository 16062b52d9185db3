//! Special functions: gamma (Lanczos) and the standard normal distribution.

use crate::scalar::Real;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma function by the Lanczos approximation (g = 7, 9 terms) with the
/// reflection formula below 1/2. Poles at non-positive integers give ±inf/NaN.
pub fn gamma<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        let pi = T::PI();
        return pi / ((pi * x).sin() * gamma(T::one() - x));
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS_COEFFS[0]);
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += T::lit(c) / (x + T::from_usize_exact(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    (T::TAU()).sqrt() * t.powf(x + half) * (-t).exp() * acc
}

/// Standard normal density.
pub fn normal_pdf<T: Real>(z: T) -> T {
    (-(z * z) * T::lit(0.5)).exp() / T::TAU().sqrt()
}

/// Standard normal distribution function, via the complementary error function.
pub fn normal_cdf<T: Real>(z: T) -> T {
    let zf = z.to_f64_lossy();
    T::lit(0.5 * libm::erfc(-zf / std::f64::consts::SQRT_2))
}

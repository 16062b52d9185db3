//! Numerical quadrature: adaptive Gauss-Kronrod (7/15) and fixed Gauss-Legendre.

use crate::error::{Error, Result};
use crate::scalar::Real;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Five-point Gauss-Legendre nodes and weights on [-1, 1].
pub const GAUSS5_NODES: [f64; 5] = [
    -0.906_179_845_938_663_992_797_626_878_299_392_965,
    -0.538_469_310_105_683_091_036_314_420_700_208_805,
    0.0,
    0.538_469_310_105_683_091_036_314_420_700_208_805,
    0.906_179_845_938_663_992_797_626_878_299_392_965,
];
pub const GAUSS5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_087_514_264_040_719_917_363,
    0.478_628_670_499_366_468_041_291_514_835_638_193,
    0.568_888_888_888_888_888_888_888_888_888_888_889,
    0.478_628_670_499_366_468_041_291_514_835_638_193,
    0.236_926_885_056_189_087_514_264_040_719_917_363,
];

/// Mean value of `f` over `[a, b]` by five-point Gauss-Legendre.
pub fn gauss5_mean<T: Real>(a: T, b: T, mut f: impl FnMut(T) -> T) -> T {
    let half = T::lit(0.5);
    let mid = (a + b) * half;
    let rad = (b - a) * half;
    let mut acc = T::zero();
    for (x, w) in GAUSS5_NODES.iter().zip(GAUSS5_WEIGHTS.iter()) {
        acc += T::lit(*w) * f(mid + rad * T::lit(*x));
    }
    acc * half
}

fn kronrod15<T: Real>(a: T, b: T, f: &mut impl FnMut(T) -> T) -> (T, T) {
    let half = T::lit(0.5);
    let center = (a + b) * half;
    let rad = (b - a) * half;
    let fc = f(center);
    let mut res_k = fc * T::lit(WGK[7]);
    let mut res_g = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = rad * T::lit(XGK[j]);
        let pair = f(center - dx) + f(center + dx);
        res_k += T::lit(WGK[j]) * pair;
        // odd Kronrod indices are the Gauss nodes
        if j % 2 == 1 {
            res_g += T::lit(WG[j / 2]) * pair;
        }
    }
    (res_k * rad, ((res_k - res_g) * rad).abs())
}

/// Globally adaptive Gauss-Kronrod integration of `f` over a finite interval.
///
/// Bisects the panel with the largest error estimate until the summed estimate
/// is below `max(abs_tol, rel_tol * |I|)`. Fails with [`Error::Quadrature`]
/// if the panel budget is exhausted first.
pub fn integrate<T: Real>(
    mut f: impl FnMut(T) -> T,
    a: T,
    b: T,
    rel_tol: T,
    abs_tol: T,
) -> Result<T> {
    if a == b {
        return Ok(T::zero());
    }
    const MAX_PANELS: usize = 2000;
    let (v, e) = kronrod15(a, b, &mut f);
    let mut panels = vec![(a, b, v, e)];
    loop {
        let total: T = panels.iter().map(|p| p.2).sum();
        let err: T = panels.iter().map(|p| p.3).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::Quadrature {
                lo: a.to_f64_lossy(),
                hi: b.to_f64_lossy(),
                error: f64::INFINITY,
                tol: rel_tol.to_f64_lossy(),
            });
        }
        let tol = abs_tol.max(rel_tol * total.abs());
        if err <= tol {
            return Ok(total);
        }
        if panels.len() >= MAX_PANELS {
            return Err(Error::Quadrature {
                lo: a.to_f64_lossy(),
                hi: b.to_f64_lossy(),
                error: err.to_f64_lossy(),
                tol: tol.to_f64_lossy(),
            });
        }
        let worst = panels
            .iter()
            .enumerate()
            .fold(0, |best, (i, p)| if p.3 > panels[best].3 { i } else { best });
        let (lo, hi, _, _) = panels.swap_remove(worst);
        let mid = (lo + hi) * T::lit(0.5);
        let (v1, e1) = kronrod15(lo, mid, &mut f);
        let (v2, e2) = kronrod15(mid, hi, &mut f);
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
}

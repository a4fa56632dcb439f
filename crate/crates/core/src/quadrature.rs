//! Adaptive Gauss–Kronrod (7/15) quadrature with a global error budget.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_3,
    0.949_107_912_342_758_524_526_189_684_047_9,
    0.864_864_423_359_769_072_789_712_788_640_9,
    0.741_531_185_599_394_439_863_864_773_280_8,
    0.586_087_235_467_691_130_294_144_845_693_0,
    0.405_845_151_377_397_166_906_606_412_076_9,
    0.207_784_955_007_898_467_600_689_403_773_2,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_97,
    0.063_092_092_629_978_553_290_700_663_189_20,
    0.104_790_010_322_250_183_839_876_322_541_5,
    0.140_653_259_715_525_918_745_189_590_510_2,
    0.169_004_726_639_267_902_826_583_426_598_6,
    0.190_350_578_064_785_409_913_256_402_421_0,
    0.204_432_940_075_298_892_414_161_999_234_6,
    0.209_482_141_084_727_828_012_999_174_891_7,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_1,
    0.279_705_391_489_276_667_901_467_771_423_8,
    0.381_830_050_505_118_944_950_369_775_489_0,
    0.417_959_183_673_469_387_755_102_040_816_3,
];

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs: 1e-12,
            rel: 1e-12,
            max_intervals: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hl = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[7];
    let mut rg = fc * WG[3];
    for j in 0..7 {
        let dx = hl * XGK[j];
        let s = f(c - dx) + f(c + dx);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    let value = rk * hl;
    let err = ((rk - rg) * hl).abs();
    (value, err)
}

/// Integrates `f` over `[a, b]`, bisecting the worst interval until the
/// summed error estimate meets `max(abs, rel·|I|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: Tolerance) -> Result<Estimate> {
    if a == b {
        return Ok(Estimate {
            value: 0.0,
            error: 0.0,
            intervals: 0,
        });
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut intervals: Vec<(f64, f64, f64, f64)> = Vec::new();
    let (v, e) = gk15(&f, lo, hi);
    intervals.push((lo, hi, v, e));
    loop {
        let total: f64 = intervals.iter().map(|iv| iv.2).sum();
        let err: f64 = intervals.iter().map(|iv| iv.3).sum();
        if !total.is_finite() {
            return Err(Error::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
        }
        if err <= tol.abs.max(tol.rel * total.abs()) {
            return Ok(Estimate {
                value: sign * total,
                error: err,
                intervals: intervals.len(),
            });
        }
        if intervals.len() >= tol.max_intervals {
            return Err(Error::Quadrature(format!(
                "error {err:e} above tolerance after {} intervals on [{a}, {b}]",
                intervals.len()
            )));
        }
        // Deterministic choice: first interval with the largest error.
        let mut worst = 0;
        for (i, iv) in intervals.iter().enumerate() {
            if iv.3 > intervals[worst].3 {
                worst = i;
            }
        }
        let (l, r, _, _) = intervals[worst];
        let m = 0.5 * (l + r);
        if m <= l || m >= r {
            return Err(Error::Quadrature(format!("interval collapsed near {m}")));
        }
        let (v1, e1) = gk15(&f, l, m);
        let (v2, e2) = gk15(&f, m, r);
        intervals[worst] = (l, m, v1, e1);
        intervals.insert(worst + 1, (m, r, v2, e2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let e = integrate(|x| x.powi(10) - 3.0 * x.powi(3), 0.0, 2.0, Tolerance::default()).unwrap();
        let exact = 2f64.powi(11) / 11.0 - 3.0 * 2f64.powi(4) / 4.0;
        assert!((e.value - exact).abs() < 1e-11);
    }

    #[test]
    fn oscillatory_integrand() {
        let e = integrate(|x| (40.0 * x).sin(), 0.0, 1.0, Tolerance::default()).unwrap();
        let exact = (1.0 - 40f64.cos()) / 40.0;
        assert!((e.value - exact).abs() < 1e-12);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let f = |x: f64| (-x).exp();
        let a = integrate(f, 0.0, 3.0, Tolerance::default()).unwrap().value;
        let b = integrate(f, 3.0, 0.0, Tolerance::default()).unwrap().value;
        assert_eq!(a, -b);
    }

    #[test]
    fn endpoint_peak_converges() {
        // s (2+s)^-4 on [0, 10], closed form from the antiderivative.
        let e = integrate(|s| s / (2.0 + s).powi(4), 0.0, 10.0, Tolerance::default()).unwrap();
        let anti = |u: f64| -0.5 / (u * u) + 2.0 / (3.0 * u * u * u);
        assert!((e.value - (anti(12.0) - anti(2.0))).abs() < 1e-13);
    }
}

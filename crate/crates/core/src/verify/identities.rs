//! Random-sample checks of the scalar integral inequalities and identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elliptic_dtn::{factorial, resolvent_difference_integral};
use crate::error::Result;
use crate::quadrature::{integrate, Tolerance};
use crate::report::{Check, VerificationReport};

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn tol(scale: f64) -> Tolerance {
    Tolerance {
        abs: 1e-12 * scale,
        rel: 1e-12,
        max_intervals: 4000,
    }
}

/// `∫₀^λ s^{j−1}(a+s)^{−(j+m+1)} ds`, integrated in `τ = s/(a+s)`, where the
/// integrand becomes `a^{−(m+1)} τ^{j−1}(1−τ)^m`.
pub fn lemte_integral(j: usize, m: usize, a: f64, lambda: f64) -> Result<f64> {
    let top = if lambda.is_infinite() { 1.0 } else { lambda / (a + lambda) };
    let e = integrate(|t| t.powi(j as i32 - 1) * (1.0 - t).powi(m as i32), 0.0, top, tol(1.0))?;
    Ok(e.value / a.powi(m as i32 + 1))
}

/// `∫₀^λ s^{j−1}[(a+s)^{−N} − (b+s)^{−N}] ds` with `N = j+m+1`, written as
/// `(a+s)^{−N}(1 − ((a+s)/(b+s))^N)` to avoid cancellation for `b ≈ a`.
pub fn lemte_difference(j: usize, m: usize, a: f64, b: f64, lambda: f64) -> Result<f64> {
    let n = (j + m + 1) as f64;
    let top = lambda / (a + lambda);
    let e = integrate(
        |t| {
            let s = a * t / (1.0 - t);
            let f = -(n * ((a - b) / (b + s)).ln_1p()).exp_m1();
            t.powi(j as i32 - 1) * (1.0 - t).powi(m as i32) * f
        },
        0.0,
        top,
        tol(1.0),
    )?;
    Ok(e.value / a.powi(m as i32 + 1))
}

/// Variant of the difference with exponent `j+1` on the first term.
fn lemte_difference_mixed_exponent(j: usize, m: usize, a: f64, b: f64, lambda: f64) -> Result<f64> {
    Ok(lemte_integral(j, 0, a, lambda)? - lemte_integral(j, m, b, lambda)?)
}

/// Samples `j ∈ [2,8]`, `m ∈ [0,5]`, `0 < a < b ≤ 10³`, `λ ≤ 10⁶` and checks
/// both integral bounds on each draw.
pub fn check_lemte(samples: usize, seed: u64) -> Result<VerificationReport> {
    let mut r = VerificationReport::new("lemte");
    r.input("samples", samples).input("seed", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst1, mut worst2) = (f64::INFINITY, f64::INFINITY);
    let (mut fail1, mut fail2, mut mixed_fail) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let j = rng.random_range(2..=8usize);
        let m = rng.random_range(0..=5usize);
        let a = log_uniform(&mut rng, 1e-3, 1e3);
        let b = a + (1e3 - a) * rng.random::<f64>().max(1e-12);
        let lambda = log_uniform(&mut rng, 1e-3, 1e6);
        let i1 = lemte_integral(j, m, a, lambda)?;
        let b1 = j as f64 * 2f64.powi(j as i32 - 1) / a.powi(m as i32 + 1);
        let i2 = lemte_difference(j, m, a, b, lambda)?;
        let b2 = j as f64 * (j + m + 1) as f64 * 2f64.powi(j as i32 - 1) * (b - a) / (a.powi(m as i32 + 1) * b);
        let m1 = if i1 > 0.0 { b1 / i1 } else { f64::INFINITY };
        let m2 = if i2 > 0.0 { b2 / i2 } else { f64::INFINITY };
        worst1 = worst1.min(m1);
        worst2 = worst2.min(m2);
        fail1 += (i1 > b1) as usize;
        fail2 += (i2 > b2) as usize;
        mixed_fail += (lemte_difference_mixed_exponent(j, m, a, b, lambda)? > b2) as usize;
    }
    r.measure("integral_bound_min_margin", worst1)
        .measure("difference_bound_min_margin", worst2)
        .measure("integral_bound_violations", fail1 as f64)
        .measure("difference_bound_violations", fail2 as f64)
        .measure("difference_bound_mixed_exponent_violations", mixed_fail as f64);
    r.push(Check::new("integral_bound_violations", fail1 as f64, 0.0, 0.0));
    r.push(Check::new("difference_bound_violations", fail2 as f64, 0.0, 0.0));
    r.push(Check::new("integral_bound_margin_above_one", 1.0, worst1, 0.0));
    r.push(Check::new("difference_bound_margin_above_one", 1.0, worst2, 0.0));
    r.note("the difference bound is checked with exponent j+m+1 on both terms");
    Ok(r)
}

/// `j!((λ+a)^{−(j+1)} − (λ+b)^{−(j+1)})` against its integral form.
pub fn check_ui0(samples: usize, seed: u64) -> Result<VerificationReport> {
    let mut r = VerificationReport::new("ui0");
    r.input("samples", samples).input("seed", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let j = rng.random_range(0..=8usize);
        let lambda = log_uniform(&mut rng, 1e-3, 1e3);
        let a = log_uniform(&mut rng, 1e-1, 1e3);
        let b = log_uniform(&mut rng, 1e-1, 1e3);
        let e = -(j as i32 + 1);
        let lhs = factorial(j) * ((lambda + a).powi(e) - (lambda + b).powi(e));
        let rhs = resolvent_difference_integral(lambda, a, b, j)?;
        let scale = factorial(j) * (lambda + a).powi(e).max((lambda + b).powi(e));
        let rel = (lhs - rhs).abs() / lhs.abs().max(1e-300).max(1e-13 * scale);
        worst = worst.max(rel);
    }
    r.measure("max_relative_error", worst);
    r.push(Check::new("identity", worst, 1e-10, 0.0));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((lemte_integral(2, 0, 1.0, f64::INFINITY).unwrap() - 0.5).abs() < 1e-13);
        assert!((lemte_integral(2, 1, 2.0, 10.0).unwrap() - 0.038_580_246_9).abs() < 1e-9);
        assert_eq!(lemte_difference(3, 2, 1.5, 1.5, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn difference_is_stable_for_close_arguments() {
        let b = 1.0 + 1e-9;
        let d = lemte_difference(2, 1, 1.0, b, 50.0).unwrap();
        let fd = (lemte_integral(2, 1, 1.0, 50.0).unwrap() - lemte_integral(2, 1, b, 50.0).unwrap()) / 1e-9;
        assert!((d / 1e-9 - fd).abs() < 1e-5 * fd.abs());
    }

    #[test]
    fn lemte_report_passes() {
        let r = check_lemte(300, 7).unwrap();
        assert!(r.pass, "{:?}", r.summary_lines());
        let r = check_ui0(300, 7).unwrap();
        assert!(r.pass, "{:?}", r.summary_lines());
    }

    #[test]
    fn reports_are_deterministic() {
        let a = serde_json::to_string(&check_lemte(50, 3).unwrap()).unwrap();
        let b = serde_json::to_string(&check_lemte(50, 3).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

//! Logarithmic stability moduli and their fit to (distance, error) data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Modulus {
    /// `|ln(δ + |ln δ|⁻¹)|^{−θ}` on `(0, ς]`, `δ` beyond; `θ` is fitted.
    PsiSigmaTheta,
    /// `|ln δ|^{−2/(2+n)}` on `(0, ς]`, `δ` beyond.
    PsiSigma { n: usize },
    /// `|ln(δ + |ln δ|⁻¹)|^{−η/4}` on `(0, ς]`, `δ` beyond.
    PhiSigma { eta: f64 },
}

/// Logarithmic argument `A(δ)` with `Ψ = A^{−θ}` on the small-δ branch.
fn log_argument(m: Modulus, d: f64) -> f64 {
    match m {
        Modulus::PsiSigma { .. } => d.ln().abs(),
        _ => (d + 1.0 / d.ln().abs()).ln().abs(),
    }
}

/// Largest admissible `ς`. For the nested-log moduli `δ + |ln δ|⁻¹` reaches 1
/// near `δ ≈ 0.259`, where the small-δ branch is singular.
fn sigma_max(m: Modulus) -> f64 {
    match m {
        Modulus::PsiSigma { .. } => 0.99,
        _ => 0.25,
    }
}

pub fn evaluate(m: Modulus, sigma: f64, theta: f64, d: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    if d > sigma {
        return d;
    }
    let e = match m {
        Modulus::PsiSigmaTheta => theta,
        Modulus::PsiSigma { n } => 2.0 / (2.0 + n as f64),
        Modulus::PhiSigma { eta } => eta / 4.0,
    };
    log_argument(m, d).powf(-e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusFit {
    pub modulus: Modulus,
    pub kappa: f64,
    pub sigma: f64,
    pub theta: f64,
    /// RMS of `ln e − ln(κ_ls Ψ)` over points with positive error.
    pub log_residual: f64,
    /// `κ·Ψ(δᵢ) ≥ eᵢ` for every point, with `κ ≤ kappa_max`.
    pub dominated: bool,
    pub failures: Vec<usize>,
}

const THETA_RANGE: (f64, f64) = (1e-3, 0.999);

/// Fits `(ς, θ)` by least squares in log space on a `ς` grid, then sets
/// `κ = max eᵢ/Ψ(δᵢ)` so the scaled modulus dominates every point.
pub fn fit_modulus(deltas: &[f64], errors: &[f64], modulus: Modulus, kappa_max: f64) -> Result<ModulusFit> {
    if deltas.is_empty() || deltas.len() != errors.len() {
        return Err(Error::Invalid("fit needs equally many distances and errors, at least one".into()));
    }
    if deltas.iter().chain(errors).any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Invalid("distances and errors must be finite and nonnegative".into()));
    }
    let pts: Vec<(f64, f64)> = deltas.iter().copied().zip(errors.iter().copied()).collect();
    let positive: Vec<(f64, f64)> = pts.iter().copied().filter(|(d, e)| *d > 0.0 && *e > 0.0).collect();
    let smax = sigma_max(modulus);
    let mut grid: Vec<f64> = (0..60).map(|i| smax * (1e-6f64).powf(i as f64 / 59.0)).collect();
    grid.extend(positive.iter().map(|p| p.0).filter(|d| *d <= smax));
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let mut best: Option<(f64, f64, f64)> = None; // (residual, sigma, theta)
    for &s in &grid {
        let theta = match modulus {
            Modulus::PsiSigmaTheta => {
                let small: Vec<(f64, f64)> = positive.iter().copied().filter(|(d, _)| *d <= s).collect();
                if small.len() >= 2 {
                    // ln e = ln κ − θ ln A(δ)
                    let xy: Vec<(f64, f64)> = small.iter().map(|(d, e)| (log_argument(modulus, *d).ln(), e.ln())).collect();
                    let n = xy.len() as f64;
                    let (sx, sy) = xy.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
                    let (mx, my) = (sx / n, sy / n);
                    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
                    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
                    if sxx > 0.0 {
                        (-sxy / sxx).clamp(THETA_RANGE.0, THETA_RANGE.1)
                    } else {
                        0.5
                    }
                } else {
                    0.5
                }
            }
            _ => 0.0,
        };
        if positive.is_empty() {
            best = Some((0.0, s, theta));
            break;
        }
        let logs: Vec<f64> = positive
            .iter()
            .map(|(d, e)| e.ln() - evaluate(modulus, s, theta, *d).ln())
            .collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let res = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
        if best.is_none_or(|b| res < b.0 - 1e-14) {
            best = Some((res, s, theta));
        }
    }
    let (res, sigma, theta) = best.expect("grid is nonempty");
    let mut kappa = 0.0f64;
    let mut failures = Vec::new();
    for (i, (d, e)) in pts.iter().enumerate() {
        if *e == 0.0 {
            continue;
        }
        let psi = evaluate(modulus, sigma, theta, *d);
        if psi == 0.0 {
            failures.push(i);
        } else {
            kappa = kappa.max(e / psi);
        }
    }
    let dominated = failures.is_empty() && kappa <= kappa_max;
    Ok(ModulusFit {
        modulus,
        kappa,
        sigma,
        theta,
        log_residual: res,
        dominated,
        failures,
    })
}

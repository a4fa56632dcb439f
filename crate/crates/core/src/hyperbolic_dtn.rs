//! Hyperbolic DtN map `Π`: leapfrog stepping of the wave problem, and the
//! modal formula (Taylor part in `Λ^{(j)}(0)` plus Duhamel remainder).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::OperatorPair;
use crate::bsd_metrics::{align, compute_delta, pair_modes};
use crate::elliptic_dtn::{factorial, DtnOperator};
use crate::error::{Error, Result};
use crate::linalg::{spmv, spmv_acc, weighted_dot, weighted_norm};
use crate::quadrature::{integrate, Tolerance};
use crate::spectral::SpectralData;

// ---------------------------------------------------------------------------
// Time profiles

/// `η(t) = t^power · (1 − t/τ)^window`, held as exact polynomial coefficients.
///
/// The window factor makes every profile vanish at `τ` to order `window`
/// while leaving the order of vanishing at `0` equal to `power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub power: u32,
    #[serde(default)]
    pub window: u32,
    pub tau: f64,
    #[serde(skip)]
    coeffs: Vec<f64>,
}

impl TimeProfile {
    pub fn new(power: u32, window: u32, tau: f64) -> Self {
        let mut p = Self {
            power,
            window,
            tau,
            coeffs: Vec::new(),
        };
        p.coeffs = p.build();
        p
    }

    pub fn monomial(power: u32, tau: f64) -> Self {
        Self::new(power, 0, tau)
    }

    fn build(&self) -> Vec<f64> {
        let m = self.power as usize;
        let w = self.window as usize;
        let mut c = vec![0.0; m + w + 1];
        let mut binom = 1.0;
        for i in 0..=w {
            c[m + i] = binom * (-1.0 / self.tau).powi(i as i32);
            binom = binom * (w - i) as f64 / (i + 1) as f64;
        }
        c
    }

    fn coeffs(&self) -> std::borrow::Cow<'_, [f64]> {
        if self.coeffs.is_empty() {
            std::borrow::Cow::Owned(self.build())
        } else {
            std::borrow::Cow::Borrowed(&self.coeffs)
        }
    }

    pub fn degree(&self) -> usize {
        (self.power + self.window) as usize
    }

    /// `η^{(d)}(t)`.
    pub fn derivative(&self, d: usize, t: f64) -> f64 {
        let c = self.coeffs();
        let mut acc = 0.0;
        for i in (d..c.len()).rev() {
            let fall: f64 = (i - d + 1..=i).map(|x| x as f64).product();
            acc = acc * t + c[i] * fall;
        }
        acc
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.derivative(0, t)
    }

    /// Bound on `sup_{[0,τ]} |η^{(d)}|` from the coefficients.
    pub fn sup_derivative(&self, d: usize) -> f64 {
        let c = self.coeffs();
        (d..c.len())
            .map(|i| {
                let fall: f64 = (i - d + 1..=i).map(|x| x as f64).product();
                (c[i] * fall).abs() * self.tau.powi((i - d) as i32)
            })
            .sum()
    }
}

/// Space-time boundary datum `h(x,t) = φ(x)·η(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveProbe {
    pub phi: Vec<f64>,
    pub profile: TimeProfile,
}

// ---------------------------------------------------------------------------
// Sine kernel

/// `s_k(t) = sin(√λ_k t)/√λ_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineKernel {
    pub lambdas: Vec<f64>,
}

impl SineKernel {
    pub fn new(lambdas: &[f64]) -> Self {
        Self {
            lambdas: lambdas.to_vec(),
        }
    }

    pub fn eval(&self, k: usize, t: f64) -> f64 {
        let w = self.lambdas[k].sqrt();
        (w * t).sin() / w
    }

    pub fn derivative(&self, k: usize, t: f64) -> f64 {
        (self.lambdas[k].sqrt() * t).cos()
    }

    /// Largest `|s″ + λ s|/(λ·max|s|)` over `samples` points of `[0, τ]`, with
    /// `s″` by centered differences at step `10⁻³/√λ`.
    pub fn ode_residual(&self, k: usize, tau: f64, samples: usize) -> f64 {
        let l = self.lambdas[k];
        let e = 1e-3 / l.sqrt();
        let scale = l * (1.0 / l.sqrt()).min(tau);
        (0..=samples)
            .map(|i| {
                let t = tau * i as f64 / samples as f64;
                let d2 = (self.eval(k, t + e) - 2.0 * self.eval(k, t) + self.eval(k, t - e)) / (e * e);
                (d2 + l * self.eval(k, t)).abs() / scale
            })
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Traces

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveRoute {
    Stepping,
    Formula,
}

/// Boundary flux on `Σ = Γ × [0, τ]` for each probe, sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveTrace {
    pub tau: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub route: WaveRoute,
    pub probes: Vec<WaveProbe>,
    /// `traces[p][n]`: flux of probe `p` at `times[n]`, per boundary unknown.
    pub traces: Vec<Vec<Vec<f64>>>,
    pub weight: Vec<f64>,
    /// Per-probe bound on the dropped modes (formula route only).
    pub tail_bounds: Option<Vec<f64>>,
    /// Probes whose profile only meets the relaxed smoothness class.
    pub relaxed: Vec<bool>,
}

/// `(∫₀^τ ‖f(t)‖²_W dt)^{1/2}` by the trapezoidal rule on the grid.
pub fn l2_sigma(values: &[Vec<f64>], times: &[f64], w: &[f64]) -> f64 {
    let sq: Vec<f64> = values.iter().map(|v| weighted_dot(v, v, w)).collect();
    let mut acc = 0.0;
    for n in 1..times.len() {
        acc += 0.5 * (times[n] - times[n - 1]) * (sq[n] + sq[n - 1]);
    }
    acc.sqrt()
}

fn sub(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect()
}

impl WaveTrace {
    pub fn norm(&self, p: usize) -> f64 {
        l2_sigma(&self.traces[p], &self.times, &self.weight)
    }

    /// Per-probe `‖self − other‖_{L²(Σ)} / ‖other‖_{L²(Σ)}`.
    pub fn relative_discrepancy(&self, other: &WaveTrace) -> Result<Vec<f64>> {
        if self.traces.len() != other.traces.len() || self.times.len() != other.times.len() {
            return Err(Error::Mismatch("traces on different probe sets or time grids".into()));
        }
        Ok((0..self.traces.len())
            .map(|p| {
                let d = l2_sigma(&sub(&self.traces[p], &other.traces[p]), &self.times, &self.weight);
                let n = other.norm(p);
                if n > 0.0 {
                    d / n
                } else {
                    d
                }
            })
            .collect())
    }

    /// Long format: `probe, step, t, dof, value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.csv_bytes()?)
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["probe", "step", "t", "dof", "value"])?;
        for (p, tr) in self.traces.iter().enumerate() {
            for (n, row) in tr.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    w.write_record(&[
                        p.to_string(),
                        n.to_string(),
                        format!("{:.17e}", self.times[n]),
                        b.to_string(),
                        format!("{v:.17e}"),
                    ])?;
                }
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn time_grid(tau: f64, dt: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && dt > 0.0) {
        return Err(Error::Invalid(format!("need τ > 0 and dt > 0, got τ = {tau}, dt = {dt}")));
    }
    let n = (tau / dt).round() as usize;
    if n == 0 || ((n as f64) * dt - tau).abs() > 1e-9 * tau {
        return Err(Error::Invalid(format!("dt = {dt} does not divide τ = {tau}")));
    }
    Ok((0..=n).map(|i| tau * i as f64 / n as f64).collect())
}

// ---------------------------------------------------------------------------
// Stepping route

/// `h/(√n·√α)`.
pub fn cfl_limit(op: &OperatorPair) -> f64 {
    op.h() / ((op.dim as f64).sqrt() * op.alpha.sqrt())
}

fn check_step(op: &OperatorPair, dt: f64) -> Result<()> {
    let limit = cfl_limit(op);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, limit });
    }
    Ok(())
}

fn energy(op: &OperatorPair, u_new: &[f64], u_old: &[f64], dt: f64) -> f64 {
    // Leapfrog invariant ½‖(uⁿ⁺¹−uⁿ)/dt‖²_M + ½ (uⁿ⁺¹)ᵀ K uⁿ.
    let ku = spmv(&op.k_ii, u_old);
    let mut e = 0.0;
    for i in 0..u_new.len() {
        let v = (u_new[i] - u_old[i]) / dt;
        e += 0.5 * op.m_ii[i] * v * v + 0.5 * u_new[i] * ku[i];
    }
    e
}

/// Energies `E^{n+1/2}` of a stepping run, one per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyHistory {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
}

impl EnergyHistory {
    /// `max |E − E₀| / E₀`.
    pub fn relative_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max) / e0.abs().max(f64::MIN_POSITIVE)
    }
}

struct Run {
    flux: Vec<Vec<f64>>,
    energy: Vec<f64>,
}

const BLOWUP_FACTOR: f64 = 1e3;

fn leapfrog(
    op: &OperatorPair,
    probe: Option<&WaveProbe>,
    u0: &[f64],
    v0: &[f64],
    times: &[f64],
    dt: f64,
) -> Result<Run> {
    let ni = op.n_interior();
    let nb = op.n_boundary();
    let zero_b = vec![0.0; nb];
    let h_at = |t: f64| -> Vec<f64> {
        match probe {
            Some(p) => {
                let e = p.profile.eval(t);
                p.phi.iter().map(|x| x * e).collect()
            }
            None => zero_b.clone(),
        }
    };
    let acc = |u: &[f64], h: &[f64]| -> Vec<f64> {
        let mut r = spmv(&op.k_ii, u);
        spmv_acc(&op.k_ib, h, &mut r);
        r.iter().zip(&op.m_ii).map(|(x, m)| -x / m).collect()
    };
    let flux = |u: &[f64], t: f64| -> Vec<f64> {
        let mut r = spmv(&op.k_bi, u);
        if let Some(p) = probe {
            let e = p.profile.eval(t);
            let e2 = p.profile.derivative(2, t);
            let hb: Vec<f64> = p.phi.iter().map(|x| x * e).collect();
            spmv_acc(&op.k_bb, &hb, &mut r);
            for b in 0..nb {
                r[b] += op.m_bb[b] * p.phi[b] * e2;
            }
        }
        r.iter().zip(&op.w).map(|(x, w)| x / w).collect()
    };

    // Energy scale from the initial state and the harmonic lift of the data.
    let mut bound = {
        let a0 = acc(u0, &zero_b);
        let mut e = 0.0;
        for i in 0..ni {
            e += 0.5 * op.m_ii[i] * v0[i] * v0[i] - 0.5 * u0[i] * a0[i] * op.m_ii[i];
        }
        e
    };
    if let Some(p) = probe {
        let lift = op.lift(&p.phi)?;
        let kl = spmv(&op.k_ii, &lift);
        let ml: f64 = lift.iter().zip(&op.m_ii).map(|(x, m)| m * x * x).sum();
        let kk: f64 = lift.iter().zip(&kl).map(|(x, y)| x * y).sum();
        let tau = *times.last().expect("grid");
        let e1 = p.profile.sup_derivative(1);
        let e0 = p.profile.sup_derivative(0);
        bound += (0.5 * e1 * e1 * ml + 0.5 * e0 * e0 * kk.abs()) * (1.0 + tau * tau);
    }
    let bound = BLOWUP_FACTOR * bound.max(f64::MIN_POSITIVE);

    let mut out = Run {
        flux: Vec::with_capacity(times.len()),
        energy: Vec::with_capacity(times.len()),
    };
    let mut prev = u0.to_vec();
    out.flux.push(flux(&prev, times[0]));
    let a = acc(&prev, &h_at(times[0]));
    let mut cur: Vec<f64> = (0..ni).map(|i| prev[i] + dt * v0[i] + 0.5 * dt * dt * a[i]).collect();
    for n in 1..times.len() {
        let e = energy(op, &cur, &prev, dt);
        if !e.is_finite() || e > bound {
            return Err(Error::EnergyBlowup { step: n, energy: e, bound });
        }
        out.energy.push(e);
        out.flux.push(flux(&cur, times[n]));
        if n + 1 == times.len() {
            break;
        }
        let a = acc(&cur, &h_at(times[n]));
        let next: Vec<f64> = (0..ni).map(|i| 2.0 * cur[i] - prev[i] + dt * dt * a[i]).collect();
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(out)
}

/// Leapfrog solution of the wave problem from rest with boundary data `h`,
/// returning the conormal flux `W⁻¹[M_BB ḧ + K_BB h + K_BI u_I]`.
pub fn wave_step(op: &OperatorPair, probes: &[WaveProbe], tau: f64, dt: f64) -> Result<WaveTrace> {
    check_step(op, dt)?;
    let times = time_grid(tau, dt)?;
    let ni = op.n_interior();
    for p in probes {
        if p.phi.len() != op.n_boundary() {
            return Err(Error::Mismatch("probe does not match the boundary".into()));
        }
    }
    let z = vec![0.0; ni];
    let traces = probes
        .par_iter()
        .map(|p| leapfrog(op, Some(p), &z, &z, &times, dt).map(|r| r.flux))
        .collect::<Result<Vec<_>>>()?;
    Ok(WaveTrace {
        tau,
        dt,
        times,
        route: WaveRoute::Stepping,
        probes: probes.to_vec(),
        traces,
        weight: op.w.clone(),
        tail_bounds: None,
        relaxed: vec![false; probes.len()],
    })
}

/// Homogeneous-data run from `(u₀, v₀)`; returns the leapfrog energy per step.
pub fn wave_homogeneous(op: &OperatorPair, u0: &[f64], v0: &[f64], tau: f64, dt: f64) -> Result<EnergyHistory> {
    check_step(op, dt)?;
    let times = time_grid(tau, dt)?;
    if u0.len() != op.n_interior() || v0.len() != op.n_interior() {
        return Err(Error::Mismatch("initial data does not match the interior".into()));
    }
    let r = leapfrog(op, None, u0, v0, &times, dt)?;
    Ok(EnergyHistory {
        times: times[1..].to_vec(),
        energy: r.energy,
    })
}

// ---------------------------------------------------------------------------
// Formula route

/// Remainder order used by default: `n + 1`.
pub fn default_ell(n: usize) -> usize {
    n + 1
}

/// `∫₀^t s(t−s) p(s) ds` for `s = sin(√λ·)/√λ`, by adaptive Gauss–Kronrod.
pub fn sine_convolution<F: Fn(f64) -> f64>(lambda: f64, t: f64, p: F) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let w = lambda.sqrt();
    let scale = (t / w) * [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|f| p(f * t).abs()).fold(0.0, f64::max);
    let tol = Tolerance {
        abs: 1e-13 * scale.max(f64::MIN_POSITIVE),
        rel: 1e-12,
        max_intervals: 4000,
    };
    Ok(integrate(|s| (w * (t - s)).sin() / w * p(s), 0.0, t, tol)?.value)
}

/// Exact `∫₀^t s(t−s) η^{(d)}(s) ds` for a polynomial profile, by repeated
/// integration by parts. The alternating sum cancels badly when `λ` is small
/// next to the profile's high derivatives.
pub fn sine_convolution_exact(profile: &TimeProfile, d: usize, lambda: f64, t: f64) -> f64 {
    let w = lambda.sqrt();
    let deg = profile.degree();
    let (mut at_t, mut at0, mut at0d) = (0.0, 0.0, 0.0);
    let mut j = 0;
    while d + 2 * j <= deg {
        let sgn = if j % 2 == 0 { 1.0 } else { -1.0 };
        let lp = lambda.powi(j as i32 + 1);
        at_t += sgn * profile.derivative(d + 2 * j, t) / lp;
        at0 += sgn * profile.derivative(d + 2 * j, 0.0) / lp;
        at0d += sgn * profile.derivative(d + 2 * j + 1, 0.0) / lp;
        j += 1;
    }
    at_t - (w * t).cos() * at0 - (w * t).sin() / w * at0d
}

/// `ρ_k(t)` with `∂_ν r(t) = Σ_k ⟨φ, ψ_k⟩ ρ_k(t) ψ_k` for separable data.
///
/// `ρ = −λ^{−(ℓ+1)} ∫₀^t s(t−s) (−1)^{ℓ+1} η^{(2ℓ+2)}(s) ds − p(0) cos(√λ t) − p′(0) s(t)`
/// with `p = −Σ_{j≤ℓ} (−1)^j η^{(2j)}/λ^{j+1}` the modal coefficient of the
/// Taylor part; the last two terms vanish when `η` vanishes to order `2ℓ+2` at 0.
fn remainder_profile(profile: &TimeProfile, lambda: f64, ell: usize, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = lambda.sqrt();
    let sgn = if (ell + 1) % 2 == 0 { 1.0 } else { -1.0 };
    let lp = lambda.powi(ell as i32 + 1);
    let (mut p0, mut p0d) = (0.0, 0.0);
    for j in 0..=ell {
        let s = if j % 2 == 0 { 1.0 } else { -1.0 };
        let l = lambda.powi(j as i32 + 1);
        p0 -= s * profile.derivative(2 * j, 0.0) / l;
        p0d -= s * profile.derivative(2 * j + 1, 0.0) / l;
    }
    let d = 2 * ell + 2;
    let mut conv = Vec::with_capacity(times.len());
    let mut rho = Vec::with_capacity(times.len());
    for &t in times {
        let c = if d > profile.degree() {
            0.0
        } else {
            sine_convolution(lambda, t, |s| profile.derivative(d, s))?
        };
        let f = sgn * c;
        conv.push(f);
        rho.push(-f / lp - p0 * (w * t).cos() - p0d * (w * t).sin() / w);
    }
    Ok((rho, conv))
}

fn check_derivs(derivs: &[DtnOperator], ell: usize, nb: usize) -> Result<()> {
    if derivs.len() < ell + 1 {
        return Err(Error::Missing(format!(
            "Λ^(j)(0) for j = 0..{ell}; only {} supplied",
            derivs.len()
        )));
    }
    for (j, d) in derivs.iter().take(ell + 1).enumerate() {
        if d.order != j || d.lambda != 0.0 || d.dim() != nb {
            return Err(Error::Mismatch(format!("derivative operator {j} is not Λ^({j})(0) on this boundary")));
        }
    }
    Ok(())
}

fn check_profile(p: &TimeProfile, ell: usize) -> Result<bool> {
    let need = 2 * ell + 2;
    let have = p.power as usize;
    if have + 1 < need {
        return Err(Error::Invalid(format!(
            "time profile vanishes to order {have} at t = 0; the remainder of order {ell} needs {need} (or {} under the relaxed class)",
            need - 1
        )));
    }
    Ok(have + 1 == need)
}

fn taylor_part(derivs: &[DtnOperator], probe: &WaveProbe, ell: usize, times: &[f64]) -> Vec<Vec<f64>> {
    let applied: Vec<Vec<f64>> = derivs.iter().take(ell + 1).map(|d| d.apply(&probe.phi)).collect();
    times
        .iter()
        .map(|&t| {
            let mut v = vec![0.0; probe.phi.len()];
            for (j, a) in applied.iter().enumerate() {
                let c = probe.profile.derivative(2 * j, t) / factorial(j);
                for (x, y) in v.iter_mut().zip(a) {
                    *x += c * y;
                }
            }
            v
        })
        .collect()
}

fn modal_tail_bound(sd: &SpectralData, probe: &WaveProbe, ell: usize) -> f64 {
    let k = sd.k();
    if k >= sd.n_total {
        return 0.0;
    }
    let est = sd.estimates();
    let nf = sd.dim as f64;
    let tau = probe.profile.tau;
    let phi = weighted_norm(&probe.phi, &sd.boundary_weight);
    let sup = probe.profile.sup_derivative(2 * ell + 2);
    let mut acc = Vec::new();
    for kk in (k + 1)..=sd.n_total {
        let x = kk as f64;
        // Weyl lower bound, floored by the last retained eigenvalue.
        let l = (x.powf(2.0 / nf) / est.theta).max(*sd.lambdas.last().expect("modes"));
        let psi2 = est.c_trace * est.c_trace * x.powf(7.0 / (2.0 * nf));
        let mut p0 = 0.0;
        for j in 0..=ell {
            p0 += probe.profile.derivative(2 * j, 0.0).abs() / l.powi(j as i32 + 1)
                + probe.profile.derivative(2 * j + 1, 0.0).abs() / (l.powi(j as i32 + 1) * l.sqrt());
        }
        acc.push(psi2 * (sup * tau.min(1.0 / l.sqrt()) * tau / l.powi(ell as i32 + 1) + p0));
    }
    phi * crate::linalg::compensated_sum(acc)
}

/// Coefficients `⟨φ, ψ_k⟩_W`.
fn flux_coefficients(sd: &SpectralData, phi: &[f64], w: &[f64]) -> Vec<f64> {
    (0..sd.k())
        .map(|k| weighted_dot(phi, sd.psi(k).as_slice().expect("row"), w))
        .collect()
}

/// Per-mode profiles `ρ_k` and plain convolutions on the grid.
fn mode_profiles(sd: &SpectralData, profile: &TimeProfile, ell: usize, times: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    sd.lambdas
        .par_iter()
        .map(|&l| remainder_profile(profile, l, ell, times))
        .collect()
}

/// `Π h(t) = Σ_{j≤ℓ} Λ^{(j)}(0) η^{(2j)}(t) φ / j! + ∂_ν r(t)`, with the
/// remainder expanded over the retained modes.
pub fn wave_formula(
    sd: &SpectralData,
    derivs: &[DtnOperator],
    probes: &[WaveProbe],
    ell: usize,
    tau: f64,
    dt: f64,
) -> Result<WaveTrace> {
    let nb = sd.n_boundary();
    check_derivs(derivs, ell, nb)?;
    let times = time_grid(tau, dt)?;
    let mut traces = Vec::with_capacity(probes.len());
    let mut tails = Vec::with_capacity(probes.len());
    let mut relaxed = Vec::with_capacity(probes.len());
    for p in probes {
        if p.phi.len() != nb {
            return Err(Error::Mismatch("probe does not match the boundary".into()));
        }
        relaxed.push(check_profile(&p.profile, ell)?);
        let mut tr = taylor_part(derivs, p, ell, &times);
        let c = flux_coefficients(sd, &p.phi, &sd.boundary_weight);
        let rho = mode_profiles(sd, &p.profile, ell, &times)?;
        for (k, (r, _)) in rho.iter().enumerate() {
            let psi = sd.psi(k);
            for (n, v) in tr.iter_mut().enumerate() {
                let a = c[k] * r[n];
                for (x, y) in v.iter_mut().zip(psi.iter()) {
                    *x += a * y;
                }
            }
        }
        traces.push(tr);
        tails.push(modal_tail_bound(sd, p, ell));
    }
    Ok(WaveTrace {
        tau,
        dt,
        times,
        route: WaveRoute::Formula,
        probes: probes.to_vec(),
        traces,
        weight: sd.boundary_weight.clone(),
        tail_bounds: Some(tails),
        relaxed,
    })
}

/// Discrete check that `M ∂_t²(Σ_j w_j) + K_II Σ_j w_j + K_IB h = M ∂_t² w_ℓ`,
/// with `w_j = a_j η^{(2j)}`, `K_II a_0 = −K_IB φ`, `K_II a_j = −M a_{j−1}`.
/// `∂_t²` is a centered difference at step `dt`; returns the relative residual
/// at each grid time, which is `O(dt²)`.
pub fn telescoping_defect(op: &OperatorPair, probe: &WaveProbe, ell: usize, tau: f64, dt: f64) -> Result<Vec<f64>> {
    let times = time_grid(tau, dt)?;
    let solver = op.shifted_solver(0.0, None)?;
    let mut a = vec![op.solve_interior(&solver, &probe.phi)?];
    for j in 1..=ell {
        let mut r: Vec<f64> = a[j - 1].iter().zip(&op.m_ii).map(|(x, m)| -x * m).collect();
        solver.solve_many(&mut r, 1)?;
        a.push(r);
    }
    let ni = op.n_interior();
    let field = |t: f64| -> Vec<f64> {
        let mut u = vec![0.0; ni];
        for (j, aj) in a.iter().enumerate() {
            let e = probe.profile.derivative(2 * j, t);
            for (x, y) in u.iter_mut().zip(aj) {
                *x += e * y;
            }
        }
        u
    };
    let mut out = Vec::with_capacity(times.len());
    for &t in &times {
        let (um, u0, up) = (field(t - dt), field(t), field(t + dt));
        let mut r = spmv(&op.k_ii, &u0);
        let hb: Vec<f64> = probe.phi.iter().map(|x| x * probe.profile.eval(t)).collect();
        spmv_acc(&op.k_ib, &hb, &mut r);
        let el = probe.profile.derivative(2 * ell + 2, t);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..ni {
            let acc = (up[i] - 2.0 * u0[i] + um[i]) / (dt * dt);
            let lhs = op.m_ii[i] * acc + r[i];
            let rhs = op.m_ii[i] * a[ell][i] * el;
            num += (lhs - rhs) * (lhs - rhs);
            den += lhs * lhs + rhs * rhs + (op.m_ii[i] * acc).powi(2);
        }
        out.push(if den > 0.0 { (num / den).sqrt() } else { 0.0 });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Difference of two records

/// A boundary spectral record together with `Λ^{(j)}(0)`, `j = 0..ℓ`.
#[derive(Debug, Clone, Copy)]
pub struct HyperbolicRecord<'a> {
    pub sd: &'a SpectralData,
    pub derivs: &'a [DtnOperator],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDifference {
    /// `‖Π¹h − Π²h‖_{L²(Σ)}`.
    pub total: f64,
    pub taylor: f64,
    /// Convolution part of the remainder difference and its four pieces.
    pub remainder: f64,
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub i4: f64,
    /// `‖I₁+I₂+I₃+I₄ − (R¹−R²)‖ / ‖R¹−R²‖`.
    pub split_residual: f64,
    /// Difference of the initial-defect corrections (zero for profiles
    /// vanishing to order `2ℓ+2`).
    pub initial_defect: f64,
    /// `Σ_{j≤ℓ+1} ‖∂_t^{2j} h‖_{L²(Σ)}`, the declared probe norm.
    pub probe_norm: f64,
    /// `total / (δ · probe_norm)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicDifference {
    pub ell: usize,
    pub delta: f64,
    pub probes: Vec<ProbeDifference>,
    pub max_ratio: f64,
    pub max_split_residual: f64,
}

fn axpy_rows(dst: &mut [Vec<f64>], a: &[f64], v: ndarray::ArrayView1<'_, f64>) {
    for (n, row) in dst.iter_mut().enumerate() {
        if a[n] != 0.0 {
            for (x, y) in row.iter_mut().zip(v.iter()) {
                *x += a[n] * y;
            }
        }
    }
}

fn zeros(nt: usize, nb: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; nb]; nt]
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Compares `Π¹` and `Π²` on the probes after aligning the second record's
/// modes to the first's; all inner products use the first record's
/// boundary weight.
pub fn hyperbolic_difference(
    rec1: HyperbolicRecord<'_>,
    rec2: HyperbolicRecord<'_>,
    probes: &[WaveProbe],
    ell: usize,
    tau: f64,
    dt: f64,
) -> Result<HyperbolicDifference> {
    if !rec1.sd.same_discretization(rec2.sd) || rec1.sd.k() != rec2.sd.k() {
        return Err(Error::Mismatch("records differ in mesh or mode count".into()));
    }
    let nb = rec1.sd.n_boundary();
    check_derivs(rec1.derivs, ell, nb)?;
    check_derivs(rec2.derivs, ell, nb)?;
    let times = time_grid(tau, dt)?;
    let pairing = pair_modes(rec1.sd, rec2.sd)?;
    let (s1, s2) = align(rec1.sd, rec2.sd, &pairing)?;
    let delta = compute_delta(&s1, &s2, 1.0, 1.0, None)?.delta;
    let w = &s1.boundary_weight;
    let nt = times.len();
    let a = ell as i32 + 1;

    let mut out = Vec::with_capacity(probes.len());
    for p in probes {
        if p.phi.len() != nb {
            return Err(Error::Mismatch("probe does not match the boundary".into()));
        }
        check_profile(&p.profile, ell)?;
        let dtay = sub(&taylor_part(rec1.derivs, p, ell, &times), &taylor_part(rec2.derivs, p, ell, &times));
        let c1 = flux_coefficients(&s1, &p.phi, w);
        let c2 = flux_coefficients(&s2, &p.phi, w);
        let m1 = mode_profiles(&s1, &p.profile, ell, &times)?;
        let m2 = mode_profiles(&s2, &p.profile, ell, &times)?;
        let (mut i1, mut i2, mut i3, mut i4) = (zeros(nt, nb), zeros(nt, nb), zeros(nt, nb), zeros(nt, nb));
        let (mut r1, mut r2, mut defect) = (zeros(nt, nb), zeros(nt, nb), zeros(nt, nb));
        for k in 0..s1.k() {
            let (l1, l2) = (s1.lambdas[k], s2.lambdas[k]);
            let (psi1, psi2) = (s1.psi(k), s2.psi(k));
            let dpsi = &psi1 - &psi2;
            let dc = weighted_dot(&p.phi, dpsi.as_slice().expect("row"), w);
            let (rho1, f1) = &m1[k];
            let (rho2, f2) = &m2[k];
            let (ia, ib) = (l1.powi(-a), l2.powi(-a));
            let scaled = |f: &[f64], s: f64| -> Vec<f64> { f.iter().map(|x| -s * x).collect() };
            axpy_rows(&mut i1, &scaled(f1, (ia - ib) * c1[k]), psi1);
            axpy_rows(&mut i2, &scaled(f1, ib * dc), psi1);
            let df: Vec<f64> = f1.iter().zip(f2).map(|(x, y)| x - y).collect();
            axpy_rows(&mut i3, &scaled(&df, ib * c2[k]), psi1);
            axpy_rows(&mut i4, &scaled(f2, ib * c2[k]), dpsi.view());
            axpy_rows(&mut r1, &scaled(f1, ia * c1[k]), psi1);
            axpy_rows(&mut r2, &scaled(f2, ib * c2[k]), psi2);
            // Initial-defect parts: ρ + f/λ^{ℓ+1}.
            let d1: Vec<f64> = rho1.iter().zip(f1).map(|(r, f)| c1[k] * (r + f * ia)).collect();
            let d2: Vec<f64> = rho2.iter().zip(f2).map(|(r, f)| -c2[k] * (r + f * ib)).collect();
            axpy_rows(&mut defect, &d1, psi1);
            axpy_rows(&mut defect, &d2, psi2);
        }
        let dr = sub(&r1, &r2);
        let sum = add(&add(&i1, &i2), &add(&i3, &i4));
        let nr = l2_sigma(&dr, &times, w);
        let split = l2_sigma(&sub(&sum, &dr), &times, w);
        let total = add(&add(&dtay, &dr), &defect);
        let t = l2_sigma(&total, &times, w);
        let hnorm: f64 = (0..=ell + 1)
            .map(|j| {
                let vals: Vec<Vec<f64>> = times
                    .iter()
                    .map(|&s| {
                        let e = p.profile.derivative(2 * j, s);
                        p.phi.iter().map(|x| x * e).collect()
                    })
                    .collect();
                l2_sigma(&vals, &times, w)
            })
            .sum();
        let ratio = if t == 0.0 {
            0.0
        } else if delta > 0.0 && hnorm > 0.0 {
            t / (delta * hnorm)
        } else {
            f64::INFINITY
        };
        out.push(ProbeDifference {
            total: t,
            taylor: l2_sigma(&dtay, &times, w),
            remainder: nr,
            i1: l2_sigma(&i1, &times, w),
            i2: l2_sigma(&i2, &times, w),
            i3: l2_sigma(&i3, &times, w),
            i4: l2_sigma(&i4, &times, w),
            split_residual: {
                let scale = l2_sigma(&r1, &times, w) + l2_sigma(&r2, &times, w);
                if scale > 0.0 { split / scale } else { split }
            },
            initial_defect: l2_sigma(&defect, &times, w),
            probe_norm: hnorm,
            ratio,
        });
    }
    Ok(HyperbolicDifference {
        ell,
        delta,
        max_ratio: out.iter().map(|p| p.ratio).fold(0.0, f64::max),
        max_split_residual: out.iter().map(|p| p.split_residual).fold(0.0, f64::max),
        probes: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble;
    use crate::elliptic_dtn::direct_chain;
    use crate::geometry::{build_box_mesh, make_field, Bounds, Expression, FieldKind, Mesh};
    use crate::spectral::eigensolve;

    fn setup(r: usize) -> (Mesh, OperatorPair) {
        let m = build_box_mesh(2, r).unwrap();
        let f = make_field(&m, FieldKind::Metric, &Expression::identity(), None, Bounds::default()).unwrap();
        let op = assemble(&m, &f).unwrap();
        (m, op)
    }

    fn boundary_values(m: &Mesh, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        m.boundary.iter().map(|&v| f(m.coords(v))).collect()
    }

    #[test]
    fn profile_derivatives() {
        let p = TimeProfile::new(3, 2, 2.0);
        // η = t³(1 − t/2)² = t³ − t⁴ + t⁵/4
        let t = 0.7;
        assert!((p.eval(t) - (t.powi(3) - t.powi(4) + t.powi(5) / 4.0)).abs() < 1e-14);
        assert!((p.derivative(2, t) - (6.0 * t - 12.0 * t * t + 5.0 * t.powi(3))).abs() < 1e-13);
        assert_eq!(p.derivative(6, t), 0.0);
        assert!(p.eval(2.0).abs() < 1e-14);
        let q: TimeProfile = serde_json::from_str(r#"{"power":3,"window":2,"tau":2.0}"#).unwrap();
        assert!((q.derivative(2, t) - p.derivative(2, t)).abs() < 1e-14);
    }

    #[test]
    fn sine_kernel_ode() {
        let s = SineKernel::new(&[1.0, 50.0, 4000.0]);
        for k in 0..3 {
            assert_eq!(s.eval(k, 0.0), 0.0);
            assert_eq!(s.derivative(k, 0.0), 1.0);
            assert!(s.ode_residual(k, 1.0, 200) <= 1e-6);
        }
    }

    #[test]
    fn convolution_matches_closed_forms() {
        // Constant source: ∫ s(t−s) ds = (1 − cos √λ t)/λ.
        for &l in &[1.0, 37.0, 2500.0] {
            let t = 0.83;
            let v = sine_convolution(l, t, |_| 1.0).unwrap();
            assert!((v - (1.0 - (l.sqrt() * t).cos()) / l).abs() < 1e-10);
            if l < 10.0 {
                continue;
            }
            let p = TimeProfile::new(9, 3, 1.0);
            let e = sine_convolution_exact(&p, 2, l, t);
            let q = sine_convolution(l, t, |s| p.derivative(2, s)).unwrap();
            assert!((e - q).abs() <= 1e-10 * e.abs().max(1e-3), "{e} {q}");
        }
    }

    #[test]
    fn zero_data_gives_zero_traces() {
        let (m, op) = setup(8);
        let sd = eigensolve(&op, 20).unwrap();
        let derivs = direct_chain(&op, 0.0, 3, None).unwrap();
        let p = WaveProbe {
            phi: vec![0.0; m.n_boundary()],
            profile: TimeProfile::monomial(8, 1.0),
        };
        let dt = 1.0 / 64.0;
        let a = wave_step(&op, &[p.clone()], 1.0, dt).unwrap();
        let b = wave_formula(&sd, &derivs, &[p], 3, 1.0, dt).unwrap();
        assert!(a.traces[0].iter().flatten().all(|x| *x == 0.0));
        assert!(b.traces[0].iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn cfl_is_enforced() {
        let (_, op) = setup(8);
        let lim = cfl_limit(&op);
        assert!((lim - 1.0 / 16.0).abs() < 1e-15);
        assert!(matches!(wave_step(&op, &[], 1.0, 0.1), Err(Error::Cfl { .. })));
    }

    #[test]
    fn homogeneous_energy_is_conserved() {
        let (m, op) = setup(16);
        let iv = &m.interior;
        let u0: Vec<f64> = iv
            .iter()
            .map(|&v| {
                let x = m.coords(v);
                (std::f64::consts::PI * x[0]).sin() * (2.0 * std::f64::consts::PI * x[1]).sin()
            })
            .collect();
        let v0: Vec<f64> = iv.iter().map(|&v| m.coords(v)[0] * (1.0 - m.coords(v)[0]) * m.coords(v)[1]).collect();
        let e = wave_homogeneous(&op, &u0, &v0, 2.0, 1.0 / 64.0).unwrap();
        assert!(e.relative_drift() < 1e-10, "{}", e.relative_drift());
    }

    #[test]
    fn t8_remainder_matches_closed_form() {
        let (m, op) = setup(8);
        let sd = eigensolve(&op, 49).unwrap();
        let derivs = direct_chain(&op, 0.0, 3, None).unwrap();
        let phi = boundary_values(&m, |x| (x[0] + 2.0 * x[1]).cos());
        let p = WaveProbe {
            phi: phi.clone(),
            profile: TimeProfile::monomial(8, 1.0),
        };
        let dt = 1.0 / 32.0;
        let tr = wave_formula(&sd, &derivs, &[p.clone()], 3, 1.0, dt).unwrap();
        let tay = taylor_part(&derivs, &p, 3, &tr.times);
        let c = flux_coefficients(&sd, &phi, &sd.boundary_weight);
        for (n, &t) in tr.times.iter().enumerate() {
            let mut expect = vec![0.0; phi.len()];
            for k in 0..sd.k() {
                let l = sd.lambdas[k];
                let a = -40320.0 * c[k] * (1.0 - (l.sqrt() * t).cos()) / l.powi(5);
                for (x, y) in expect.iter_mut().zip(sd.psi(k).iter()) {
                    *x += a * y;
                }
            }
            for b in 0..phi.len() {
                let got = tr.traces[0][n][b] - tay[n][b];
                assert!((got - expect[b]).abs() <= 1e-10 * (1.0 + expect[b].abs()), "{got} {}", expect[b]);
            }
        }
    }

    #[test]
    fn routes_agree_and_relaxed_profile_is_flagged() {
        let (m, op) = setup(16);
        let sd = eigensolve(&op, op.n_interior()).unwrap();
        let derivs = direct_chain(&op, 0.0, 3, None).unwrap();
        let phi = boundary_values(&m, |x| 1.0 + x[0] * x[1] + (3.0 * x[1]).sin());
        let probes = vec![
            WaveProbe {
                phi: phi.clone(),
                profile: TimeProfile::monomial(7, 1.0),
            },
            WaveProbe {
                phi,
                profile: TimeProfile::new(8, 4, 1.0),
            },
        ];
        let dt = 1.0 / 256.0;
        let a = wave_step(&op, &probes, 1.0, dt).unwrap();
        let b = wave_formula(&sd, &derivs, &probes, 3, 1.0, dt).unwrap();
        assert_eq!(b.relaxed, vec![true, false]);
        assert_eq!(b.tail_bounds.as_ref().unwrap(), &vec![0.0, 0.0]);
        let d = a.relative_discrepancy(&b).unwrap();
        assert!(d.iter().all(|x| *x < 1e-2), "{d:?}");
        // Second order in time.
        let a2 = wave_step(&op, &probes, 1.0, dt / 2.0).unwrap();
        let b2 = wave_formula(&sd, &derivs, &probes, 3, 1.0, dt / 2.0).unwrap();
        let d2 = a2.relative_discrepancy(&b2).unwrap();
        for i in 0..2 {
            let rate = (d[i] / d2[i]).log2();
            assert!(rate > 1.8, "rate {rate}");
        }
    }

    #[test]
    fn insufficient_smoothness_is_rejected() {
        let (m, op) = setup(8);
        let sd = eigensolve(&op, 10).unwrap();
        let derivs = direct_chain(&op, 0.0, 3, None).unwrap();
        let p = WaveProbe {
            phi: vec![1.0; m.n_boundary()],
            profile: TimeProfile::monomial(5, 1.0),
        };
        assert!(wave_formula(&sd, &derivs, &[p.clone()], 3, 1.0, 0.05).is_err());
        assert!(matches!(wave_formula(&sd, &derivs[..2], &[p], 3, 1.0, 0.05), Err(Error::Missing(_))));
    }

    #[test]
    fn telescoping_is_second_order() {
        let (m, op) = setup(8);
        let p = WaveProbe {
            phi: boundary_values(&m, |x| x[0] * x[1] + 1.0),
            profile: TimeProfile::new(9, 2, 1.0),
        };
        let a = telescoping_defect(&op, &p, 3, 1.0, 1.0 / 16.0).unwrap();
        let b = telescoping_defect(&op, &p, 3, 1.0, 1.0 / 32.0).unwrap();
        let ma = a[8];
        let mb = b[16];
        assert!(ma < 1e-1 && (ma / mb).log2() > 1.8, "{ma} {mb}");
    }

    #[test]
    fn identical_records_have_zero_difference() {
        let (m, op) = setup(8);
        let sd = eigensolve(&op, 30).unwrap();
        let derivs = direct_chain(&op, 0.0, 3, None).unwrap();
        let p = WaveProbe {
            phi: boundary_values(&m, |x| x[0] + x[1] * x[1]),
            profile: TimeProfile::new(8, 2, 1.0),
        };
        let r = HyperbolicRecord { sd: &sd, derivs: &derivs };
        let d = hyperbolic_difference(r, r, &[p], 3, 1.0, 1.0 / 16.0).unwrap();
        let q = &d.probes[0];
        assert_eq!((q.total, q.i1, q.i2, q.i3, q.i4), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn lambda_only_perturbation_splits_into_i1_i3() {
        let (m, op) = setup(8);
        let sd = eigensolve(&op, 30).unwrap();
        let derivs = direct_chain(&op, 0.0, 3, None).unwrap();
        let mut sd2 = sd.clone();
        for l in sd2.lambdas.iter_mut() {
            *l *= 1.0 + 1e-3;
        }
        let p = WaveProbe {
            phi: boundary_values(&m, |x| x[0] + x[1] * x[1]),
            profile: TimeProfile::new(8, 2, 1.0),
        };
        let d = hyperbolic_difference(
            HyperbolicRecord { sd: &sd, derivs: &derivs },
            HyperbolicRecord { sd: &sd2, derivs: &derivs },
            &[p],
            3,
            1.0,
            1.0 / 16.0,
        )
        .unwrap();
        let q = &d.probes[0];
        assert_eq!((q.i2, q.i4), (0.0, 0.0));
        assert!(q.i1 > 0.0 && q.i3 > 0.0);
        assert!(q.split_residual < 1e-12, "{}", q.split_residual);
    }
}

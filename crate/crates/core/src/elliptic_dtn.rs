//! Elliptic DtN maps `Λ(λ)` and their λ-derivatives, by direct solves and by
//! boundary spectral series, plus the Taylor and splitting machinery.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{check_guard_band, OperatorPair};
use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::linalg::{spectral_norm, spmv, sym_eig, weighted_dot, weighted_norm};
use crate::quadrature::{integrate, Tolerance};
use crate::spectral::{BoundaryLayer, SpectralData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Direct,
    Series,
    /// Series for the difference to a reference record, added to the
    /// reference's direct map.
    Accelerated,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailKind {
    /// Exact up to solver rounding.
    None,
    /// Upper bound from the empirical Weyl and trace constants.
    Certified,
    /// Extrapolated from the decay of the retained terms; not a bound.
    Estimate,
}

/// `Λ^{(j)}(λ)` acting on boundary unknowns; `matrix · φ` is the flux.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtnOperator {
    pub lambda: f64,
    pub order: usize,
    pub matrix: Array2<f64>,
    pub weight: Vec<f64>,
    pub route: Route,
    pub k_used: Option<usize>,
    /// Bound (or estimate, see `tail_kind`) on the L²(Γ) operator norm of
    /// the dropped part.
    pub tail_bound: f64,
    pub tail_kind: TailKind,
}

impl DtnOperator {
    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        self.matrix.dot(&ndarray::ArrayView1::from(phi)).to_vec()
    }

    /// Matrix of the operator in an orthonormal basis of the weighted space.
    pub fn weighted_matrix(&self) -> Array2<f64> {
        weighted_form(&self.matrix, &self.weight)
    }

    /// L²(Γ) → L²(Γ) operator norm.
    pub fn op_norm(&self) -> Result<f64> {
        spectral_norm(self.weighted_matrix().view())
    }

    /// Relative Frobenius asymmetry of the weighted matrix.
    pub fn symmetry_defect(&self) -> f64 {
        let b = self.weighted_matrix();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                num += (b[[i, j]] - b[[j, i]]).powi(2);
                den += b[[i, j]].powi(2);
            }
        }
        if den == 0.0 {
            0.0
        } else {
            (num / den).sqrt()
        }
    }

    /// `self − other` as a bare operator (direct route, no tail).
    pub fn minus(&self, other: &DtnOperator) -> Result<DtnOperator> {
        if self.dim() != other.dim() {
            return Err(Error::Mismatch("DtN operators on different boundaries".into()));
        }
        Ok(DtnOperator {
            matrix: &self.matrix - &other.matrix,
            tail_bound: self.tail_bound + other.tail_bound,
            tail_kind: worse_tail(self.tail_kind, other.tail_kind),
            ..self.clone()
        })
    }

    /// H^{1/2}(Γ) → H^{-1/2}(Γ) norm through fractional powers of the
    /// boundary Laplacian `(L, m)` from [`crate::assembly::boundary_laplacian`].
    pub fn h_half_norm(&self, laplacian: &(Array2<f64>, Vec<f64>)) -> Result<f64> {
        let p = self.quarter_power(laplacian)?;
        let core = weighted_form(&self.matrix, &laplacian.1);
        spectral_norm(p.dot(&core).dot(&p).view())
    }

    /// H^{1/2}(Γ) → L²(Γ) norm.
    pub fn h_half_to_l2_norm(&self, laplacian: &(Array2<f64>, Vec<f64>)) -> Result<f64> {
        let p = self.quarter_power(laplacian)?;
        let core = weighted_form(&self.matrix, &laplacian.1);
        spectral_norm(core.dot(&p).dot(&p).view())
    }

    /// `(I + L_s)^{-1/4}` in the orthonormal basis of the weighted space.
    fn quarter_power(&self, laplacian: &(Array2<f64>, Vec<f64>)) -> Result<Array2<f64>> {
        let (l, m) = laplacian;
        let nb = self.dim();
        if l.nrows() != nb {
            return Err(Error::Mismatch("boundary Laplacian size".into()));
        }
        let mut ls = l.clone();
        for i in 0..nb {
            for j in 0..nb {
                ls[[i, j]] /= (m[i] * m[j]).sqrt();
            }
        }
        let (mu, q) = sym_eig(ls.view())?;
        let mut qd = q.clone();
        for (c, &mk) in mu.iter().enumerate() {
            let s = (1.0 + mk.max(0.0)).powf(-0.25);
            qd.column_mut(c).mapv_inplace(|x| x * s);
        }
        Ok(qd.dot(&q.t()))
    }
}

fn worse_tail(a: TailKind, b: TailKind) -> TailKind {
    match (a, b) {
        (TailKind::Estimate, _) | (_, TailKind::Estimate) => TailKind::Estimate,
        (TailKind::Certified, _) | (_, TailKind::Certified) => TailKind::Certified,
        _ => TailKind::None,
    }
}

/// `W^{1/2} A W^{-1/2}`.
fn weighted_form(a: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let mut b = a.clone();
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            b[[i, j]] *= (w[i] / w[j]).sqrt();
        }
    }
    b
}

/// Convergence threshold `(n+3)/4` above which the plain flux series converges.
pub fn series_threshold(n: usize) -> f64 {
    (n as f64 + 3.0) / 4.0
}

pub(crate) fn factorial(j: usize) -> f64 {
    (1..=j).map(|i| i as f64).product()
}

/// `(−1)^{j+1} j!`
fn series_sign_factorial(j: usize) -> f64 {
    let s = if j % 2 == 0 { -1.0 } else { 1.0 };
    s * factorial(j)
}

// ---------------------------------------------------------------------------
// Direct route

/// `Λ(λ)` from one Dirichlet solve per boundary unknown.
pub fn dtn_direct(op: &OperatorPair, lambda: f64) -> Result<DtnOperator> {
    Ok(direct_chain(op, lambda, 0, None)?.remove(0))
}

/// `Λ^{(j)}(λ)` for `j = 0..=jmax` from the differentiated BVP chain
/// `S u^{(j)} = −j M u^{(j−1)}`, `S = K + λM`.
pub fn direct_chain(op: &OperatorPair, lambda: f64, jmax: usize, spectrum: Option<&[f64]>) -> Result<Vec<DtnOperator>> {
    let solver = op.shifted_solver(lambda, spectrum)?;
    let ni = op.n_interior();
    let nb = op.n_boundary();
    // Columns in blocks; each block is an independent multi-RHS solve.
    let block = 16usize;
    let starts: Vec<usize> = (0..nb).step_by(block).collect();
    let pieces: Vec<Result<(usize, Vec<Vec<Vec<f64>>>)>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + block).min(nb);
            let cols = e - s;
            let mut rhs = vec![0.0; ni * cols];
            for (c, b) in (s..e).enumerate() {
                let mut unit = vec![0.0; nb];
                unit[b] = 1.0;
                let kb = spmv(&op.k_ib, &unit);
                for i in 0..ni {
                    rhs[c * ni + i] = -kb[i];
                }
            }
            solver.solve_many(&mut rhs, cols)?;
            let mut per_order = Vec::with_capacity(jmax + 1);
            let mut fluxes = Vec::with_capacity(cols);
            for (c, b) in (s..e).enumerate() {
                let u = &rhs[c * ni..(c + 1) * ni];
                let mut unit = vec![0.0; nb];
                unit[b] = 1.0;
                fluxes.push(op.flux(u, &unit, lambda));
            }
            per_order.push(fluxes);
            let mut prev = rhs;
            for j in 1..=jmax {
                let mut next = vec![0.0; ni * cols];
                for c in 0..cols {
                    for i in 0..ni {
                        next[c * ni + i] = -(j as f64) * op.m_ii[i] * prev[c * ni + i];
                    }
                }
                solver.solve_many(&mut next, cols)?;
                let mut fluxes = Vec::with_capacity(cols);
                for (c, b) in (s..e).enumerate() {
                    let mut f = op.interior_flux(&next[c * ni..(c + 1) * ni]);
                    if j == 1 {
                        f[b] += op.m_bb[b] / op.w[b];
                    }
                    fluxes.push(f);
                }
                per_order.push(fluxes);
                prev = next;
            }
            Ok((s, per_order))
        })
        .collect();
    let mut mats = vec![Array2::<f64>::zeros((nb, nb)); jmax + 1];
    for piece in pieces {
        let (s, per_order) = piece?;
        for (j, fluxes) in per_order.into_iter().enumerate() {
            for (c, f) in fluxes.into_iter().enumerate() {
                mats[j].column_mut(s + c).assign(&ndarray::Array1::from(f));
            }
        }
    }
    Ok(mats
        .into_iter()
        .enumerate()
        .map(|(j, matrix)| DtnOperator {
            lambda,
            order: j,
            matrix,
            weight: op.w.clone(),
            route: Route::Direct,
            k_used: None,
            tail_bound: 0.0,
            tail_kind: TailKind::None,
        })
        .collect())
}

/// Centered finite difference of order `j` of the direct map in λ.
pub fn dtn_direct_fd(op: &OperatorPair, lambda: f64, j: usize, step: f64) -> Result<DtnOperator> {
    if j == 0 {
        return dtn_direct(op, lambda);
    }
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step {step} must be positive")));
    }
    let nb = op.n_boundary();
    let mut acc = Array2::<f64>::zeros((nb, nb));
    let mut binom = 1.0;
    for i in 0..=j {
        let offset = (j as f64 / 2.0 - i as f64) * step;
        let d = dtn_direct(op, lambda + offset)?;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc.scaled_add(sign * binom, &d.matrix);
        binom = binom * (j - i) as f64 / (i + 1) as f64;
    }
    acc /= step.powi(j as i32);
    Ok(DtnOperator {
        lambda,
        order: j,
        matrix: acc,
        weight: op.w.clone(),
        route: Route::FiniteDifference,
        k_used: None,
        tail_bound: 0.0,
        tail_kind: TailKind::None,
    })
}

// ---------------------------------------------------------------------------
// Series route

/// How the difference series of the accelerated route is summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Window {
    /// Index-aligned truncation at a common cluster boundary.
    Sharp,
    /// Spectral weights `(1 − (λ_k/Λ)²)^power` below a common cutoff `Λ`.
    Smooth { power: i32 },
}

impl Default for Window {
    fn default() -> Self {
        Window::Smooth { power: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesOptions {
    /// Modes to use; `None` means all retained modes.
    pub k: Option<usize>,
    /// Orders `j` above this value may use the plain series.
    pub threshold: Option<f64>,
    #[serde(default)]
    pub window: Window,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self {
            k: None,
            threshold: None,
            window: Window::default(),
        }
    }
}

impl SeriesOptions {
    pub fn with_k(k: usize) -> Self {
        Self {
            k: Some(k),
            ..Self::default()
        }
    }
}

/// Coefficients `(−1)^{j+1} j! / (λ_k+λ)^{j+1}` of the first `k` modes.
fn series_coefficients(lambdas: &[f64], lambda: f64, j: usize) -> Vec<f64> {
    let c = series_sign_factorial(j);
    lambdas.iter().map(|&lk| c / (lk + lambda).powi(j as i32 + 1)).collect()
}

/// `Σ_{k<K} c_k ψ_k (W ψ_k)ᵀ`.
fn series_matrix(sd: &SpectralData, coeff: &[f64]) -> Array2<f64> {
    let k = coeff.len();
    let psis = sd.psis.slice(ndarray::s![..k, ..]);
    let mut scaled = psis.to_owned();
    for (mut row, &c) in scaled.axis_iter_mut(Axis(0)).zip(coeff) {
        for (x, w) in row.iter_mut().zip(&sd.boundary_weight) {
            *x *= c * w;
        }
    }
    psis.t().dot(&scaled)
}

/// Boundary-row term the lumped discretization adds to `Λ` (j = 0) and to
/// `Λ'` (j = 1); zero for `j ≥ 2`.
pub fn local_term(layer: &BoundaryLayer, w: &[f64], lambda: f64, j: usize) -> Option<Array2<f64>> {
    let nb = w.len();
    match j {
        0 => {
            let mut a = crate::linalg::dense_from_sparse(&layer.k_bb);
            for b in 0..nb {
                a[[b, b]] += lambda * layer.m_bb[b];
            }
            for i in 0..nb {
                a.row_mut(i).mapv_inplace(|x| x / w[i]);
            }
            Some(a)
        }
        1 => {
            let mut a = Array2::zeros((nb, nb));
            for b in 0..nb {
                a[[b, b]] = layer.m_bb[b] / w[b];
            }
            Some(a)
        }
        _ => None,
    }
}

/// Certified tail `𝐜² j! Σ_{K<k≤N} k^{7/(2n)} (ϑ⁻¹ k^{2/n} + λ)^{−(j+1)}`.
pub fn plain_tail_bound(sd: &SpectralData, k_used: usize, lambda: f64, j: usize) -> f64 {
    let n = sd.dim as f64;
    let est = sd.estimates();
    let mut terms = Vec::new();
    for k in (k_used + 1)..=sd.n_total {
        let kk = k as f64;
        let base = kk.powf(2.0 / n) / est.theta + lambda;
        if base <= 0.0 {
            return f64::INFINITY;
        }
        terms.push(kk.powf(7.0 / (2.0 * n)) * base.powi(-(j as i32 + 1)));
    }
    est.c_trace.powi(2) * factorial(j) * crate::linalg::compensated_sum(terms)
}

fn check_lambda(sd: &SpectralData, lambda: f64) -> Result<()> {
    if !lambda.is_finite() {
        return Err(Error::Invalid(format!("shift {lambda} is not finite")));
    }
    check_guard_band(lambda, &sd.lambdas)
}

/// Plain truncated series for `Λ^{(j)}(λ)`; refuses orders where the flux
/// series does not converge.
pub fn dtn_series(sd: &SpectralData, lambda: f64, j: usize, opts: SeriesOptions) -> Result<DtnOperator> {
    check_lambda(sd, lambda)?;
    let threshold = opts.threshold.unwrap_or_else(|| series_threshold(sd.dim));
    if (j as f64) <= threshold {
        return Err(Error::DivergentRegime(format!(
            "plain flux series for derivative order {j} needs j > {threshold}; \
             use the reference-accelerated series"
        )));
    }
    let k = sd.cluster_safe_truncation(opts.k.unwrap_or(sd.k()));
    if k == 0 {
        return Err(Error::Invalid("no complete cluster within the requested truncation".into()));
    }
    let coeff = series_coefficients(&sd.lambdas[..k], lambda, j);
    let matrix = series_matrix(sd, &coeff);
    let (tail_bound, tail_kind) = if k == sd.n_total {
        (0.0, TailKind::None)
    } else {
        (plain_tail_bound(sd, k, lambda, j), TailKind::Certified)
    };
    Ok(DtnOperator {
        lambda,
        order: j,
        matrix,
        weight: sd.boundary_weight.clone(),
        route: Route::Series,
        k_used: Some(k),
        tail_bound,
        tail_kind,
    })
}

/// A record whose map is known exactly, used to accelerate low orders.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub sd: &'a SpectralData,
    /// Direct-route `Λ_ref^{(j)}(λ)` at the shift and order being computed.
    pub direct: &'a DtnOperator,
}

/// Largest `k' ≤ k` that closes a cluster in both records and has no
/// eigenvalue of one record crossing the cut of the other.
pub fn common_cluster_truncation(a: &SpectralData, b: &SpectralData, k: usize) -> usize {
    let k = k.min(a.k()).min(b.k());
    let ends_b: std::collections::BTreeSet<usize> = b.clusters().into_iter().map(|(_, e)| e).collect();
    let separated = |e: usize| match (a.lambdas.get(e), b.lambdas.get(e)) {
        (Some(na), Some(nb)) => a.lambdas[e - 1].max(b.lambdas[e - 1]) < na.min(*nb),
        _ => true,
    };
    a.clusters()
        .into_iter()
        .map(|(_, e)| e)
        .filter(|e| *e <= k && ends_b.contains(e) && separated(*e))
        .max()
        .unwrap_or(0)
}

/// Windowed coefficients `w(λ_k/Λ) c_k` for the modes below the cutoff.
fn windowed_coefficients(sd: &SpectralData, lambda: f64, j: usize, cutoff: f64, power: i32) -> Vec<f64> {
    let n = sd.lambdas.iter().take_while(|&&l| l < cutoff).count();
    let mut c = series_coefficients(&sd.lambdas[..n], lambda, j);
    for (ck, lk) in c.iter_mut().zip(&sd.lambdas) {
        let x = lk / cutoff;
        *ck *= (1.0 - x * x).powi(power);
    }
    c
}

/// `Σ w(λ_k/Λ)(t_k − t_k^{ref})` for a cutoff `Λ`.
fn windowed_difference(sd: &SpectralData, rsd: &SpectralData, lambda: f64, j: usize, cutoff: f64, power: i32) -> Array2<f64> {
    let ca = windowed_coefficients(sd, lambda, j, cutoff, power);
    let cr = windowed_coefficients(rsd, lambda, j, cutoff, power);
    &series_matrix(sd, &ca) - &series_matrix(rsd, &cr)
}

/// `Λ^{(j)}(λ) = Λ_ref^{(j)}(λ) + Σ_k (t_k − t_k^{ref}) + (local − local_ref)`,
/// the difference series summed according to `opts.window`.
pub fn dtn_series_accelerated(
    sd: &SpectralData,
    reference: Reference<'_>,
    lambda: f64,
    j: usize,
    opts: SeriesOptions,
) -> Result<DtnOperator> {
    check_lambda(sd, lambda)?;
    check_lambda(reference.sd, lambda)?;
    let rsd = reference.sd;
    if !sd.same_discretization(rsd) || reference.direct.dim() != sd.n_boundary() {
        return Err(Error::Mismatch("reference record lives on a different mesh".into()));
    }
    if reference.direct.order != j || reference.direct.lambda != lambda {
        return Err(Error::Mismatch(format!(
            "reference map is Λ^({})({}), needed Λ^({j})({lambda})",
            reference.direct.order, reference.direct.lambda
        )));
    }
    let k_req = opts.k.unwrap_or(sd.k().min(rsd.k())).min(sd.k()).min(rsd.k());
    if k_req == 0 {
        return Err(Error::Invalid("accelerated series needs at least one mode".into()));
    }
    let complete = k_req == sd.n_total && k_req == rsd.n_total;
    let mut matrix = reference.direct.matrix.clone();
    let (k_used, tail_bound, tail_kind) = match opts.window {
        Window::Sharp => {
            let k = common_cluster_truncation(sd, rsd, k_req);
            if k == 0 {
                return Err(Error::Invalid("no common cluster boundary within the requested truncation".into()));
            }
            let ca = series_coefficients(&sd.lambdas[..k], lambda, j);
            let cr = series_coefficients(&rsd.lambdas[..k], lambda, j);
            matrix += &series_matrix(sd, &ca);
            matrix -= &series_matrix(rsd, &cr);
            if complete {
                (k, 0.0, TailKind::None)
            } else {
                (k, sharp_tail_estimate(sd, rsd, k, &ca, &cr), TailKind::Estimate)
            }
        }
        Window::Smooth { .. } if complete => {
            let ca = series_coefficients(&sd.lambdas, lambda, j);
            let cr = series_coefficients(&rsd.lambdas, lambda, j);
            matrix += &series_matrix(sd, &ca);
            matrix -= &series_matrix(rsd, &cr);
            (k_req, 0.0, TailKind::None)
        }
        Window::Smooth { power } => {
            // A cutoff neither record can see past.
            let cutoff = sd.lambdas[k_req - 1].min(rsd.lambdas[k_req - 1]);
            let d = windowed_difference(sd, rsd, lambda, j, cutoff, power);
            let tail = smooth_tail_estimate(sd, rsd, lambda, j, cutoff, power, &d);
            matrix += &d;
            let used = sd.lambdas.iter().take_while(|&&l| l < cutoff).count();
            (used, tail, TailKind::Estimate)
        }
    };
    if j <= 1 {
        let la = sd
            .boundary_layer
            .as_ref()
            .ok_or_else(|| Error::Missing("boundary layer of the record".into()))?;
        let lr = rsd
            .boundary_layer
            .as_ref()
            .ok_or_else(|| Error::Missing("boundary layer of the reference".into()))?;
        if let (Some(a), Some(r)) = (
            local_term(la, &sd.boundary_weight, lambda, j),
            local_term(lr, &rsd.boundary_weight, lambda, j),
        ) {
            matrix += &a;
            matrix -= &r;
        }
    }
    Ok(DtnOperator {
        lambda,
        order: j,
        matrix,
        weight: sd.boundary_weight.clone(),
        route: Route::Accelerated,
        k_used: Some(k_used),
        tail_bound,
        tail_kind,
    })
}

/// Geometric extrapolation from the windowed sums at `Λ/4`, `Λ/2`, `Λ`:
/// with `d₁ = ‖S(Λ/2) − S(Λ/4)‖` and `d₂ = ‖S(Λ) − S(Λ/2)‖`, `r = d₂/d₁`,
/// the estimate is `d₂ r/(1−r)`, or `d₂` when the sums do not contract.
fn smooth_tail_estimate(
    sd: &SpectralData,
    rsd: &SpectralData,
    lambda: f64,
    j: usize,
    cutoff: f64,
    power: i32,
    at_cutoff: &Array2<f64>,
) -> f64 {
    let half = windowed_difference(sd, rsd, lambda, j, cutoff / 2.0, power);
    let quarter = windowed_difference(sd, rsd, lambda, j, cutoff / 4.0, power);
    let w = &sd.boundary_weight;
    let norm = |a: &Array2<f64>| spectral_norm(weighted_form(a, w).view()).unwrap_or(f64::INFINITY);
    let d1 = norm(&(&half - &quarter));
    let d2 = norm(&(at_cutoff - &half));
    if d1 == 0.0 {
        return d2;
    }
    let r = d2 / d1;
    if r < 1.0 {
        d2 * r / (1.0 - r)
    } else {
        d2
    }
}

/// Power-law extrapolation of the per-cluster difference terms beyond `k`.
fn sharp_tail_estimate(sd: &SpectralData, rsd: &SpectralData, k: usize, ca: &[f64], cr: &[f64]) -> f64 {

    let ends: std::collections::BTreeSet<usize> = rsd.clusters().into_iter().map(|(_, e)| e).collect();
    let sd_ends: std::collections::BTreeSet<usize> = sd.clusters().into_iter().map(|(_, e)| e).collect();
    let mut windows = Vec::new();
    let mut s = 0;
    for &e in ends.iter().filter(|e| **e <= k && sd_ends.contains(e)) {
        windows.push((s, e));
        s = e;
    }
    let mut pts = Vec::new();
    for &(s, e) in &windows {
        let mut ta = vec![0.0; ca.len()];
        let mut tr = vec![0.0; cr.len()];
        ta[s..e].copy_from_slice(&ca[s..e]);
        tr[s..e].copy_from_slice(&cr[s..e]);
        let d = &series_matrix(sd, &ta) - &series_matrix(rsd, &tr);
        let f = crate::linalg::frobenius(weighted_form(&d, &sd.boundary_weight).view());
        let density = f / (e - s) as f64;
        if density > 0.0 {
            pts.push((0.5 * (s + e + 1) as f64, density));
        }
    }
    let half = pts.len() / 2;
    let fit = &pts[half..];
    if fit.len() < 2 {
        return pts.last().map(|p| p.1 * (sd.n_total - k) as f64).unwrap_or(0.0);
    }
    let (slope, icept) = log_log_fit(fit);
    (k + 1..=sd.n_total)
        .map(|kk| (icept + slope * (kk as f64).ln()).exp())
        .sum()
}

/// Least-squares line through `(ln x, ln y)`; returns `(slope, intercept)`.
pub fn log_log_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in pts {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let den = n * sxx - sx * sx;
    if den.abs() < 1e-300 {
        return (0.0, sy / n);
    }
    let slope = (n * sxy - sx * sy) / den;
    (slope, (sy - slope * sx) / n)
}

// ---------------------------------------------------------------------------
// Interior series

fn eigvecs(sd: &SpectralData) -> Result<&Array2<f64>> {
    sd.eigvecs
        .as_ref()
        .ok_or_else(|| Error::Missing("interior eigenvectors were not retained".into()))
}

/// `Σ_k (f|φ_k) / (λ_k+λ)^j φ_k` over the retained modes.
pub fn resolvent_power(sd: &SpectralData, lambda: f64, j: usize, f: &[f64]) -> Result<Vec<f64>> {
    check_lambda(sd, lambda)?;
    let v = eigvecs(sd)?;
    if f.len() != sd.n_interior() {
        return Err(Error::Mismatch("interior vector length".into()));
    }
    let mut out = vec![0.0; f.len()];
    for k in 0..sd.k() {
        let row = v.row(k);
        let row = row.as_slice().expect("row");
        let c = weighted_dot(f, row, &sd.mass_weight) / (sd.lambdas[k] + lambda).powi(j as i32);
        for (o, x) in out.iter_mut().zip(row) {
            *o += c * x;
        }
    }
    Ok(out)
}

/// `u^{(j)}(λ)(φ) = (−1)^{j+1} j! Σ_k ⟨φ|ψ_k⟩ / (λ_k+λ)^{j+1} φ_k`, interior values.
pub fn u_series(sd: &SpectralData, lambda: f64, j: usize, phi: &[f64]) -> Result<Vec<f64>> {
    check_lambda(sd, lambda)?;
    let v = eigvecs(sd)?;
    let coeff = series_coefficients(&sd.lambdas, lambda, j);
    let mut out = vec![0.0; sd.n_interior()];
    for k in 0..sd.k() {
        let c = coeff[k] * weighted_dot(phi, sd.psi(k).as_slice().expect("row"), &sd.boundary_weight);
        for (o, x) in out.iter_mut().zip(v.row(k)) {
            *o += c * x;
        }
    }
    Ok(out)
}

/// The three pieces of `u¹ − u²` (interior values, `sd1` basis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splitting {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub u3: Vec<f64>,
    pub total: Vec<f64>,
    /// `‖u1+u2+u3 − total‖ / ‖total‖` in the mass weight of `sd1`.
    pub defect: f64,
}

/// Splits the series difference into eigenvalue, flux and eigenvector parts.
/// Modes of `sd2` must already be aligned with those of `sd1`.
pub fn three_term_split(sd1: &SpectralData, sd2: &SpectralData, lambda: f64, j: usize, phi: &[f64]) -> Result<Splitting> {
    if !sd1.same_discretization(sd2) {
        return Err(Error::Mismatch("records on different meshes".into()));
    }
    check_lambda(sd1, lambda)?;
    check_lambda(sd2, lambda)?;
    let v1 = eigvecs(sd1)?;
    let v2 = eigvecs(sd2)?;
    let k = sd1.k().min(sd2.k());
    let w = &sd1.boundary_weight;
    let c = series_sign_factorial(j);
    let ni = sd1.n_interior();
    let (mut u1, mut u2, mut u3, mut total) = (vec![0.0; ni], vec![0.0; ni], vec![0.0; ni], vec![0.0; ni]);
    let (mut s1, mut s2) = (vec![0.0; ni], vec![0.0; ni]);
    for kk in 0..k {
        let a1 = (lambda + sd1.lambdas[kk]).powi(-(j as i32 + 1));
        let a2 = (lambda + sd2.lambdas[kk]).powi(-(j as i32 + 1));
        let p1 = sd1.psi(kk);
        let p2 = sd2.psi(kk);
        let p1 = p1.as_slice().expect("row");
        let p2 = p2.as_slice().expect("row");
        let b1 = weighted_dot(phi, p1, w);
        let b2 = weighted_dot(phi, p2, w);
        let dpsi: Vec<f64> = p1.iter().zip(p2).map(|(x, y)| x - y).collect();
        let bd = weighted_dot(phi, &dpsi, w);
        let c1 = c * (a1 - a2) * b1;
        let c2 = c * a2 * bd;
        let c3 = c * a2 * b2;
        for i in 0..ni {
            let f1 = v1[[kk, i]];
            let f2 = v2[[kk, i]];
            u1[i] += c1 * f1;
            u2[i] += c2 * f1;
            u3[i] += c3 * (f1 - f2);
            total[i] += c * (a1 * b1 * f1 - a2 * b2 * f2);
            s1[i] += c * a1 * b1 * f1;
            s2[i] += c * a2 * b2 * f2;
        }
    }
    let sum: Vec<f64> = (0..ni).map(|i| u1[i] + u2[i] + u3[i] - total[i]).collect();
    // Measured against the two solutions rather than their difference, which
    // cancels to rounding level for small perturbations.
    let scale = weighted_norm(&s1, &sd1.mass_weight) + weighted_norm(&s2, &sd1.mass_weight);
    let dn = weighted_norm(&sum, &sd1.mass_weight);
    let defect = if scale == 0.0 { dn } else { dn / scale };
    Ok(Splitting { u1, u2, u3, total, defect })
}

/// Right side of the integral identity for `j!(1/(λ+a)^{j+1} − 1/(λ+b)^{j+1})`,
/// i.e. `−(j+1)! ∫₀¹ (a−b)/(λ+b+t(a−b))^{j+2} dt`, by quadrature.
pub fn resolvent_difference_integral(lambda: f64, a: f64, b: f64, j: usize) -> Result<f64> {
    let d = a - b;
    let e = integrate(
        |t| d / (lambda + b + t * d).powi(j as i32 + 2),
        0.0,
        1.0,
        Tolerance {
            abs: 0.0,
            rel: 1e-13,
            max_intervals: 2000,
        },
    )?;
    Ok(-factorial(j + 1) * e.value)
}

// ---------------------------------------------------------------------------
// Taylor remainder

/// `d_k = (−1)^{m+1} (j₀+m)!/(j₀−1)! ∫₀^λ s^{j₀−1} (λ_k+s)^{−(j₀+m+1)} ds`.
pub fn d_coefficient(lambda_k: f64, lambda: f64, m: usize, j0: usize) -> Result<f64> {
    if j0 == 0 {
        return Err(Error::Invalid("Taylor order j0 must be at least 1".into()));
    }
    let e = integrate(
        |s| s.powi(j0 as i32 - 1) * (lambda_k + s).powi(-((j0 + m + 1) as i32)),
        0.0,
        lambda,
        Tolerance {
            abs: 1e-12 * 1e-6,
            rel: 1e-12,
            max_intervals: 4000,
        },
    )?;
    if e.error > 1e-12f64.max(1e-10 * e.value.abs()) {
        return Err(Error::Quadrature(format!(
            "d coefficient at λ_k = {lambda_k}: error estimate {:e}",
            e.error
        )));
    }
    let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
    Ok(sign * factorial(j0 + m) / factorial(j0 - 1) * e.value)
}

/// `j₀ = ⌊(n+3)/4⌋ + 1`.
pub fn default_j0(n: usize) -> usize {
    (n + 3) / 4 + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRemainder {
    pub lambda: f64,
    pub m: usize,
    pub j0: usize,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// `Υ φ` per probe.
    pub upsilon: Vec<Vec<f64>>,
    /// `max_k |d_k^ℓ| k^{2/n}` over both records.
    pub c_m: f64,
    /// `max_k |d_k¹ − d_k²| / (k^{−4/n} |λ_k¹ − λ_k²|)` over modes with distinct eigenvalues.
    pub c_m_difference: f64,
    /// Largest `|d_k¹ − d_k²|` among modes with equal eigenvalues (must be 0).
    pub equal_mode_defect: f64,
}

/// `Υ = Σ_k (d_k¹ ⟨φ|ψ_k¹⟩ ψ_k¹ − d_k² ⟨φ|ψ_k²⟩ ψ_k²)` on each probe.
pub fn taylor_remainder(
    sd1: &SpectralData,
    sd2: &SpectralData,
    lambda: f64,
    m: usize,
    j0: Option<usize>,
    probes: &[Vec<f64>],
) -> Result<TaylorRemainder> {
    if !sd1.same_discretization(sd2) {
        return Err(Error::Mismatch("records on different meshes".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Invalid(format!("Taylor shift {lambda} must be positive")));
    }
    let j0 = j0.unwrap_or_else(|| default_j0(sd1.dim));
    let k = sd1.k().min(sd2.k());
    let d_of = |sd: &SpectralData| -> Result<Vec<f64>> {
        sd.lambdas[..k].par_iter().map(|&lk| d_coefficient(lk, lambda, m, j0)).collect()
    };
    let d1 = d_of(sd1)?;
    let d2 = d_of(sd2)?;
    let w = &sd1.boundary_weight;
    let upsilon = probes
        .iter()
        .map(|phi| {
            let mut out = vec![0.0; sd1.n_boundary()];
            for kk in 0..k {
                let p1 = sd1.psi(kk);
                let p2 = sd2.psi(kk);
                let c1 = d1[kk] * weighted_dot(phi, p1.as_slice().expect("row"), w);
                let c2 = d2[kk] * weighted_dot(phi, p2.as_slice().expect("row"), w);
                for b in 0..out.len() {
                    out[b] += c1 * p1[b] - c2 * p2[b];
                }
            }
            out
        })
        .collect();
    let n = sd1.dim as f64;
    let mut c_m = 0.0f64;
    let mut c_diff = 0.0f64;
    let mut eq_defect = 0.0f64;
    for kk in 0..k {
        let kf = (kk + 1) as f64;
        c_m = c_m.max(d1[kk].abs() * kf.powf(2.0 / n)).max(d2[kk].abs() * kf.powf(2.0 / n));
        let dl = (sd1.lambdas[kk] - sd2.lambdas[kk]).abs();
        let dd = (d1[kk] - d2[kk]).abs();
        if dl > 0.0 {
            c_diff = c_diff.max(dd / (kf.powf(-4.0 / n) * dl));
        } else {
            eq_defect = eq_defect.max(dd);
        }
    }
    Ok(TaylorRemainder {
        lambda,
        m,
        j0,
        d1,
        d2,
        upsilon,
        c_m,
        c_m_difference: c_diff,
        equal_mode_defect: eq_defect,
    })
}

/// `Λ^{(m)}(0) − Σ_{j<j₀} (−λ)^j/j! Λ^{(m+j)}(λ)` from direct-route maps;
/// equals `Υ` for a single record. `at_zero[m]` and `at_lambda[m+j]` are used.
pub fn taylor_defect_direct(at_zero: &[DtnOperator], at_lambda: &[DtnOperator], m: usize, j0: usize) -> Result<Array2<f64>> {
    if at_zero.len() <= m || at_lambda.len() < m + j0 {
        return Err(Error::Missing(format!("need Λ^(m..m+{j0}) at both shifts")));
    }
    let lambda = at_lambda[0].lambda;
    let mut out = at_zero[m].matrix.clone();
    for j in 0..j0 {
        let c = (-lambda).powi(j as i32) / factorial(j);
        out.scaled_add(-c, &at_lambda[m + j].matrix);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Probes

/// Smooth boundary probes. In 2D: `cos, sin(2π m s/4)` in arclength for
/// `m = 1..=order`. In 3D: restrictions of `cos, sin(π(a x₁+b x₂+c x₃))` for
/// the first `order` wave vectors with entries in `{0,1,2}`.
pub fn boundary_fourier_probes(mesh: &Mesh, order: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * order);
    if let Some(s) = mesh.boundary_arclength() {
        for m in 1..=order {
            let f = 2.0 * std::f64::consts::PI * m as f64 / 4.0;
            out.push(s.iter().map(|x| (f * x).cos()).collect());
            out.push(s.iter().map(|x| (f * x).sin()).collect());
        }
        return out;
    }
    let mut waves = Vec::new();
    for t in 1..=6usize {
        for a in 0..=2usize {
            for b in 0..=2usize {
                for c in 0..=2usize {
                    if a + b + c == t {
                        waves.push([a, b, c]);
                    }
                }
            }
        }
    }
    for wv in waves.into_iter().take(order) {
        let arg = |v: usize| {
            let x = mesh.vertices[v];
            std::f64::consts::PI * (wv[0] as f64 * x[0] + wv[1] as f64 * x[1] + wv[2] as f64 * x[2])
        };
        out.push(mesh.boundary.iter().map(|&v| arg(v).cos()).collect());
        out.push(mesh.boundary.iter().map(|&v| arg(v).sin()).collect());
    }
    out
}

/// `max_probe ‖(A − B)φ‖ / ‖Bφ‖` together with the per-probe values.
pub fn probe_relative_errors(a: &DtnOperator, b: &DtnOperator, probes: &[Vec<f64>]) -> Vec<f64> {
    probes
        .iter()
        .map(|phi| {
            let fa = a.apply(phi);
            let fb = b.apply(phi);
            let d: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
            let den = weighted_norm(&fb, &b.weight);
            let num = weighted_norm(&d, &b.weight);
            if den == 0.0 {
                num
            } else {
                num / den
            }
        })
        .collect()
}

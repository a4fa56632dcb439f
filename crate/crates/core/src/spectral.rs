//! Dirichlet eigenpairs, boundary fluxes and the a priori spectral checks.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sprs::CsMat;

use crate::assembly::OperatorPair;
use crate::error::{Error, Result};
use crate::geometry::FieldKind;
use crate::linalg::{dense_from_sparse, spmv, sym_eig_lowest, weighted_norm};
use crate::report::{Check, VerificationReport};

/// Relative gap below which neighbouring eigenvalues count as one cluster.
pub const CLUSTER_TOL: f64 = 1e-8;

/// Boundary rows of the discrete operator. The lumped-mass expansions of the
/// DtN map need them to be exact at finite resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLayer {
    pub k_bb: CsMat<f64>,
    pub m_bb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    pub dim: usize,
    pub resolution: usize,
    pub kind: FieldKind,
    pub lambdas: Vec<f64>,
    /// Row `k` holds the flux `ψ_k` on the boundary unknowns.
    pub psis: Array2<f64>,
    pub mass_weight: Vec<f64>,
    pub boundary_weight: Vec<f64>,
    /// Row `k` holds the mass-normalized interior eigenvector.
    pub eigvecs: Option<Array2<f64>>,
    /// Number of discrete modes in total (the interior dimension).
    pub n_total: usize,
    pub boundary_layer: Option<BoundaryLayer>,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    /// Smallest ϑ with `ϑ⁻¹ k^{2/n} ≤ λ_k ≤ ϑ k^{2/n}` for all retained k.
    pub theta: f64,
    pub theta_index: usize,
    /// Smallest 𝐜 with `‖ψ_k‖ ≤ 𝐜 k^{7/(4n)}`.
    pub c_trace: f64,
    pub c_index: usize,
}

impl SpectralData {
    pub fn k(&self) -> usize {
        self.lambdas.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary_weight.len()
    }

    pub fn n_interior(&self) -> usize {
        self.mass_weight.len()
    }

    pub fn psi(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.psis.row(k)
    }

    pub fn psi_norm(&self, k: usize) -> f64 {
        weighted_norm(self.psis.row(k).as_slice().expect("row"), &self.boundary_weight)
    }

    /// Keeps the first `k` modes.
    pub fn truncated(&self, k: usize) -> SpectralData {
        let k = k.min(self.k());
        SpectralData {
            lambdas: self.lambdas[..k].to_vec(),
            psis: self.psis.slice(ndarray::s![..k, ..]).to_owned(),
            eigvecs: self.eigvecs.as_ref().map(|v| v.slice(ndarray::s![..k, ..]).to_owned()),
            ..self.clone()
        }
    }

    /// Index ranges `[start, end)` of degenerate clusters (singletons included).
    pub fn clusters(&self) -> Vec<(usize, usize)> {
        clusters_of(&self.lambdas, CLUSTER_TOL)
    }

    /// Largest `k' ≤ k` that does not split a degenerate cluster.
    pub fn cluster_safe_truncation(&self, k: usize) -> usize {
        let k = k.min(self.k());
        let mut best = 0;
        for (_, e) in self.clusters() {
            if e > k {
                break;
            }
            best = e;
        }
        best
    }

    pub fn estimates(&self) -> Estimates {
        let n = self.dim as f64;
        let mut est = Estimates {
            theta: 0.0,
            theta_index: 0,
            c_trace: 0.0,
            c_index: 0,
        };
        for k in 0..self.k() {
            let kk = (k + 1) as f64;
            let r = self.lambdas[k] * kk.powf(-2.0 / n);
            let t = r.max(1.0 / r);
            if t > est.theta {
                est.theta = t;
                est.theta_index = k + 1;
            }
            let c = self.psi_norm(k) * kk.powf(-7.0 / (4.0 * n));
            if c > est.c_trace {
                est.c_trace = c;
                est.c_index = k + 1;
            }
        }
        est
    }

    pub fn same_discretization(&self, other: &SpectralData) -> bool {
        self.dim == other.dim
            && self.resolution == other.resolution
            && self.n_boundary() == other.n_boundary()
            && self.n_interior() == other.n_interior()
    }
}

pub fn clusters_of(lambdas: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    for k in 1..=lambdas.len() {
        if k == lambdas.len() || (lambdas[k] - lambdas[k - 1]).abs() > tol * lambdas[k - 1].abs() {
            out.push((s, k));
            s = k;
        }
    }
    out
}

/// Flips `v` so its largest-magnitude entry is positive. Entries within a
/// relative 1e-8 of the maximum count as tied and the first one decides.
fn fix_sign(v: &mut [f64]) {
    let mx = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if mx == 0.0 {
        return;
    }
    let pivot = v.iter().position(|x| x.abs() >= mx * (1.0 - 1e-8)).expect("max exists");
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// The `k` lowest generalized eigenpairs of `(K_II, M_II)` with fluxes.
pub fn eigensolve(op: &OperatorPair, k: usize) -> Result<SpectralData> {
    eigensolve_opts(op, k, true)
}

pub fn eigensolve_opts(op: &OperatorPair, k: usize, keep_eigvecs: bool) -> Result<SpectralData> {
    let ni = op.n_interior();
    if k == 0 {
        return Err(Error::Invalid("at least one mode must be requested".into()));
    }
    if k > ni {
        return Err(Error::TooManyModes {
            requested: k,
            available: ni,
        });
    }
    // Lumped mass: C = D^{-1/2} K D^{-1/2} is an ordinary symmetric problem.
    let dinv: Vec<f64> = op.m_ii.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut c = dense_from_sparse(&op.k_ii);
    for i in 0..ni {
        for j in 0..ni {
            c[[i, j]] *= dinv[i] * dinv[j];
        }
    }
    // Symmetrize exactly so LAPACK sees one triangle consistent with the other.
    for i in 0..ni {
        for j in i + 1..ni {
            let a = 0.5 * (c[[i, j]] + c[[j, i]]);
            c[[i, j]] = a;
            c[[j, i]] = a;
        }
    }
    let (w, z) = sym_eig_lowest(c, k)?;
    let nb = op.n_boundary();
    let mut vecs = Array2::zeros((k, ni));
    let mut psis = Array2::zeros((k, nb));
    let mut max_res = 0.0f64;
    for m in 0..k {
        let mut v: Vec<f64> = (0..ni).map(|i| z[[i, m]] * dinv[i]).collect();
        fix_sign(&mut v);
        let kv = spmv(&op.k_ii, &v);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..ni {
            let mv = op.m_ii[i] * v[i];
            num += (kv[i] - w[m] * mv).powi(2);
            den += mv * mv;
        }
        max_res = max_res.max((num / den).sqrt());
        let psi = op.interior_flux(&v);
        psis.row_mut(m).assign(&ndarray::Array1::from(psi));
        vecs.row_mut(m).assign(&ndarray::Array1::from(v));
    }
    if !(w[0] > 0.0) {
        return Err(Error::Invalid(format!("lowest eigenvalue {} is not positive", w[0])));
    }
    if max_res > 1e-9 {
        return Err(Error::Lapack {
            routine: "dsyevr (residual check)",
            info: -1,
        });
    }
    Ok(SpectralData {
        dim: op.dim,
        resolution: op.resolution,
        kind: op.kind,
        lambdas: w,
        psis,
        mass_weight: op.m_ii.clone(),
        boundary_weight: op.w.clone(),
        eigvecs: keep_eigvecs.then_some(vecs),
        n_total: ni,
        boundary_layer: Some(BoundaryLayer {
            k_bb: op.k_bb.clone(),
            m_bb: op.m_bb.clone(),
        }),
        max_residual: max_res,
    })
}

/// Empirical Weyl and trace-growth constants, cluster flags and residuals.
pub fn validate_estimates(sd: &SpectralData, n: usize) -> VerificationReport {
    let mut r = VerificationReport::new("spectral_estimates");
    r.input("K", sd.k()).input("n", n).input("resolution", sd.resolution);
    let sd_n = SpectralData { dim: n, ..sd.clone() };
    let est = sd_n.estimates();
    r.measure("theta", est.theta)
        .measure("theta_index", est.theta_index as f64)
        .measure("c_trace", est.c_trace)
        .measure("c_index", est.c_index as f64)
        .measure("max_residual", sd.max_residual);
    let clusters = sd.clusters();
    let degenerate = clusters.iter().filter(|(s, e)| e - s > 1).count();
    r.measure("degenerate_clusters", degenerate as f64);
    r.push(Check::new("eigen_residual", sd.max_residual, 1e-9, 0.0));
    r.push(Check::new("lambda_1_positive", -sd.lambdas[0], 0.0, 0.0));
    let monotone = sd.lambdas.windows(2).all(|w| w[1] >= w[0]);
    r.push(Check::new("nondecreasing", if monotone { 0.0 } else { 1.0 }, 0.0, 0.0));
    if let Some(v) = &sd.eigvecs {
        r.push(Check::new("mass_orthonormality", orthonormality_defect(v, &sd.mass_weight), 1e-10, 0.0));
    }
    for (s, e) in clusters.iter().filter(|(s, e)| e - s > 1) {
        r.note(format!("degenerate cluster modes {}..={} at λ ≈ {:.10}", s + 1, e, sd.lambdas[*s]));
    }
    r
}

/// Ratio check of the empirical constants between two resolutions.
pub fn compare_refinement(coarse: &SpectralData, fine: &SpectralData, max_change: f64) -> VerificationReport {
    let mut r = VerificationReport::new("spectral_refinement");
    let a = coarse.estimates();
    let b = fine.estimates();
    r.input("K", coarse.k().min(fine.k()))
        .input("coarse_resolution", coarse.resolution)
        .input("fine_resolution", fine.resolution);
    r.measure("theta_coarse", a.theta)
        .measure("theta_fine", b.theta)
        .measure("c_coarse", a.c_trace)
        .measure("c_fine", b.c_trace);
    let change = |x: f64, y: f64| (y - x).abs() / x.abs();
    r.push(Check::new("theta_relative_change", change(a.theta, b.theta), max_change, 0.0));
    r.push(Check::new("c_relative_change", change(a.c_trace, b.c_trace), max_change, 0.0));
    r.push(Check::new("theta_inflation", b.theta / a.theta, 1.0 + max_change, 0.0));
    r.push(Check::new("c_inflation", b.c_trace / a.c_trace, 1.0 + max_change, 0.0));
    r
}

pub fn orthonormality_defect(v: &Array2<f64>, m: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let k = v.nrows();
    for a in 0..k {
        for b in a..k {
            let s: f64 = v.row(a).iter().zip(v.row(b)).zip(m).map(|((x, y), w)| x * y * w).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((s - target).abs());
        }
    }
    worst
}

/// `G[k][ℓ] = (φ_k² | φ_ℓ¹)` in the mass weight of `sd1`.
pub fn cross_gram(sd1: &SpectralData, sd2: &SpectralData) -> Result<Array2<f64>> {
    if !sd1.same_discretization(sd2) {
        return Err(Error::Mismatch("spectral records live on different meshes".into()));
    }
    let v1 = sd1
        .eigvecs
        .as_ref()
        .ok_or_else(|| Error::Missing("eigenvectors of the first record".into()))?;
    let v2 = sd2
        .eigvecs
        .as_ref()
        .ok_or_else(|| Error::Missing("eigenvectors of the second record".into()))?;
    let mut w1 = v1.clone();
    for mut row in w1.axis_iter_mut(Axis(0)) {
        for (x, m) in row.iter_mut().zip(&sd1.mass_weight) {
            *x *= m;
        }
    }
    let g = v2.dot(&w1.t());
    // Rows of `v2` are unit in their own mass weight; in sd1's weight the
    // Cauchy–Schwarz bound is the sd1-norm of the row.
    let eps = 1e-8;
    for (k, row) in g.axis_iter(Axis(0)).enumerate() {
        let n2 = weighted_norm(v2.row(k).as_slice().expect("row"), &sd1.mass_weight);
        if let Some(bad) = row.iter().find(|x| x.abs() > n2 * (1.0 + eps)) {
            return Err(Error::Invalid(format!("cross-Gram entry {bad} exceeds row norm {n2}")));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble;
    use crate::geometry::{build_box_mesh, make_field, Bounds, Expression};
    use std::f64::consts::PI;

    fn square(r: usize) -> OperatorPair {
        let m = build_box_mesh(2, r).unwrap();
        let f = make_field(&m, FieldKind::Metric, &Expression::identity(), None, Bounds::default()).unwrap();
        assemble(&m, &f).unwrap()
    }

    /// Lumped Q1 eigenvalue of the discrete separable mode (j, m).
    fn discrete_mode(r: usize, j: usize, m: usize) -> f64 {
        let h = 1.0 / r as f64;
        let (a, b) = ((j as f64 * PI * h).cos(), (m as f64 * PI * h).cos());
        2.0 / (3.0 * h * h) * ((1.0 - a) * (2.0 + b) + (1.0 - b) * (2.0 + a))
    }

    #[test]
    fn square_matches_separable_discrete_oracle() {
        let r = 16;
        let sd = eigensolve(&square(r), 12).unwrap();
        let mut oracle: Vec<f64> = (1..r).flat_map(|j| (1..r).map(move |m| (j, m))).map(|(j, m)| discrete_mode(r, j, m)).collect();
        oracle.sort_by(|a, b| a.total_cmp(b));
        for k in 0..12 {
            assert!((sd.lambdas[k] - oracle[k]).abs() < 1e-9 * oracle[k], "k={k}");
        }
        assert!(sd.max_residual < 1e-9);
        assert!(orthonormality_defect(sd.eigvecs.as_ref().unwrap(), &sd.mass_weight) < 1e-10);
    }

    #[test]
    fn first_eigenvalue_converges_quadratically() {
        let e: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&r| (eigensolve(&square(r), 1).unwrap().lambdas[0] - 2.0 * PI * PI).abs())
            .collect();
        assert!(e[0] / e[1] > 3.8 && e[1] / e[2] > 3.9, "{e:?}");
    }

    #[test]
    fn first_flux_norm_approaches_analytic_value() {
        let sd = eigensolve(&square(32), 1).unwrap();
        let exact = 2.0 * 2f64.sqrt() * PI;
        assert!((sd.psi_norm(0) - exact).abs() / exact < 0.02);
    }

    #[test]
    fn cube_first_eigenvalue() {
        let r = 12;
        let m = build_box_mesh(3, r).unwrap();
        let f = make_field(&m, FieldKind::Metric, &Expression::identity(), None, Bounds::default()).unwrap();
        let sd = eigensolve(&assemble(&m, &f).unwrap(), 1).unwrap();
        let exact = 3.0 * PI * PI;
        assert!((sd.lambdas[0] - exact).abs() / exact < 0.05);
        // Separable lumped Q1 oracle for mode (1,1,1).
        let h = 1.0 / r as f64;
        let c = (PI * h).cos();
        let oracle = 3.0 * (2.0 / (h * h)) * (1.0 - c) * ((2.0 + c) / 3.0).powi(2);
        assert!((sd.lambdas[0] - oracle).abs() < 1e-10 * oracle);
    }

    #[test]
    fn single_mode_theta() {
        let sd = eigensolve(&square(8), 1).unwrap();
        let est = sd.estimates();
        assert_eq!(est.theta, sd.lambdas[0].max(1.0 / sd.lambdas[0]));
    }

    #[test]
    fn metric_scaling_scales_spectrum() {
        // g -> 4g in 2D leaves K unchanged and multiplies M by 4.
        let m = build_box_mesh(2, 10).unwrap();
        let g = Expression::parse_tensor(&["1 + 0.2*x1".into(), "0.1".into(), "1".into()], 2).unwrap();
        let g4 = Expression::parse_tensor(&["4*(1 + 0.2*x1)".into(), "0.4".into(), "4".into()], 2).unwrap();
        let a = make_field(&m, FieldKind::Metric, &g, None, Bounds::default()).unwrap();
        let b = make_field(&m, FieldKind::Metric, &g4, None, Bounds { alpha: 8.0, ..Bounds::default() }).unwrap();
        let sa = eigensolve(&assemble(&m, &a).unwrap(), 10).unwrap();
        let sb = eigensolve(&assemble(&m, &b).unwrap(), 10).unwrap();
        for k in 0..10 {
            assert!((sb.lambdas[k] - sa.lambdas[k] / 4.0).abs() < 1e-10 * sa.lambdas[k]);
        }
    }

    #[test]
    fn gram_of_record_with_itself_is_identity() {
        let sd = eigensolve(&square(12), 8).unwrap();
        let g = cross_gram(&sd, &sd).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - t).abs() < 1e-10);
            }
        }
        let mut flipped = sd.clone();
        flipped.eigvecs.as_mut().unwrap().row_mut(2).mapv_inplace(|x| -x);
        let g = cross_gram(&sd, &flipped).unwrap();
        assert!((g[[2, 2]] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn clusters_on_square() {
        let sd = eigensolve(&square(16), 6).unwrap();
        assert_eq!(sd.clusters(), vec![(0, 1), (1, 3), (3, 4), (4, 6)]);
        assert_eq!(sd.cluster_safe_truncation(2), 1);
        assert_eq!(sd.cluster_safe_truncation(3), 3);
    }

    #[test]
    fn fluxes_define_a_dirichlet_to_neumann_pairing() {
        // ⟨ψ_k, φ⟩_W equals (K_BI v_k)·φ by construction of the flux.
        let op = square(8);
        let sd = eigensolve(&op, 3).unwrap();
        let phi: Vec<f64> = (0..op.n_boundary()).map(|b| (b as f64).sin()).collect();
        for k in 0..3 {
            let lhs: f64 = (0..op.n_boundary()).map(|b| sd.psis[[k, b]] * phi[b] * sd.boundary_weight[b]).sum();
            let kib = spmv(&op.k_ib, &phi);
            let rhs: f64 = kib.iter().zip(sd.eigvecs.as_ref().unwrap().row(k)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }
}

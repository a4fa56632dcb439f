//! Empirical constants of the elliptic eigenfunction bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{assemble, OperatorPair};
use crate::error::{Error, Result};
use crate::geometry::{make_field, Bounds, Expression, FieldKind, Mesh};
use crate::linalg::spmv;
use crate::report::{Check, VerificationReport};
use crate::spectral::SpectralData;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainConstants {
    /// `max_k ‖φ_k‖_{L²(dx)} / λ_k`
    pub l2: f64,
    /// `max_k ‖φ_k‖_{H¹(dx)} / λ_k^{1/2}`
    pub h1: f64,
    /// `max_k ‖ψ_k‖ / λ_k^{7/8}`
    pub trace: f64,
}

fn euclidean(mesh: &Mesh) -> Result<OperatorPair> {
    let f = make_field(mesh, FieldKind::Metric, &Expression::identity(), None, Bounds::default())?;
    assemble(mesh, &f)
}

fn quad(a: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(w).map(|(x, m)| m * x * x).sum()
}

pub fn chain_constants(sd: &SpectralData, mesh: &Mesh) -> Result<ChainConstants> {
    let v = sd
        .eigvecs
        .as_ref()
        .ok_or_else(|| Error::Missing("interior eigenvectors".into()))?;
    if mesh.n_interior() != sd.n_interior() {
        return Err(Error::Mismatch("mesh and record differ".into()));
    }
    let e = euclidean(mesh)?;
    let mut c = ChainConstants {
        l2: 0.0,
        h1: 0.0,
        trace: 0.0,
    };
    for k in 0..sd.k() {
        let row = v.row(k);
        let row = row.as_slice().expect("row");
        let l = sd.lambdas[k];
        let l2 = quad(row, &e.m_ii);
        let grad: f64 = row.iter().zip(spmv(&e.k_ii, row)).map(|(x, y)| x * y).sum();
        c.l2 = c.l2.max(l2.sqrt() / l);
        c.h1 = c.h1.max((l2 + grad).sqrt() / l.sqrt());
        c.trace = c.trace.max(sd.psi_norm(k) / l.powf(7.0 / 8.0));
    }
    Ok(c)
}

/// Eigenfunction constants plus a resolvent probe on random right sides:
/// `‖A⁻¹f‖_{L²} ≤ ‖f‖/λ₁` and `‖A⁻¹f‖_{H¹_g} ≤ ‖f‖/√λ₁`.
pub fn check_elliptic_chain(sd: &SpectralData, op: &OperatorPair, mesh: &Mesh, seed: u64) -> Result<VerificationReport> {
    let mut r = VerificationReport::new("elliptic_chain");
    r.input("K", sd.k()).input("resolution", sd.resolution).input("seed", seed);
    let c = chain_constants(sd, mesh)?;
    r.measure("c_l2", c.l2).measure("c_h1", c.h1).measure("c_trace", c.trace);
    let solver = op.shifted_solver(0.0, None)?;
    let l1 = sd.lambdas[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ni = op.n_interior();
    let (mut worst_l2, mut worst_h1) = (0.0f64, 0.0f64);
    let mut rhs: Vec<Vec<f64>> = (0..8).map(|_| (0..ni).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
    if let Some(v) = &sd.eigvecs {
        rhs.push(v.row(0).to_vec());
    }
    let mut first_mode_ratio = None;
    for (i, f) in rhs.iter().enumerate() {
        let mut u: Vec<f64> = f.iter().zip(&op.m_ii).map(|(x, m)| x * m).collect();
        solver.solve_many(&mut u, 1)?;
        let fn2 = quad(f, &op.m_ii).sqrt();
        let ratio = quad(&u, &op.m_ii).sqrt() / fn2;
        let energy: f64 = u.iter().zip(spmv(&op.k_ii, &u)).map(|(x, y)| x * y).sum();
        worst_l2 = worst_l2.max(ratio * l1);
        worst_h1 = worst_h1.max(energy.sqrt() / fn2 * l1.sqrt());
        if i == 8 {
            first_mode_ratio = Some(ratio * l1);
        }
    }
    r.measure("resolvent_l2_times_lambda1", worst_l2)
        .measure("resolvent_h1_times_sqrt_lambda1", worst_h1);
    r.push(Check::new("resolvent_l2", worst_l2, 1.0, 1e-9));
    r.push(Check::new("resolvent_h1", worst_h1, 1.0, 1e-9));
    if let Some(x) = first_mode_ratio {
        r.measure("first_mode_ratio", x);
        r.push(Check::within("first_mode_exact", x, 1.0 - 1e-9, 1.0 + 1e-9));
    }
    Ok(r)
}

/// Relative change of each constant between two resolutions.
pub fn compare_chain(coarse: ChainConstants, fine: ChainConstants, max_change: f64) -> VerificationReport {
    let mut r = VerificationReport::new("elliptic_chain_refinement");
    for (name, a, b) in [("c_l2", coarse.l2, fine.l2), ("c_h1", coarse.h1, fine.h1), ("c_trace", coarse.trace, fine.trace)] {
        let ch = (b / a - 1.0).abs();
        r.measure(name, ch);
        r.push(Check::new(name, ch, max_change, 0.0));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_box_mesh;
    use crate::spectral::eigensolve;
    use std::f64::consts::PI;

    #[test]
    fn square_first_mode_constants() {
        let m = build_box_mesh(2, 32).unwrap();
        let op = euclidean(&m).unwrap();
        let sd = eigensolve(&op, 1).unwrap();
        let c = chain_constants(&sd, &m).unwrap();
        let exact = 2.0 * 2f64.sqrt() * PI / (2.0 * PI * PI).powf(7.0 / 8.0);
        assert!((exact - 0.6536).abs() < 1e-4);
        assert!((c.trace / exact - 1.0).abs() < 0.02, "{}", c.trace);
        let r = check_elliptic_chain(&sd, &op, &m, 1).unwrap();
        assert!(r.pass, "{:?}", r.summary_lines());
    }

    #[test]
    fn constants_stable_under_refinement() {
        let cs: Vec<ChainConstants> = [16, 32]
            .iter()
            .map(|&res| {
                let m = build_box_mesh(2, res).unwrap();
                let sd = eigensolve(&euclidean(&m).unwrap(), 20).unwrap();
                chain_constants(&sd, &m).unwrap()
            })
            .collect();
        let r = compare_chain(cs[0], cs[1], 0.2);
        assert!(r.pass, "{:?}", r.summary_lines());
    }
}

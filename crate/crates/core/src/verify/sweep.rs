//! Perturbation sweeps: DtN-difference norms against the matching spectral
//! distance over a log grid of amplitudes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, boundary_laplacian, OperatorPair};
use crate::bsd_metrics::{align, compute_delta, compute_delta_bar_star, pair_modes};
use crate::elliptic_dtn::{boundary_fourier_probes, common_cluster_truncation, direct_chain, log_log_fit, three_term_split, DtnOperator};
use crate::error::{Error, Result};
use crate::geometry::{build_box_mesh, make_field, Bounds, Expression, FieldKind, Mesh};
use crate::hyperbolic_dtn::{default_ell, hyperbolic_difference, HyperbolicRecord, TimeProfile, WaveProbe};
use crate::report::{Check, VerificationReport};
use crate::spectral::{eigensolve, SpectralData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    /// `c_ε = 1 + ε·B` times the identity metric.
    Conformal,
    /// `γ_ε = 1 + ε·B`.
    Conductivity,
    /// `V_ε = ε·B`.
    Potential,
    /// `g_ε = I + ε·B·E` with `E` a fixed symmetric shear.
    Metric,
}

/// Perturbations supported in a ball of radius `radius` about the box center,
/// so both coefficients agree near the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    pub dim: usize,
    pub resolution: usize,
    pub modes: usize,
    pub eps: Vec<f64>,
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_radius() -> f64 {
    0.25
}

impl Family {
    pub fn log_grid(kind: FamilyKind, dim: usize, resolution: usize, modes: usize, lo: f64, hi: f64, points: usize) -> Self {
        let eps = (0..points)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (points.max(2) - 1) as f64).exp())
            .collect();
        Self {
            kind,
            dim,
            resolution,
            modes,
            eps,
            radius: default_radius(),
        }
    }

    fn bump(&self) -> String {
        let r: Vec<String> = (1..=self.dim).map(|i| format!("(x{i}-0.5)^2")).collect();
        format!("bump(sqrt({})/{})", r.join("+"), self.radius)
    }

    pub fn operator(&self, mesh: &Mesh, eps: f64) -> Result<OperatorPair> {
        let b = self.bump();
        let id = Expression::identity();
        let field = match self.kind {
            FamilyKind::Conformal => make_field(
                mesh,
                FieldKind::Conformal,
                &Expression::parse_scalar(&format!("1 + {eps}*{b}"))?,
                Some(&id),
                Bounds::default(),
            )?,
            FamilyKind::Conductivity => make_field(
                mesh,
                FieldKind::Conductivity,
                &Expression::parse_scalar(&format!("1 + {eps}*{b}"))?,
                None,
                Bounds::default(),
            )?,
            FamilyKind::Potential => make_field(
                mesh,
                FieldKind::Potential,
                &Expression::parse_scalar(&format!("{eps}*{b}"))?,
                None,
                Bounds::default(),
            )?,
            FamilyKind::Metric => {
                let mut e: Vec<String> = Vec::new();
                for i in 0..self.dim {
                    for j in i..self.dim {
                        e.push(match (i, j) {
                            (0, 0) => format!("1 + {eps}*{b}"),
                            (0, 1) => format!("{eps}*0.5*{b}"),
                            _ if i == j => "1".into(),
                            _ => "0".into(),
                        });
                    }
                }
                make_field(mesh, FieldKind::Metric, &Expression::parse_tensor(&e, self.dim)?, None, Bounds::default())?
            }
        };
        assemble(mesh, &field)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Which {
    /// `‖ΔΛ^{(j)}(0)‖` against `δ`.
    Elliptic { j: usize },
    /// `max_h ‖ΔΠh‖/‖h‖` against `δ`.
    Hyperbolic,
    /// Conductivity family, `‖ΔΛ^{(j)}(0)‖` against `δ`.
    Conductivity { j: usize },
    /// Potential family, `‖ΔΛ^{(j)}(0)‖` against `δ`.
    Potential { j: usize },
    /// Potential family, `‖ΔΛ^{(j)}(0)‖_{H^{1/2}→L²}` against `δ̄^σ`.
    PotentialPower { j: usize },
    /// Potential family, `max_h ‖ΔΠh‖/‖h‖` against `δ̄^σ + δ_*`.
    PotentialHyperbolic,
}

impl Which {
    /// Highest DtN derivative needed in dimension `n`.
    fn order(self, n: usize) -> usize {
        match self {
            Which::Elliptic { j } | Which::Conductivity { j } | Which::Potential { j } | Which::PotentialPower { j } => j,
            Which::Hyperbolic | Which::PotentialHyperbolic => default_ell(n),
        }
    }

    /// File-name friendly label, e.g. `elliptic_j1`.
    pub fn slug(self) -> String {
        match self {
            Which::Elliptic { j } => format!("elliptic_j{j}"),
            Which::Conductivity { j } => format!("conductivity_j{j}"),
            Which::Potential { j } => format!("potential_j{j}"),
            Which::PotentialPower { j } => format!("potential_power_j{j}"),
            Which::Hyperbolic => "hyperbolic".into(),
            Which::PotentialHyperbolic => "potential_hyperbolic".into(),
        }
    }

    fn hyperbolic(self) -> bool {
        matches!(self, Which::Hyperbolic | Which::PotentialHyperbolic)
    }

    fn expected_kind(self) -> Option<FamilyKind> {
        match self {
            Which::Conductivity { .. } => Some(FamilyKind::Conductivity),
            Which::Potential { .. } | Which::PotentialPower { .. } | Which::PotentialHyperbolic => Some(FamilyKind::Potential),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub delta: f64,
    pub delta_bar: f64,
    pub delta_star: f64,
    /// The distance the difference is compared against for this sweep.
    pub functional: f64,
    pub difference: f64,
    pub ratio: f64,
    pub split_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub family: Family,
    pub which: Which,
    pub rows: Vec<SweepRow>,
    pub slope: f64,
    pub ratio_band: f64,
    pub report: VerificationReport,
}

impl SweepResult {
    pub fn csv_header() -> [&'static str; 8] {
        ["eps", "delta", "delta_bar", "delta_star", "functional", "difference", "ratio", "split_residual"]
    }

    pub fn csv_rows(&self) -> Vec<[String; 8]> {
        self.rows
            .iter()
            .map(|r| {
                [r.eps, r.delta, r.delta_bar, r.delta_star, r.functional, r.difference, r.ratio, r.split_residual]
                    .map(|x| format!("{x:.12e}"))
            })
            .collect()
    }
}

/// Tolerances of the scaling checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepTolerances {
    pub slope: (f64, f64),
    pub band: f64,
    pub split: f64,
}

impl Default for SweepTolerances {
    fn default() -> Self {
        Self {
            slope: (0.8, 1.2),
            band: 3.0,
            split: 1e-10,
        }
    }
}

struct Record {
    sd: SpectralData,
    derivs: Vec<DtnOperator>,
}

/// Extra modes solved beyond `modes` so the truncation can close clusters.
fn margin(modes: usize) -> usize {
    (modes / 4).max(12)
}

fn record(family: &Family, mesh: &Mesh, eps: f64, jmax: usize) -> Result<Record> {
    let op = family.operator(mesh, eps)?;
    let k = (family.modes + margin(family.modes)).min(mesh.n_interior());
    let sd = eigensolve(&op, k)?;
    let derivs = direct_chain(&op, 0.0, jmax, None)?;
    Ok(Record { sd, derivs })
}

/// Profile `t^{2ℓ+2}(1−t)⁴`, the least vanishing order the formula admits.
fn wave_probes(mesh: &Mesh, ell: usize) -> Vec<WaveProbe> {
    boundary_fourier_probes(mesh, 2)
        .into_iter()
        .map(|phi| WaveProbe {
            phi,
            profile: TimeProfile::new(2 * ell as u32 + 2, 4, 1.0),
        })
        .collect()
}

pub fn sweep_stability(family: &Family, which: Which, tol: SweepTolerances) -> Result<SweepResult> {
    if let Some(k) = which.expected_kind() {
        if family.kind != k {
            return Err(Error::Invalid(format!("{which:?} needs a {k:?} family, got {:?}", family.kind)));
        }
    }
    if family.eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::Invalid("amplitudes must be finite and nonnegative".into()));
    }
    let mesh = build_box_mesh(family.dim, family.resolution)?;
    let jmax = which.order(family.dim);
    let base = record(family, &mesh, 0.0, jmax)?;
    let lap = boundary_laplacian(&mesh);
    let probes = boundary_fourier_probes(&mesh, 2);
    let wprobes = wave_probes(&mesh, jmax);
    let h = 1.0 / family.resolution as f64;
    let n = family.dim;

    let recs = family
        .eps
        .par_iter()
        .map(|&eps| record(family, &mesh, eps, jmax))
        .collect::<Result<Vec<_>>>()?;
    // One truncation for every row, at a cluster boundary of all records.
    let k = recs
        .iter()
        .map(|r| common_cluster_truncation(&base.sd, &r.sd, family.modes))
        .min()
        .unwrap_or(family.modes);
    if k == 0 {
        return Err(Error::Invalid("no common cluster boundary below the requested mode count".into()));
    }
    let base = Record {
        sd: base.sd.truncated(k),
        derivs: base.derivs,
    };
    let rows = family
        .eps
        .par_iter()
        .zip(recs.into_par_iter())
        .map(|(&eps, rec)| -> Result<SweepRow> {
            let rec = Record {
                sd: rec.sd.truncated(k),
                derivs: rec.derivs,
            };
            let pairing = pair_modes(&base.sd, &rec.sd)?;
            let (a, b) = align(&base.sd, &rec.sd, &pairing)?;
            let delta = compute_delta(&a, &b, 1.0, 1.0, None)?.delta;
            let bs = compute_delta_bar_star(&a, &b, n)?;
            let (difference, split) = if which.hyperbolic() {
                let d = hyperbolic_difference(
                    HyperbolicRecord { sd: &base.sd, derivs: &base.derivs },
                    HyperbolicRecord { sd: &rec.sd, derivs: &rec.derivs },
                    &wprobes,
                    jmax,
                    1.0,
                    h / 4.0,
                )?;
                let worst = d
                    .probes
                    .iter()
                    .map(|p| if p.probe_norm > 0.0 { p.total / p.probe_norm } else { 0.0 })
                    .fold(0.0, f64::max);
                (worst, d.max_split_residual)
            } else {
                let j = jmax;
                let diff = rec.derivs[j].minus(&base.derivs[j])?;
                let norm = match which {
                    Which::PotentialPower { .. } => diff.h_half_to_l2_norm(&lap)?,
                    _ => diff.op_norm()?,
                };
                let mut split = 0.0f64;
                for phi in &probes {
                    split = split.max(three_term_split(&a, &b, 1.0, j, phi)?.defect);
                }
                (norm, split)
            };
            let functional = match which {
                Which::PotentialPower { .. } => bs.delta_bar.powf(bs.sigma),
                Which::PotentialHyperbolic => bs.delta_bar.powf(bs.sigma) + bs.delta_star,
                _ => delta,
            };
            Ok(SweepRow {
                eps,
                delta,
                delta_bar: bs.delta_bar,
                delta_star: bs.delta_star,
                functional,
                difference,
                ratio: if functional > 0.0 { difference / functional } else { 0.0 },
                split_residual: split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut r = VerificationReport::new(format!("sweep_{:?}_{}", family.kind, which.slug()).to_lowercase());
    r.input("family", family).input("which", which).input("K", k);
    for row in rows.iter().filter(|r| r.eps == 0.0) {
        r.push(Check::new("zero_amplitude_difference", row.difference, 0.0, 0.0));
        r.push(Check::new("zero_amplitude_functional", row.functional, 0.0, 0.0));
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.functional > 0.0 && r.difference > 0.0)
        .map(|r| (r.functional, r.difference))
        .collect();
    let (slope, _) = if pts.len() >= 2 { log_log_fit(&pts) } else { (f64::NAN, 0.0) };
    let ratios: Vec<f64> = rows.iter().filter(|r| r.functional > 0.0).map(|r| r.ratio).collect();
    let band = ratios.iter().copied().fold(0.0, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min);
    r.measure("slope", slope).measure("ratio_band", band);
    let split = rows.iter().map(|r| r.split_residual).fold(0.0, f64::max);
    r.measure("max_split_residual", split);
    r.push(Check::new("split_identity", split, tol.split, 0.0));
    match which {
        Which::PotentialPower { .. } | Which::PotentialHyperbolic => {
            // Upper-bound form: C from the largest decade, then every point
            // must sit below C·δ̄^σ.
            let emax = rows.iter().map(|r| r.eps).fold(0.0, f64::max);
            let c = rows
                .iter()
                .filter(|r| r.eps >= emax / 10.0 && r.functional > 0.0)
                .map(|r| r.ratio)
                .fold(0.0, f64::max);
            let worst = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
            r.measure("C", c).measure("max_ratio", worst);
            r.push(Check::new("dominated_by_C_delta_bar_sigma", worst, c, 1e-9));
            r.push(Check::new("power_at_least_sigma", tol.slope.0, slope, 0.0));
        }
        _ => {
            r.push(Check::within("loglog_slope", slope, tol.slope.0, tol.slope.1));
            r.push(Check::new("ratio_band", band, tol.band, 0.0));
        }
    }
    Ok(SweepResult {
        family: family.clone(),
        which,
        rows,
        slope,
        ratio_band: band,
        report: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_gives_zero_on_both_sides() {
        let mut f = Family::log_grid(FamilyKind::Conformal, 2, 8, 10, 1e-3, 1e-1, 3);
        f.eps.insert(0, 0.0);
        let r = sweep_stability(&f, Which::Elliptic { j: 1 }, SweepTolerances::default()).unwrap();
        assert_eq!(r.rows[0].difference, 0.0);
        assert_eq!(r.rows[0].functional, 0.0);
    }

    #[test]
    fn family_kind_is_checked() {
        let f = Family::log_grid(FamilyKind::Conformal, 2, 8, 10, 1e-3, 1e-1, 3);
        assert!(sweep_stability(&f, Which::Potential { j: 0 }, SweepTolerances::default()).is_err());
    }
}

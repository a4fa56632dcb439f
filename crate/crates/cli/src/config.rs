//! Experiment configuration: one JSON document drives every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bsd2dtn_core::assembly::{assemble, OperatorPair};
use bsd2dtn_core::bsd_metrics::check_exponents;
use bsd2dtn_core::elliptic_dtn::Window;
use bsd2dtn_core::geometry::{build_box_mesh, load_field_csv, make_field, Bounds, CoefficientField, Expression, FieldKind, Mesh};
use bsd2dtn_core::hyperbolic_dtn::{TimeProfile, WaveRoute};
use bsd2dtn_core::verify::{FamilyKind, SweepTolerances, Which};
use bsd2dtn_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshSpec,
    #[serde(default)]
    pub coefficients: BTreeMap<String, CoefficientSpec>,
    #[serde(default)]
    pub spectral: SpectralSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtn: Option<DtnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wave: Option<WaveSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySpec>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub n: usize,
    pub resolution: usize,
}

/// A scalar expression or the upper triangle of a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprSpec {
    Scalar(String),
    Tensor(Vec<String>),
}

/// Field bounds; an absent `beta` or `potential_ceiling` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential_ceiling: Option<f64>,
}

fn default_alpha() -> f64 {
    Bounds::default().alpha
}

impl Default for BoundsSpec {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: None,
            potential_ceiling: None,
        }
    }
}

impl BoundsSpec {
    pub fn resolve(&self) -> Bounds {
        Bounds {
            alpha: self.alpha,
            beta: self.beta.unwrap_or(f64::INFINITY),
            potential_ceiling: self.potential_ceiling.unwrap_or(f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub kind: FieldKind,
    /// Omitted for the identity metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<ExprSpec>,
    /// Reference tensor `g̃` (conformal) or background metric (potential).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Vec<String>>,
    /// Per-vertex values instead of an expression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub bounds: BoundsSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSpec {
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "yes")]
    pub keep_eigvecs: bool,
    /// Largest accepted relative eigen-residual.
    #[serde(default = "default_residual")]
    pub residual_tol: f64,
}

fn default_k() -> usize {
    10
}

fn yes() -> bool {
    true
}

fn default_residual() -> f64 {
    1e-9
}

impl Default for SpectralSpec {
    fn default() -> Self {
        Self {
            k: default_k(),
            keep_eigvecs: true,
            residual_tol: default_residual(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    /// The two coefficient names compared.
    pub records: [String; 2],
    #[serde(default = "one")]
    pub p: f64,
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtnSpec {
    pub coefficient: String,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    /// Boundary Fourier probes up to this order.
    #[serde(default = "default_probe_order")]
    pub probe_order: usize,
    /// Record whose direct map anchors the accelerated series at low orders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_k: Option<usize>,
    #[serde(default)]
    pub window: Window,
    /// Relative slack added to the tail bound in the series/direct check.
    #[serde(default = "default_dtn_tol")]
    pub tolerance: f64,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 1.0, 10.0]
}

fn default_orders() -> Vec<usize> {
    vec![0]
}

fn default_probe_order() -> usize {
    4
}

fn default_dtn_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub power: u32,
    #[serde(default)]
    pub window: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSpec {
    pub coefficient: String,
    #[serde(default = "one")]
    pub tau: f64,
    /// Defaults to `h/4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Defaults to `n + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<usize>,
    #[serde(default = "default_wave_probe_order")]
    pub probe_order: usize,
    pub profiles: Vec<ProfileSpec>,
    #[serde(default = "default_routes")]
    pub routes: Vec<WaveRoute>,
    /// Largest accepted relative L²(Σ) discrepancy between the routes.
    #[serde(default = "default_wave_tol")]
    pub tolerance: f64,
}

fn default_wave_probe_order() -> usize {
    1
}

fn default_routes() -> Vec<WaveRoute> {
    vec![WaveRoute::Stepping, WaveRoute::Formula]
}

fn default_wave_tol() -> f64 {
    0.05
}

impl WaveSpec {
    pub fn time_profiles(&self) -> Vec<TimeProfile> {
        self.profiles
            .iter()
            .map(|p| {
                if p.window == 0 {
                    TimeProfile::monomial(p.power, self.tau)
                } else {
                    TimeProfile::new(p.power, p.window, self.tau)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsSpec {
    List(Vec<f64>),
    Grid { lo: f64, hi: f64, points: usize },
}

impl EpsSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            EpsSpec::List(v) => v.clone(),
            EpsSpec::Grid { lo, hi, points } => {
                let m = (*points).max(2) - 1;
                (0..*points)
                    .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / m as f64).exp())
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub family: FamilyKind,
    pub which: Which,
    pub eps: EpsSpec,
    #[serde(default = "default_sweep_modes")]
    pub modes: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<f64>,
}

fn default_sweep_modes() -> usize {
    30
}

fn default_radius() -> f64 {
    0.25
}

impl SweepSpec {
    pub fn tolerances(&self) -> SweepTolerances {
        let d = SweepTolerances::default();
        SweepTolerances {
            slope: self.slope.unwrap_or(d.slope),
            band: self.band.unwrap_or(d.band),
            ..d
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyCheck {
    Lemte,
    Ui0,
    Estimates,
    Chain,
    Splitting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    pub checks: Vec<VerifyCheck>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Record used by the estimate and chain checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<String>,
}

fn default_samples() -> usize {
    1000
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn known(&self, name: &str, what: &str) -> Result<()> {
        if self.coefficients.contains_key(name) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("{what} refers to undefined coefficient '{name}'")))
        }
    }

    /// Schema-level checks: references resolve, sizes and exponents are
    /// admissible. Field values are checked when sampled.
    pub fn validate(&self) -> Result<()> {
        let n = self.mesh.n;
        if !(2..=3).contains(&n) {
            return Err(Error::Invalid(format!("mesh dimension must be 2 or 3, got {n}")));
        }
        if self.mesh.resolution < 2 {
            return Err(Error::Invalid("mesh resolution must be at least 2".into()));
        }
        if self.spectral.k == 0 {
            return Err(Error::Invalid("K must be at least 1".into()));
        }
        for (name, c) in &self.coefficients {
            if c.expression.is_some() && c.csv.is_some() {
                return Err(Error::Invalid(format!("coefficient '{name}' has both an expression and a csv file")));
            }
            if c.expression.is_none() && c.csv.is_none() && c.kind != FieldKind::Metric {
                return Err(Error::Invalid(format!("coefficient '{name}' needs an expression or a csv file")));
            }
        }
        if let Some(m) = &self.metric {
            check_exponents(m.p, m.q, n)?;
            for r in &m.records {
                self.known(r, "metric.records")?;
            }
            if m.truncation == Some(0) {
                return Err(Error::Invalid("metric.truncation must be at least 1".into()));
            }
        }
        if let Some(d) = &self.dtn {
            self.known(&d.coefficient, "dtn.coefficient")?;
            if let Some(r) = &d.reference {
                self.known(r, "dtn.reference")?;
            }
            if d.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(Error::Invalid("dtn.lambdas must be finite and nonnegative".into()));
            }
            if d.orders.is_empty() || d.lambdas.is_empty() {
                return Err(Error::Invalid("dtn needs at least one λ and one order".into()));
            }
        }
        if let Some(w) = &self.wave {
            self.known(&w.coefficient, "wave.coefficient")?;
            if w.profiles.is_empty() || w.routes.is_empty() {
                return Err(Error::Invalid("wave needs at least one profile and one route".into()));
            }
            if !(w.tau > 0.0 && w.tau.is_finite()) || w.dt.is_some_and(|dt| !(dt > 0.0)) {
                return Err(Error::Invalid("wave.tau and wave.dt must be positive".into()));
            }
        }
        if let Some(s) = &self.sweep {
            if s.eps.values().iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                return Err(Error::Invalid("sweep amplitudes must be finite and nonnegative".into()));
            }
        }
        if let Some(v) = &self.verify {
            if let Some(c) = &v.coefficient {
                self.known(c, "verify.coefficient")?;
            }
            let needs_record = v.checks.iter().any(|c| matches!(c, VerifyCheck::Estimates | VerifyCheck::Chain));
            if needs_record && v.coefficient.is_none() {
                return Err(Error::Invalid("estimate and chain checks need verify.coefficient".into()));
            }
            if v.checks.contains(&VerifyCheck::Splitting) && self.metric.is_none() {
                return Err(Error::Invalid("the splitting check compares metric.records".into()));
            }
        }
        Ok(())
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        build_box_mesh(self.mesh.n, self.mesh.resolution)
    }

    pub fn field(&self, mesh: &Mesh, name: &str, base: &Path) -> Result<CoefficientField> {
        let c = self
            .coefficients
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("undefined coefficient '{name}'")))?;
        let bounds = c.bounds.resolve();
        if let Some(p) = &c.csv {
            let p = if p.is_absolute() { p.clone() } else { base.join(p) };
            return load_field_csv(&p, mesh, c.kind, bounds);
        }
        let expr = match (&c.expression, c.kind) {
            (None, _) => Expression::identity(),
            (Some(ExprSpec::Tensor(t)), FieldKind::Metric) => Expression::parse_tensor(t, self.mesh.n)?,
            (Some(ExprSpec::Scalar(s)), FieldKind::Metric) => {
                return Err(Error::Invalid(format!("metric '{name}' needs a tensor, got scalar '{s}'")))
            }
            (Some(ExprSpec::Scalar(s)), _) => Expression::parse_scalar(s)?,
            (Some(ExprSpec::Tensor(_)), k) => {
                return Err(Error::Invalid(format!("{k:?} coefficient '{name}' needs a scalar expression")))
            }
        };
        let bg = c
            .background
            .as_ref()
            .map(|t| Expression::parse_tensor(t, self.mesh.n))
            .transpose()?;
        make_field(mesh, c.kind, &expr, bg.as_ref(), bounds)
    }

    pub fn operator(&self, mesh: &Mesh, name: &str, base: &Path) -> Result<OperatorPair> {
        assemble(mesh, &self.field(mesh, name, base)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const SAMPLE: &str = r#"{
        "mesh": {"n": 2, "resolution": 8},
        "coefficients": {
            "flat": {"kind": "metric"},
            "bumped": {"kind": "conformal", "expression": "1 + 0.1*bump(sqrt((x1-0.5)^2+(x2-0.5)^2)/0.25)"}
        },
        "spectral": {"K": 10},
        "metric": {"records": ["flat", "bumped"], "p": 1.0, "q": 1.0},
        "dtn": {"coefficient": "bumped", "reference": "flat", "orders": [0, 2]},
        "wave": {"coefficient": "flat", "profiles": [{"power": 8, "window": 4}]},
        "sweep": {"family": "conformal", "which": {"type": "elliptic", "j": 1}, "eps": {"lo": 1e-3, "hi": 1e-1, "points": 3}},
        "verify": {"checks": ["lemte", "ui0", "estimates"], "samples": 10, "coefficient": "flat"},
        "seed": 7
    }"#;

    #[test]
    fn round_trip_is_identity() {
        let a = ExperimentConfig::from_json(SAMPLE).unwrap();
        let b = ExperimentConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output, PathBuf::from("out"));
        assert_eq!(a.sweep.as_ref().unwrap().eps.values().len(), 3);
    }

    #[test]
    fn exponents_are_checked_at_parse_time() {
        let bad = SAMPLE.replace(r#""p": 1.0"#, r#""p": 1.5"#);
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Exponent(_))));
    }

    #[test]
    fn undefined_references_and_empty_requests_fail() {
        let bad = SAMPLE.replace(r#""coefficient": "bumped""#, r#""coefficient": "nope""#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = SAMPLE.replace(r#""K": 10"#, r#""K": 0"#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = SAMPLE.replace(r#""seed": 7"#, r#""seed": 7, "extra": 1"#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn fields_are_built_from_expressions() {
        let c = ExperimentConfig::from_json(SAMPLE).unwrap();
        let m = c.build_mesh().unwrap();
        let f = c.field(&m, "bumped", Path::new(".")).unwrap();
        assert_eq!(f.kind, FieldKind::Conformal);
        assert!(f.scalar.iter().cloned().fold(0.0, f64::max) > 1.05);
    }
}

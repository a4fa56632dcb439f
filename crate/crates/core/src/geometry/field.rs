use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mesh::Mesh;
use crate::error::{Error, Result};

pub type Sym = [[f64; 3]; 3];

pub fn identity_sym() -> Sym {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Metric,
    Conformal,
    Conductivity,
    Potential,
}

/// Class constants: ellipticity ratio `alpha`, regularity bound `beta`
/// (checked as a discrete Lipschitz bound on the sampled values) and the
/// potential ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub alpha: f64,
    #[serde(default = "infinite")]
    pub beta: f64,
    #[serde(default = "infinite")]
    pub potential_ceiling: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: f64::INFINITY,
            potential_ceiling: f64::INFINITY,
        }
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type TensorFn = Arc<dyn Fn(&[f64]) -> Sym + Send + Sync>;

#[derive(Clone)]
pub enum Expression {
    Scalar(ScalarFn),
    Tensor(TensorFn),
}

/// `exp(1 - 1/(1 - r²))` on `|r| < 1`, zero outside; peak value 1 at `r = 0`.
pub fn bump(r: f64) -> f64 {
    if r.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    }
}

struct Compiled {
    slab: fasteval::Slab,
    instr: fasteval::Instruction,
}

fn eval_compiled(c: &Compiled, x: &[f64]) -> std::result::Result<f64, fasteval::Error> {
    use fasteval::Evaler;
    let mut ns = |name: &str, args: Vec<f64>| -> Option<f64> {
        match (name, args.as_slice()) {
            ("x1", []) => x.first().copied(),
            ("x2", []) => x.get(1).copied(),
            ("x3", []) => Some(x.get(2).copied().unwrap_or(0.0)),
            ("sqrt", [a]) => Some(a.sqrt()),
            ("exp", [a]) => Some(a.exp()),
            ("ln", [a]) => Some(a.ln()),
            ("bump", [r]) => Some(bump(*r)),
            _ => None,
        }
    };
    c.instr.eval(&c.slab, &mut ns)
}

fn parse_one(src: &str) -> Result<ScalarFn> {
    use fasteval::Compiler;
    let parser = fasteval::Parser::new();
    let mut slab = fasteval::Slab::new();
    let instr = parser
        .parse(src, &mut slab.ps)
        .map_err(|e| Error::Invalid(format!("cannot parse expression '{src}': {e}")))?
        .from(&slab.ps)
        .compile(&slab.ps, &mut slab.cs);
    let c = Compiled { slab, instr };
    // Probe once so unknown names are reported at parse time.
    eval_compiled(&c, &[0.5, 0.5, 0.5]).map_err(|e| Error::Invalid(format!("cannot evaluate '{src}': {e}")))?;
    let c = Arc::new(c);
    Ok(Arc::new(move |x: &[f64]| eval_compiled(&c, x).unwrap_or(f64::NAN)))
}

impl Expression {
    pub fn constant(c: f64) -> Self {
        Expression::Scalar(Arc::new(move |_| c))
    }

    pub fn identity() -> Self {
        Expression::Tensor(Arc::new(|_| identity_sym()))
    }

    pub fn scalar<F: Fn(&[f64]) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Expression::Scalar(Arc::new(f))
    }

    pub fn tensor<F: Fn(&[f64]) -> Sym + Send + Sync + 'static>(f: F) -> Self {
        Expression::Tensor(Arc::new(f))
    }

    /// Scalar expression in the variables `x1, x2, x3`. Besides the built-in
    /// functions, `sqrt`, `exp`, `ln` and `bump(r)` are available.
    pub fn parse_scalar(src: &str) -> Result<Self> {
        Ok(Expression::Scalar(parse_one(src)?))
    }

    /// Symmetric tensor from its upper triangle, row by row
    /// (`g11 g12 g22` in 2D, `g11 g12 g13 g22 g23 g33` in 3D).
    pub fn parse_tensor(entries: &[String], n: usize) -> Result<Self> {
        let need = n * (n + 1) / 2;
        if entries.len() != need {
            return Err(Error::Invalid(format!("{n}D tensor needs {need} entries, got {}", entries.len())));
        }
        let fs: Vec<ScalarFn> = entries.iter().map(|s| parse_one(s)).collect::<Result<_>>()?;
        Ok(Expression::Tensor(Arc::new(move |x| {
            let mut g = identity_sym();
            let mut t = 0;
            for i in 0..n {
                for j in i..n {
                    let v = fs[t](x);
                    g[i][j] = v;
                    g[j][i] = v;
                    t += 1;
                }
            }
            g
        })))
    }

    fn as_scalar(&self) -> Result<&ScalarFn> {
        match self {
            Expression::Scalar(f) => Ok(f),
            Expression::Tensor(_) => Err(Error::Invalid("expected a scalar expression".into())),
        }
    }

    fn as_tensor(&self) -> Result<&TensorFn> {
        match self {
            Expression::Tensor(f) => Ok(f),
            Expression::Scalar(_) => Err(Error::Invalid("expected a tensor expression".into())),
        }
    }
}

/// Per-vertex coefficients of one operator.
///
/// `metric` is the effective tensor entering the Laplace–Beltrami form:
/// `g` itself, `c·g̃` for conformal fields, the background metric of a
/// Schrödinger operator. `scalar` holds `c`, `a` or `V` (ones for plain
/// metrics).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientField {
    pub kind: FieldKind,
    pub dim: usize,
    pub metric: Vec<Sym>,
    pub scalar: Vec<f64>,
    pub reference: Option<Vec<Sym>>,
    pub bounds: Bounds,
}

/// Eigenvalues of the leading `n x n` block of a symmetric tensor, by cyclic Jacobi.
pub fn sym_eigenvalues(g: &Sym, n: usize) -> Vec<f64> {
    let mut a = *g;
    for _ in 0..50 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum().max(0.0) * 2.0 - 1.0;
                let t = t / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

pub fn det(g: &Sym, n: usize) -> f64 {
    if n == 2 {
        g[0][0] * g[1][1] - g[0][1] * g[1][0]
    } else {
        g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1]) - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
            + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0])
    }
}

pub fn inverse(g: &Sym, n: usize) -> Sym {
    let d = det(g, n);
    let mut r = identity_sym();
    if n == 2 {
        r[0][0] = g[1][1] / d;
        r[1][1] = g[0][0] / d;
        r[0][1] = -g[0][1] / d;
        r[1][0] = -g[1][0] / d;
    } else {
        for i in 0..3 {
            for j in 0..3 {
                let (i1, i2) = ((j + 1) % 3, (j + 2) % 3);
                let (j1, j2) = ((i + 1) % 3, (i + 2) % 3);
                r[i][j] = (g[i1][j1] * g[i2][j2] - g[i1][j2] * g[i2][j1]) / d;
            }
        }
    }
    r
}

const CLASS_TOL: f64 = 1e-12;

impl CoefficientField {
    pub fn n_vertices(&self) -> usize {
        self.scalar.len()
    }

    /// Re-checks the class constraints against the stored samples.
    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if mesh.dim != self.dim || mesh.n_vertices() != self.n_vertices() || self.metric.len() != self.n_vertices() {
            return Err(Error::Mismatch(format!(
                "field has {} samples in {}D, mesh has {} vertices in {}D",
                self.n_vertices(),
                self.dim,
                mesh.n_vertices(),
                mesh.dim
            )));
        }
        let n = self.dim;
        let alpha = self.bounds.alpha;
        if !(alpha >= 1.0) {
            return Err(Error::Invalid(format!("ellipticity ratio alpha = {alpha} must be >= 1")));
        }
        let (lo, hi) = (1.0 / alpha, alpha);
        let check_tensor = |tensors: &[Sym]| -> Result<()> {
            let mut worst: Option<(usize, f64, f64)> = None;
            for (v, g) in tensors.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        if !g[i][j].is_finite() || (g[i][j] - g[j][i]).abs() > 1e-14 * (1.0 + g[i][j].abs()) {
                            return Err(Error::Invalid(format!("tensor at vertex {v} is not finite and symmetric")));
                        }
                    }
                }
                for ev in sym_eigenvalues(g, n) {
                    let excess = (lo / ev).max(ev / hi);
                    if (ev < lo * (1.0 - CLASS_TOL) || ev > hi * (1.0 + CLASS_TOL))
                        && worst.is_none_or(|(_, _, x)| excess > x)
                    {
                        worst = Some((v, ev, excess));
                    }
                }
            }
            match worst {
                Some((vertex, eigenvalue, _)) => Err(Error::Ellipticity { vertex, eigenvalue, lo, hi }),
                None => Ok(()),
            }
        };
        for (v, s) in self.scalar.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Invalid(format!("coefficient at vertex {v} is not finite")));
            }
        }
        match self.kind {
            FieldKind::Metric | FieldKind::Conformal => check_tensor(&self.metric)?,
            FieldKind::Potential => {
                check_tensor(&self.metric)?;
                let c = self.bounds.potential_ceiling;
                for (v, &val) in self.scalar.iter().enumerate() {
                    if val < 0.0 || val > c * (1.0 + CLASS_TOL) {
                        return Err(Error::Bound { vertex: v, value: val, lo: 0.0, hi: c });
                    }
                }
            }
            FieldKind::Conductivity => {
                let mut worst: Option<(usize, f64, f64)> = None;
                for (v, &a) in self.scalar.iter().enumerate() {
                    let excess = (lo / a).max(a / hi);
                    if (a < lo * (1.0 - CLASS_TOL) || a > hi * (1.0 + CLASS_TOL)) && worst.is_none_or(|(_, _, x)| excess > x) {
                        worst = Some((v, a, excess));
                    }
                }
                if let Some((vertex, value, _)) = worst {
                    return Err(Error::Bound { vertex, value, lo, hi });
                }
            }
        }
        if self.bounds.beta.is_finite() {
            let lip = self.lipschitz(mesh);
            if lip > self.bounds.beta {
                return Err(Error::Bound { vertex: 0, value: lip, lo: 0.0, hi: self.bounds.beta });
            }
        }
        Ok(())
    }

    /// Largest difference quotient of any coefficient entry along a cell edge.
    pub fn lipschitz(&self, mesh: &Mesh) -> f64 {
        let h = mesh.h();
        let n = self.dim;
        let mut worst = 0.0f64;
        for c in &mesh.cells {
            for a in 0..c.len() {
                for b in a + 1..c.len() {
                    let (u, v) = (c[a], c[b]);
                    let adjacent = (0..n).filter(|&d| mesh.vertices[u][d] != mesh.vertices[v][d]).count() == 1;
                    if !adjacent {
                        continue;
                    }
                    worst = worst.max((self.scalar[u] - self.scalar[v]).abs() / h);
                    for i in 0..n {
                        for j in 0..n {
                            worst = worst.max((self.metric[u][i][j] - self.metric[v][i][j]).abs() / h);
                        }
                    }
                }
            }
        }
        worst
    }

    /// Whether two fields coincide at every boundary vertex (class with a shared boundary metric).
    pub fn agrees_on_boundary(&self, other: &CoefficientField, mesh: &Mesh, tol: f64) -> bool {
        mesh.boundary.iter().all(|&v| {
            let n = self.dim;
            (0..n).all(|i| (0..n).all(|j| (self.metric[v][i][j] - other.metric[v][i][j]).abs() <= tol))
                && (self.kind != FieldKind::Conductivity || (self.scalar[v] - other.scalar[v]).abs() <= tol)
        })
    }
}

/// Samples an expression on the mesh vertices and checks the class constraints.
///
/// `expr` is the tensor for metric fields and the scalar (`c`, `a`, `V`)
/// otherwise; `background` is the reference tensor `g̃` of a conformal field
/// or the metric of a Schrödinger operator (identity when omitted).
pub fn make_field(
    mesh: &Mesh,
    kind: FieldKind,
    expr: &Expression,
    background: Option<&Expression>,
    bounds: Bounds,
) -> Result<CoefficientField> {
    let n = mesh.dim;
    let nv = mesh.n_vertices();
    let mut metric = vec![identity_sym(); nv];
    let mut scalar = vec![1.0; nv];
    let mut reference = None;
    let sample_tensor = |f: &TensorFn| -> Vec<Sym> {
        (0..nv)
            .map(|v| {
                let mut g = f(mesh.coords(v));
                for i in n..3 {
                    for j in 0..3 {
                        g[i][j] = if i == j { 1.0 } else { 0.0 };
                        g[j][i] = g[i][j];
                    }
                }
                g
            })
            .collect()
    };
    match kind {
        FieldKind::Metric => {
            if background.is_some() {
                return Err(Error::Invalid("metric fields take no background tensor".into()));
            }
            metric = sample_tensor(expr.as_tensor()?);
        }
        FieldKind::Conformal => {
            let c = expr.as_scalar()?;
            let gt = match background {
                Some(b) => sample_tensor(b.as_tensor()?),
                None => vec![identity_sym(); nv],
            };
            for v in 0..nv {
                scalar[v] = c(mesh.coords(v));
                for i in 0..n {
                    for j in 0..n {
                        metric[v][i][j] = scalar[v] * gt[v][i][j];
                    }
                }
            }
            reference = Some(gt);
        }
        FieldKind::Conductivity => {
            if background.is_some() {
                return Err(Error::Invalid("conductivity fields take no background tensor".into()));
            }
            let a = expr.as_scalar()?;
            for v in 0..nv {
                scalar[v] = a(mesh.coords(v));
            }
        }
        FieldKind::Potential => {
            let f = expr.as_scalar()?;
            if let Some(b) = background {
                metric = sample_tensor(b.as_tensor()?);
            }
            for v in 0..nv {
                scalar[v] = f(mesh.coords(v));
            }
        }
    }
    let field = CoefficientField {
        kind,
        dim: n,
        metric,
        scalar,
        reference,
        bounds,
    };
    field.validate(mesh)?;
    Ok(field)
}

/// Loads per-vertex values from CSV: a `vertex` column followed by the
/// upper-triangular tensor entries (metric) or one scalar column.
/// Conformal and potential fields use the identity as background.
pub fn load_field_csv(path: &Path, mesh: &Mesh, kind: FieldKind, bounds: Bounds) -> Result<CoefficientField> {
    let n = mesh.dim;
    let width = if kind == FieldKind::Metric { n * (n + 1) / 2 } else { 1 };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let nv = mesh.n_vertices();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; nv];
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != width + 1 {
            return Err(Error::Mismatch(format!("expected {} columns, found {}", width + 1, rec.len())));
        }
        let v: usize = rec[0].parse().map_err(|_| Error::Invalid(format!("bad vertex id '{}'", &rec[0])))?;
        if v >= nv {
            return Err(Error::Mismatch(format!("vertex {v} out of range ({nv} vertices)")));
        }
        let vals: Vec<f64> = (1..=width)
            .map(|i| rec[i].parse::<f64>().map_err(|_| Error::Invalid(format!("bad number '{}'", &rec[i]))))
            .collect::<Result<_>>()?;
        rows[v] = Some(vals);
    }
    let vals: Vec<Vec<f64>> = rows
        .into_iter()
        .enumerate()
        .map(|(v, r)| r.ok_or_else(|| Error::Mismatch(format!("vertex {v} missing from field file"))))
        .collect::<Result<_>>()?;
    let mut metric = vec![identity_sym(); nv];
    let mut scalar = vec![1.0; nv];
    for v in 0..nv {
        match kind {
            FieldKind::Metric => {
                let mut t = 0;
                for i in 0..n {
                    for j in i..n {
                        metric[v][i][j] = vals[v][t];
                        metric[v][j][i] = vals[v][t];
                        t += 1;
                    }
                }
            }
            FieldKind::Conformal => {
                scalar[v] = vals[v][0];
                for i in 0..n {
                    metric[v][i][i] = vals[v][0];
                }
            }
            FieldKind::Conductivity | FieldKind::Potential => scalar[v] = vals[v][0],
        }
    }
    let field = CoefficientField {
        kind,
        dim: n,
        metric,
        scalar,
        reference: (kind == FieldKind::Conformal).then(|| vec![identity_sym(); nv]),
        bounds,
    };
    field.validate(mesh)?;
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_box_mesh;

    fn b(alpha: f64) -> Bounds {
        Bounds { alpha, ..Bounds::default() }
    }

    #[test]
    fn identity_metric_has_unit_spectrum() {
        let m = build_box_mesh(2, 4).unwrap();
        let f = make_field(&m, FieldKind::Metric, &Expression::identity(), None, b(2.0)).unwrap();
        for g in &f.metric {
            assert_eq!(sym_eigenvalues(g, 2), vec![1.0, 1.0]);
        }
    }

    #[test]
    fn linear_conformal_factor_range() {
        let m = build_box_mesh(2, 8).unwrap();
        let e = Expression::parse_scalar("1 + 0.1*x1").unwrap();
        let f = make_field(&m, FieldKind::Conformal, &e, None, b(2.0)).unwrap();
        let lo = f.scalar.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.scalar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 1.0);
        assert!((hi - 1.1).abs() < 1e-15);
    }

    #[test]
    fn product_potential_range() {
        let m = build_box_mesh(2, 8).unwrap();
        let e = Expression::parse_scalar("x1*x2").unwrap();
        let bounds = Bounds { potential_ceiling: 1.0, ..b(2.0) };
        let f = make_field(&m, FieldKind::Potential, &e, None, bounds).unwrap();
        let hi = f.scalar.iter().cloned().fold(0.0, f64::max);
        let lo = f.scalar.iter().cloned().fold(1.0, f64::min);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn violations_are_rejected() {
        let m = build_box_mesh(2, 4).unwrap();
        let e = Expression::parse_scalar("1 + 2*x1").unwrap();
        match make_field(&m, FieldKind::Conformal, &e, None, b(2.0)) {
            Err(Error::Ellipticity { eigenvalue, .. }) => assert!((eigenvalue - 3.0).abs() < 1e-12),
            other => panic!("expected ellipticity error, got {other:?}"),
        }
        let v = Expression::parse_scalar("x1 - 0.5").unwrap();
        assert!(matches!(
            make_field(&m, FieldKind::Potential, &v, None, Bounds { potential_ceiling: 1.0, ..b(2.0) }),
            Err(Error::Bound { .. })
        ));
        let a = Expression::constant(0.25);
        assert!(make_field(&m, FieldKind::Conductivity, &a, None, b(2.0)).is_err());
    }

    #[test]
    fn tensor_parse_fills_upper_triangle() {
        let m = build_box_mesh(2, 2).unwrap();
        let e = Expression::parse_tensor(&["1.5".into(), "0.25".into(), "1".into()], 2).unwrap();
        let f = make_field(&m, FieldKind::Metric, &e, None, b(2.0)).unwrap();
        assert_eq!(f.metric[4][0][1], 0.25);
        assert_eq!(f.metric[4][1][0], 0.25);
    }

    #[test]
    fn bump_is_compact_and_normalized() {
        assert_eq!(bump(0.0), 1.0);
        assert_eq!(bump(1.0), 0.0);
        assert_eq!(bump(-2.0), 0.0);
        assert!(bump(0.5) > 0.0 && bump(0.5) < 1.0);
        let e = Expression::parse_scalar("bump(2*x1)").unwrap();
        if let Expression::Scalar(f) = e {
            assert_eq!(f(&[0.0, 0.0]), 1.0);
        }
    }

    #[test]
    fn jacobi_eigenvalues_3d() {
        let g = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let ev = sym_eigenvalues(&g, 3);
        assert!((ev[0] - 1.0).abs() < 1e-13 && (ev[1] - 3.0).abs() < 1e-13 && (ev[2] - 5.0).abs() < 1e-13);
        let inv = inverse(&g, 3);
        assert!((inv[0][0] - 2.0 / 3.0).abs() < 1e-14 && (inv[0][1] + 1.0 / 3.0).abs() < 1e-14);
    }
}

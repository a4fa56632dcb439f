//! One function per subcommand. Each returns the reports it produced and the
//! files it wrote; printing and exit codes are left to the binary.

use std::path::{Path, PathBuf};

use bsd2dtn_core::assembly::OperatorPair;
use bsd2dtn_core::bsd_metrics::{align, delta_report, pair_modes, DeltaReport};
use bsd2dtn_core::elliptic_dtn::{
    boundary_fourier_probes, direct_chain, dtn_series, dtn_series_accelerated, probe_relative_errors, three_term_split,
    Reference, SeriesOptions,
};
use bsd2dtn_core::geometry::Mesh;
use bsd2dtn_core::hyperbolic_dtn::{
    default_ell, hyperbolic_difference, wave_formula, wave_step, HyperbolicRecord, TimeProfile, WaveProbe, WaveRoute,
    WaveTrace,
};
use bsd2dtn_core::io::{csv_bytes, load_spectral, read_json, save_dtn, save_spectral, save_wave_trace, write_atomic, write_json};
use bsd2dtn_core::linalg::weighted_norm;
use bsd2dtn_core::report::{Check, VerificationReport};
use bsd2dtn_core::spectral::{eigensolve_opts, validate_estimates, SpectralData};
use bsd2dtn_core::verify::{check_elliptic_chain, check_lemte, check_ui0, sweep_stability, Family, SweepResult};
use bsd2dtn_core::{Error, Result};

use crate::config::{ExperimentConfig, VerifyCheck};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Eigs,
    Dtn,
    Wave,
    Delta,
    Verify,
    Sweep,
}

/// Resolved invocation: the config plus command-line overrides.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub reports: Vec<VerificationReport>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }

    fn report(&mut self, out: &Path, r: VerificationReport) -> Result<()> {
        let p = out.join(format!("{}.json", r.check_id));
        write_json(&p, &r)?;
        self.files.push(p);
        self.reports.push(r);
        Ok(())
    }
}

impl Context {
    pub fn new(config: ExperimentConfig, base: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        let out = out.unwrap_or_else(|| {
            if config.output.is_absolute() {
                config.output.clone()
            } else {
                base.join(&config.output)
            }
        });
        let seed = seed.unwrap_or(config.seed);
        Self { config, out, base, seed }
    }

    fn spectral_path(&self, name: &str) -> PathBuf {
        self.out.join(format!("spectral_{name}.json"))
    }

    fn fingerprint(&self, name: &str) -> serde_json::Value {
        serde_json::json!({
            "mesh": self.config.mesh,
            "coefficient": self.config.coefficients.get(name),
            "spectral": self.config.spectral,
        })
    }

    /// Operator and spectral record of a named coefficient. A record saved by
    /// an earlier run with the same mesh, coefficient and spectral settings is
    /// reused; otherwise it is computed and saved.
    fn record(&self, mesh: &Mesh, name: &str, files: &mut Vec<PathBuf>) -> Result<(OperatorPair, SpectralData)> {
        let op = self.config.operator(mesh, name, &self.base)?;
        let path = self.spectral_path(name);
        let fp_path = path.with_extension("fingerprint.json");
        let fp = self.fingerprint(name);
        if path.exists() && fp_path.exists() {
            if let Ok(old) = read_json::<serde_json::Value>(&fp_path) {
                if old == fp {
                    return Ok((op, load_spectral(&path)?));
                }
            }
        }
        let s = &self.config.spectral;
        let sd = eigensolve_opts(&op, s.k, s.keep_eigvecs)?;
        files.extend(save_spectral(&path, &sd)?);
        write_json(&fp_path, &fp)?;
        files.push(fp_path);
        Ok((op, sd))
    }

    /// Human-readable plan for `--dry-run`.
    pub fn plan(&self, cmd: Command) -> Result<Vec<String>> {
        let c = &self.config;
        let mut p = vec![
            format!("command: {cmd:?}"),
            format!("mesh: n = {}, resolution = {}", c.mesh.n, c.mesh.resolution),
            format!("output: {}", self.out.display()),
            format!("seed: {}", self.seed),
        ];
        let need = |what: &str| Error::Invalid(format!("config has no '{what}' section"));
        match cmd {
            Command::Eigs => {
                for name in c.coefficients.keys() {
                    p.push(format!(
                        "eigensolve '{name}' with K = {} -> {}",
                        c.spectral.k,
                        self.spectral_path(name).display()
                    ));
                }
            }
            Command::Dtn => {
                let d = c.dtn.as_ref().ok_or_else(|| need("dtn"))?;
                p.push(format!(
                    "DtN of '{}' at λ = {:?}, orders {:?}, probes to order {}, reference {:?}",
                    d.coefficient, d.lambdas, d.orders, d.probe_order, d.reference
                ));
            }
            Command::Wave => {
                let w = c.wave.as_ref().ok_or_else(|| need("wave"))?;
                p.push(format!(
                    "wave traces of '{}' on τ = {}, dt = {}, ℓ = {}, routes {:?}, {} profile(s)",
                    w.coefficient,
                    w.tau,
                    self.wave_dt(),
                    w.ell.unwrap_or(default_ell(c.mesh.n)),
                    w.routes,
                    w.profiles.len()
                ));
            }
            Command::Delta => {
                let m = c.metric.as_ref().ok_or_else(|| need("metric"))?;
                p.push(format!(
                    "δ functionals between '{}' and '{}' with p = {}, q = {}, K = {:?}",
                    m.records[0], m.records[1], m.p, m.q, m.truncation
                ));
            }
            Command::Verify => {
                let v = c.verify.as_ref().ok_or_else(|| need("verify"))?;
                p.push(format!("checks {:?} with {} samples", v.checks, v.samples));
            }
            Command::Sweep => {
                let s = c.sweep.as_ref().ok_or_else(|| need("sweep"))?;
                p.push(format!(
                    "sweep {:?} / {:?} over ε = {:?} with {} modes",
                    s.family,
                    s.which,
                    s.eps.values(),
                    s.modes
                ));
            }
        }
        Ok(p)
    }

    fn wave_dt(&self) -> f64 {
        let h = 1.0 / self.config.mesh.resolution as f64;
        self.config.wave.as_ref().and_then(|w| w.dt).unwrap_or(h / 4.0)
    }

    pub fn run(&self, cmd: Command) -> Result<Outcome> {
        match cmd {
            Command::Eigs => cmd_eigs(self),
            Command::Dtn => cmd_dtn(self),
            Command::Wave => cmd_wave(self),
            Command::Delta => cmd_delta(self),
            Command::Verify => cmd_verify(self),
            Command::Sweep => cmd_sweep(self),
        }
    }
}

fn missing(section: &str) -> Error {
    Error::Missing(format!("config section '{section}'"))
}

pub fn cmd_eigs(ctx: &Context) -> Result<Outcome> {
    let mesh = ctx.config.build_mesh()?;
    let mut out = Outcome::default();
    if ctx.config.coefficients.is_empty() {
        return Err(Error::Invalid("no coefficients to solve for".into()));
    }
    for name in ctx.config.coefficients.keys() {
        let op = ctx.config.operator(&mesh, name, &ctx.base)?;
        let s = &ctx.config.spectral;
        let sd = eigensolve_opts(&op, s.k, s.keep_eigvecs)?;
        let path = ctx.spectral_path(name);
        out.files.extend(save_spectral(&path, &sd)?);
        let fp = path.with_extension("fingerprint.json");
        write_json(&fp, &ctx.fingerprint(name))?;
        out.files.push(fp);
        let mut r = validate_estimates(&sd, ctx.config.mesh.n);
        r.check_id = format!("eigs_{name}");
        r.measure("lambda_1", sd.lambdas[0]);
        r.push(Check::new("residual_tolerance", sd.max_residual, s.residual_tol, 0.0));
        out.report(&ctx.out, r)?;
    }
    Ok(out)
}

fn lambda_tag(l: f64) -> String {
    format!("{l}").replace('.', "p")
}

pub fn cmd_dtn(ctx: &Context) -> Result<Outcome> {
    let d = ctx.config.dtn.as_ref().ok_or_else(|| missing("dtn"))?;
    let mesh = ctx.config.build_mesh()?;
    let mut out = Outcome::default();
    let (op, sd) = ctx.record(&mesh, &d.coefficient, &mut out.files)?;
    let reference = match &d.reference {
        Some(r) => Some(ctx.record(&mesh, r, &mut out.files)?),
        None => None,
    };
    let probes = boundary_fourier_probes(&mesh, d.probe_order);
    let jmax = *d.orders.iter().max().expect("validated nonempty");
    let opts = SeriesOptions {
        k: d.series_k,
        threshold: None,
        window: d.window,
    };
    let mut r = VerificationReport::new(format!("dtn_{}", d.coefficient));
    r.input("lambdas", &d.lambdas)
        .input("orders", &d.orders)
        .input("probes", probes.len())
        .input("K", sd.k())
        .input("series_k", d.series_k)
        .input("reference", &d.reference);
    for &lambda in &d.lambdas {
        let chain = direct_chain(&op, lambda, jmax, Some(&sd.lambdas))?;
        let rchain = match &reference {
            Some((rop, rsd)) => Some(direct_chain(rop, lambda, jmax, Some(&rsd.lambdas))?),
            None => None,
        };
        for &j in &d.orders {
            let tag = format!("{}_l{}_j{j}", d.coefficient, lambda_tag(lambda));
            let direct = &chain[j];
            let p = ctx.out.join(format!("dtn_{tag}_direct.bsdm"));
            save_dtn(&p, direct)?;
            out.files.push(p);
            let series = match dtn_series(&sd, lambda, j, opts) {
                Ok(s) => Some(s),
                Err(Error::DivergentRegime(why)) => match (&reference, &rchain) {
                    (Some((_, rsd)), Some(rc)) => Some(dtn_series_accelerated(
                        &sd,
                        Reference { sd: rsd, direct: &rc[j] },
                        lambda,
                        j,
                        opts,
                    )?),
                    _ => {
                        r.note(format!("{tag}: series skipped ({why}); set dtn.reference to use the accelerated series"));
                        None
                    }
                },
                Err(e) => return Err(e),
            };
            let Some(series) = series else { continue };
            let p = ctx.out.join(format!("dtn_{tag}_series.bsdm"));
            save_dtn(&p, &series)?;
            out.files.push(p);
            let errs = probe_relative_errors(&series, direct, &probes);
            for (i, (e, phi)) in errs.iter().zip(&probes).enumerate() {
                let flux = weighted_norm(&direct.apply(phi), &direct.weight);
                let phin = weighted_norm(phi, &direct.weight);
                let tail = if flux > 0.0 { series.tail_bound * phin / flux } else { series.tail_bound };
                r.measure(&format!("{tag}_probe{i}_error"), *e);
                r.push(Check::new(format!("{tag}_probe{i}"), *e, tail + d.tolerance, 0.0));
            }
            r.measure(&format!("{tag}_tail_bound"), series.tail_bound)
                .measure(&format!("{tag}_k_used"), series.k_used.unwrap_or(0) as f64)
                .measure(&format!("{tag}_symmetry_defect"), direct.symmetry_defect());
            r.input(&format!("{tag}_route"), series.route).input(&format!("{tag}_tail_kind"), series.tail_kind);
        }
    }
    out.report(&ctx.out, r)?;
    Ok(out)
}

fn wave_probes(mesh: &Mesh, order: usize, profiles: &[TimeProfile]) -> Vec<WaveProbe> {
    let phis = boundary_fourier_probes(mesh, order);
    profiles
        .iter()
        .flat_map(|pr| {
            phis.iter().map(move |phi| WaveProbe {
                phi: phi.clone(),
                profile: pr.clone(),
            })
        })
        .collect()
}

fn save_trace(out: &mut Outcome, dir: &Path, stem: &str, tr: &WaveTrace) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    tr.write_csv(&csv)?;
    let bin = dir.join(format!("{stem}.bsdm"));
    save_wave_trace(&bin, tr)?;
    out.files.push(csv);
    out.files.push(bin);
    Ok(())
}

pub fn cmd_wave(ctx: &Context) -> Result<Outcome> {
    let w = ctx.config.wave.as_ref().ok_or_else(|| missing("wave"))?;
    let mesh = ctx.config.build_mesh()?;
    let mut out = Outcome::default();
    let (op, sd) = ctx.record(&mesh, &w.coefficient, &mut out.files)?;
    let ell = w.ell.unwrap_or(default_ell(ctx.config.mesh.n));
    let dt = ctx.wave_dt();
    let probes = wave_probes(&mesh, w.probe_order, &w.time_profiles());
    let mut r = VerificationReport::new(format!("wave_{}", w.coefficient));
    r.input("tau", w.tau)
        .input("dt", dt)
        .input("ell", ell)
        .input("K", sd.k())
        .input("profiles", &w.profiles)
        .input("probes", probes.len());
    let mut stepping = None;
    let mut formula = None;
    for route in &w.routes {
        match route {
            WaveRoute::Stepping if stepping.is_none() => {
                let tr = wave_step(&op, &probes, w.tau, dt)?;
                save_trace(&mut out, &ctx.out, &format!("wave_{}_stepping", w.coefficient), &tr)?;
                stepping = Some(tr);
            }
            WaveRoute::Formula if formula.is_none() => {
                let derivs = direct_chain(&op, 0.0, ell, None)?;
                let tr = wave_formula(&sd, &derivs, &probes, ell, w.tau, dt)?;
                save_trace(&mut out, &ctx.out, &format!("wave_{}_formula", w.coefficient), &tr)?;
                formula = Some(tr);
            }
            _ => {}
        }
    }
    for (name, tr) in [("stepping", &stepping), ("formula", &formula)] {
        if let Some(t) = tr {
            for p in 0..probes.len() {
                r.measure(&format!("{name}_probe{p}_norm"), t.norm(p));
            }
        }
    }
    if let Some(f) = &formula {
        for (p, relaxed) in f.relaxed.iter().enumerate() {
            if *relaxed {
                r.note(format!("probe {p}: profile meets only the relaxed smoothness class"));
            }
        }
        if let Some(tb) = &f.tail_bounds {
            for (p, t) in tb.iter().enumerate() {
                r.measure(&format!("formula_probe{p}_tail_bound"), *t);
            }
        }
    }
    if let (Some(s), Some(f)) = (&stepping, &formula) {
        for (p, d) in f.relative_discrepancy(s)?.iter().enumerate() {
            r.measure(&format!("probe{p}_discrepancy"), *d);
            r.push(Check::new(format!("probe{p}_routes_agree"), *d, w.tolerance, 0.0));
        }
    }
    out.report(&ctx.out, r)?;
    Ok(out)
}

fn delta_files(out: &mut Outcome, dir: &Path, d: &DeltaReport) -> Result<()> {
    let j = dir.join("delta.json");
    write_json(&j, d)?;
    let c = dir.join("delta.csv");
    write_atomic(&c, &csv_bytes(&DeltaReport::csv_header(), [d.csv_row()])?)?;
    out.files.push(j);
    out.files.push(c);
    Ok(())
}

pub fn cmd_delta(ctx: &Context) -> Result<Outcome> {
    let m = ctx.config.metric.as_ref().ok_or_else(|| missing("metric"))?;
    let mesh = ctx.config.build_mesh()?;
    let mut out = Outcome::default();
    let (_, a) = ctx.record(&mesh, &m.records[0], &mut out.files)?;
    let (_, b) = ctx.record(&mesh, &m.records[1], &mut out.files)?;
    let d = delta_report(&a, &b, m.p, m.q, m.truncation)?;
    delta_files(&mut out, &ctx.out, &d)?;
    let mut r = VerificationReport::new("delta");
    r.input("records", &m.records).input("p", m.p).input("q", m.q).input("K", d.k);
    r.measure("delta", d.delta)
        .measure("delta_lambda", d.delta_lambda)
        .measure("delta_psi", d.delta_psi)
        .measure("delta_bar", d.delta_bar)
        .measure("delta_star", d.delta_star)
        .measure("tail_delta_bar", d.tail_estimate.delta_bar)
        .measure("tail_delta_star", d.tail_estimate.delta_star);
    if let Some(x) = d.delta0 {
        r.measure("delta0", x);
    }
    let values = [Some(d.delta), d.delta0, Some(d.delta_bar), Some(d.delta_star)];
    let worst = values.iter().flatten().map(|x| if x.is_finite() { -x } else { f64::INFINITY }).fold(f64::NEG_INFINITY, f64::max);
    r.push(Check::new("functionals_nonnegative", worst, 0.0, 0.0));
    if d.pairing.leakage {
        r.note("mode pairing leaked across a truncated cluster; δ may be inflated");
    }
    if d.pairing.ambiguous {
        r.note("mode pairing was ambiguous in at least one window");
    }
    out.report(&ctx.out, r)?;
    Ok(out)
}

/// Three-term splittings at `λ ∈ {0, 1}`, `j ≤ 2` and the four-term hyperbolic
/// splitting, on the aligned metric records.
fn splitting_report(ctx: &Context, mesh: &Mesh, files: &mut Vec<PathBuf>) -> Result<VerificationReport> {
    let m = ctx.config.metric.as_ref().ok_or_else(|| missing("metric"))?;
    let (op1, s1) = ctx.record(mesh, &m.records[0], files)?;
    let (op2, s2) = ctx.record(mesh, &m.records[1], files)?;
    let pairing = pair_modes(&s1, &s2)?;
    let (a, b) = align(&s1, &s2, &pairing)?;
    let probes = boundary_fourier_probes(mesh, 2);
    let mut r = VerificationReport::new("splitting");
    r.input("records", &m.records).input("K", a.k());
    let mut worst = 0.0f64;
    for lambda in [0.0, 1.0] {
        for j in 0..=2 {
            for phi in &probes {
                worst = worst.max(three_term_split(&a, &b, lambda, j, phi)?.defect);
            }
        }
    }
    r.measure("three_term_defect", worst);
    r.push(Check::new("three_term", worst, 1e-10, 0.0));
    let ell = default_ell(ctx.config.mesh.n);
    let h = 1.0 / ctx.config.mesh.resolution as f64;
    let d1 = direct_chain(&op1, 0.0, ell, None)?;
    let d2 = direct_chain(&op2, 0.0, ell, None)?;
    let wp = wave_probes(mesh, 1, &[TimeProfile::new(2 * ell as u32 + 2, 4, 1.0)]);
    let hd = hyperbolic_difference(
        HyperbolicRecord { sd: &s1, derivs: &d1 },
        HyperbolicRecord { sd: &s2, derivs: &d2 },
        &wp,
        ell,
        1.0,
        h / 4.0,
    )?;
    r.measure("four_term_defect", hd.max_split_residual);
    r.push(Check::new("four_term", hd.max_split_residual, 1e-10, 0.0));
    Ok(r)
}

pub fn cmd_verify(ctx: &Context) -> Result<Outcome> {
    let v = ctx.config.verify.as_ref().ok_or_else(|| missing("verify"))?;
    let mesh = ctx.config.build_mesh()?;
    let mut out = Outcome::default();
    let mut checks = v.checks.clone();
    checks.sort();
    checks.dedup();
    for c in checks {
        let r = match c {
            VerifyCheck::Lemte => check_lemte(v.samples, ctx.seed)?,
            VerifyCheck::Ui0 => check_ui0(v.samples, ctx.seed)?,
            VerifyCheck::Estimates | VerifyCheck::Chain => {
                let name = v.coefficient.as_ref().ok_or_else(|| missing("verify.coefficient"))?;
                let (op, sd) = ctx.record(&mesh, name, &mut out.files)?;
                let mut r = if c == VerifyCheck::Estimates {
                    validate_estimates(&sd, ctx.config.mesh.n)
                } else {
                    check_elliptic_chain(&sd, &op, &mesh, ctx.seed)?
                };
                r.check_id = format!("{}_{name}", r.check_id);
                r
            }
            VerifyCheck::Splitting => splitting_report(ctx, &mesh, &mut out.files)?,
        };
        out.report(&ctx.out, r)?;
    }
    Ok(out)
}

pub fn cmd_sweep(ctx: &Context) -> Result<Outcome> {
    let s = ctx.config.sweep.as_ref().ok_or_else(|| missing("sweep"))?;
    let family = Family {
        kind: s.family,
        dim: ctx.config.mesh.n,
        resolution: ctx.config.mesh.resolution,
        modes: s.modes,
        eps: s.eps.values(),
        radius: s.radius,
    };
    let res: SweepResult = sweep_stability(&family, s.which, s.tolerances())?;
    let mut out = Outcome::default();
    let stem = res.report.check_id.clone();
    let j = ctx.out.join(format!("{stem}_table.json"));
    write_json(&j, &res)?;
    let c = ctx.out.join(format!("{stem}.csv"));
    write_atomic(&c, &csv_bytes(&SweepResult::csv_header(), res.csv_rows())?)?;
    out.files.push(j);
    out.files.push(c);
    out.report(&ctx.out, res.report)?;
    Ok(out)
}

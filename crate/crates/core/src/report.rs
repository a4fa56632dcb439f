//! Structured pass/fail records shared by every checker.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One measured-versus-bound comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// `bound·(1+tolerance) / measured`; above 1 means room to spare.
    pub margin: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, bound: f64, tolerance: f64) -> Self {
        let limit = bound * (1.0 + tolerance);
        let pass = measured.is_finite() && measured <= limit;
        let margin = if measured > 0.0 {
            limit / measured
        } else if limit >= 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        Self {
            name: name.into(),
            measured,
            bound,
            tolerance,
            pass,
            margin,
        }
    }

    /// Passes when `lo ≤ measured ≤ hi`; the margin is the distance to the
    /// nearer edge relative to the interval width.
    pub fn within(name: impl Into<String>, measured: f64, lo: f64, hi: f64) -> Self {
        let pass = measured.is_finite() && measured >= lo && measured <= hi;
        let width = (hi - lo).abs().max(f64::MIN_POSITIVE);
        Self {
            name: name.into(),
            measured,
            bound: hi,
            tolerance: 0.0,
            pass,
            margin: ((measured - lo).min(hi - measured)) / width,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check_id: String,
    pub inputs: BTreeMap<String, serde_json::Value>,
    pub measured: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub pass: bool,
}

impl VerificationReport {
    pub fn new(check_id: impl Into<String>) -> Self {
        Self {
            check_id: check_id.into(),
            pass: true,
            ..Default::default()
        }
    }

    pub fn input(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.inputs
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        self
    }

    pub fn measure(&mut self, key: &str, value: f64) -> &mut Self {
        self.measured.insert(key.to_string(), value);
        self
    }

    pub fn push(&mut self, check: Check) -> &mut Self {
        self.pass &= check.pass;
        self.checks.push(check);
        self
    }

    pub fn note(&mut self, s: impl Into<String>) -> &mut Self {
        self.notes.push(s.into());
        self
    }

    pub fn min_margin(&self) -> f64 {
        self.checks.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min)
    }

    pub fn merge(&mut self, other: VerificationReport) {
        for c in other.checks {
            self.push(Check {
                name: format!("{}/{}", other.check_id, c.name),
                ..c
            });
        }
        for (k, v) in other.measured {
            self.measured.insert(format!("{}/{}", other.check_id, k), v);
        }
        for n in other.notes {
            self.notes.push(format!("{}: {}", other.check_id, n));
        }
    }

    /// One line per check, for terminal summaries.
    pub fn summary_lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "[{}] {}/{}: measured {:.6e} bound {:.6e} margin {:.3}",
                    if c.pass { "PASS" } else { "FAIL" },
                    self.check_id,
                    c.name,
                    c.measured,
                    c.bound,
                    c.margin
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_iff_within_tolerance() {
        assert!(Check::new("a", 1.0, 1.0, 0.0).pass);
        assert!(Check::new("a", 1.05, 1.0, 0.1).pass);
        assert!(!Check::new("a", 1.2, 1.0, 0.1).pass);
        assert!(!Check::new("a", f64::NAN, 1.0, 0.1).pass);
        let c = Check::new("z", 0.0, 0.0, 0.0);
        assert!(c.pass && c.margin.is_infinite());
    }

    #[test]
    fn report_pass_is_conjunction() {
        let mut r = VerificationReport::new("x");
        r.push(Check::new("ok", 0.5, 1.0, 0.0));
        assert!(r.pass);
        r.push(Check::within("slope", 1.3, 0.8, 1.2));
        assert!(!r.pass);
    }
}

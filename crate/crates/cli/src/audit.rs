//! Audit configs: a versioned TOML file listing checks to run against
//! noise parameters, recorded traces, and scenario walkthroughs. Checks
//! compute exact quantities (no sampling) and compare against declared
//! privacy targets; walkthroughs re-run scenario files with noise
//! disabled and compare artifacts line by line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use sandbox_measure::aggregation::NoisePolicy;
use sandbox_measure::audit::{audit_rollout, audit_tdlap};
use sandbox_measure::noise::{compute_tau, tdlap_tail, DLap};
use sandbox_measure::summary::Trace;

use crate::runner::{run_scenario, RunArtifacts};
use crate::scenario::Scenario;
use crate::CliError;

pub const AUDIT_FORMAT: &str = "sandbox-measure-audit/v1";
pub const AUDIT_REPORT_HEADER: &str = "sandbox-measure-audit-report v1";

/// Tolerance added to exact-divergence comparisons: the arithmetic is
/// deterministic but still floating point.
const FLOAT_SLACK: f64 = 1e-12;
const DEFAULT_CELL_LIMIT: u128 = 20_000_000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAuditConfig {
    format: String,
    #[serde(default)]
    checks: Vec<RawCheck>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheck {
    kind: String,
    name: String,
    // tdlap / tail
    a1: Option<u64>,
    a0: Option<u64>,
    eps: Option<f64>,
    delta: Option<f64>,
    tau: Option<u64>,
    shift: Option<Vec<i64>>,
    contributions: Option<u64>,
    cell_limit: Option<u128>,
    // rollout
    trace: Option<String>,
    slack: Option<f64>,
    // walkthrough
    scenario: Option<String>,
    expect_reports: Option<Vec<String>>,
    expect_transcript: Option<Vec<String>>,
}

#[derive(Debug)]
pub struct AuditOutcome {
    /// One rendered line per check, pass or fail.
    pub lines: Vec<String>,
    pub failed: usize,
}

impl AuditOutcome {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }

    pub fn report_text(&self) -> String {
        let mut out = format!("{AUDIT_REPORT_HEADER}\n");
        for line in &self.lines {
            writeln!(out, "{line}").unwrap();
        }
        writeln!(out, "summary checks={} failed={}", self.lines.len(), self.failed).unwrap();
        out
    }

    /// Name of the first failing check, for the error message.
    pub fn first_failure(&self) -> Option<&str> {
        self.lines
            .iter()
            .find(|l| l.starts_with("FAIL "))
            .and_then(|l| l.split_whitespace().nth(1))
    }
}

fn need<T: Copy>(v: Option<T>, field: &str, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Schema(format!("check {name:?}: missing {field}")))
}

struct CheckResult {
    ok: bool,
    detail: String,
}

/// One noise-level divergence check: per-coordinate discrete Laplace with
/// scale eps/a1, truncation from the threshold rule, and an explicit
/// per-record contribution shift. Passes when the exact divergence at eps
/// stays within delta.
fn check_tdlap(c: &RawCheck) -> Result<CheckResult, CliError> {
    let a1 = need(c.a1, "a1", &c.name)?;
    let a0 = need(c.a0, "a0", &c.name)?;
    let eps = need(c.eps, "eps", &c.name)?;
    let delta = need(c.delta, "delta", &c.name)?;
    let shift = c
        .shift
        .clone()
        .ok_or_else(|| CliError::Schema(format!("check {:?}: missing shift", c.name)))?;
    let tau = match c.tau {
        Some(t) => Some(t),
        None => compute_tau(a1, a0, eps, delta)
            .map_err(|e| CliError::Schema(format!("check {:?}: {e}", c.name)))?,
    };
    let a = eps / a1 as f64;
    let div = audit_tdlap(a, tau, &shift, eps, c.cell_limit.unwrap_or(DEFAULT_CELL_LIMIT))
        .map_err(|e| CliError::Schema(format!("check {:?}: {e}", c.name)))?;
    Ok(CheckResult {
        ok: div <= delta + FLOAT_SLACK,
        detail: format!(
            "divergence={div:.3e} delta={delta:.3e} tau={}",
            tau.map_or("none".into(), |t| t.to_string())
        ),
    })
}

/// Threshold-tail check: the probability that truncated noise pushes a
/// single record's contributions past the release threshold must stay
/// within delta.
fn check_tail(c: &RawCheck) -> Result<CheckResult, CliError> {
    let a1 = need(c.a1, "a1", &c.name)?;
    let a0 = need(c.a0, "a0", &c.name)?;
    let eps = need(c.eps, "eps", &c.name)?;
    let delta = need(c.delta, "delta", &c.name)?;
    let contributions = need(c.contributions, "contributions", &c.name)?;
    let schema = |e: sandbox_measure::noise::NoiseError| {
        CliError::Schema(format!("check {:?}: {e}", c.name))
    };
    let tau = match c.tau {
        Some(t) => Some(t),
        None => compute_tau(a1, a0, eps, delta).map_err(schema)?,
    };
    let Some(tau) = tau else {
        return Err(CliError::Schema(format!(
            "check {:?}: delta = 0 disables thresholding; nothing to bound",
            c.name
        )));
    };
    let dist = DLap::truncated(eps / a1 as f64, tau).map_err(schema)?;
    let tail = tdlap_tail(&dist, contributions).map_err(schema)?;
    Ok(CheckResult {
        ok: tail <= delta + FLOAT_SLACK,
        detail: format!("tail={tail:.3e} delta={delta:.3e} tau={tau}"),
    })
}

fn check_rollout(c: &RawCheck, base: &Path) -> Result<CheckResult, CliError> {
    let rel = c
        .trace
        .as_deref()
        .ok_or_else(|| CliError::Schema(format!("check {:?}: missing trace", c.name)))?;
    let path = base.join(rel);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let trace = Trace::parse(&text)
        .map_err(|e| CliError::Schema(format!("check {:?}: {e}", c.name)))?;
    let violations = audit_rollout(&trace, c.slack.unwrap_or(FLOAT_SLACK));
    Ok(CheckResult {
        ok: violations.is_empty(),
        detail: match violations.first() {
            None => format!("units={} all within caps", trace.units().len()),
            Some(v) => format!(
                "unit={} eps={:.6} delta={:.6} over caps ({} violations)",
                v.unit,
                v.eps,
                v.delta,
                violations.len()
            ),
        },
    })
}

fn body_lines(artifact: &str) -> Vec<&str> {
    // First line is the format header; the expectations cover the body.
    artifact.lines().skip(1).collect()
}

fn match_lines(kind: &str, got: &str, want: &[String]) -> Option<String> {
    let got = body_lines(got);
    if got.len() != want.len() {
        return Some(format!(
            "{kind}: expected {} lines, got {}",
            want.len(),
            got.len()
        ));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        // Substring matching, so expectations can pin keys and values
        // without repeating seed-dependent report ids.
        if !g.contains(w.as_str()) {
            return Some(format!("{kind} line {i}: {g:?} does not contain {w:?}"));
        }
    }
    None
}

/// Re-run a scenario deterministically (noise off, truthful reporting,
/// fresh ledger) and compare its artifacts against expected lines.
fn check_walkthrough(c: &RawCheck, base: &Path) -> Result<CheckResult, CliError> {
    let rel = c
        .scenario
        .as_deref()
        .ok_or_else(|| CliError::Schema(format!("check {:?}: missing scenario", c.name)))?;
    let path = base.join(rel);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let scenario = Scenario::parse(&text)
        .map_err(|e| CliError::Schema(format!("check {:?}: {e}", c.name)))?;
    let artifacts: RunArtifacts = run_scenario(&scenario, NoisePolicy::Disabled, None, None)?;

    let expect_reports = c.expect_reports.clone().unwrap_or_default();
    let mut mismatch = match_lines("reports", &artifacts.reports, &expect_reports);
    if mismatch.is_none() {
        if let Some(want) = &c.expect_transcript {
            mismatch = match_lines("transcript", &artifacts.transcript, want);
        }
    }
    Ok(CheckResult {
        ok: mismatch.is_none(),
        detail: mismatch.unwrap_or_else(|| {
            format!(
                "reports={} transcript_lines={}",
                expect_reports.len(),
                body_lines(&artifacts.transcript).len()
            )
        }),
    })
}

/// Run every check in an audit config. Paths inside the config resolve
/// relative to the config file's directory.
pub fn run_audit_file(config_path: &Path) -> Result<AuditOutcome, CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", config_path.display())))?;
    let raw: RawAuditConfig =
        toml::from_str(&text).map_err(|e| CliError::Schema(format!("audit config: {e}")))?;
    if raw.format != AUDIT_FORMAT {
        return Err(CliError::Schema(format!(
            "unsupported format {:?}; this build reads {AUDIT_FORMAT:?}",
            raw.format
        )));
    }
    let base: PathBuf = config_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();

    let mut lines = Vec::new();
    let mut failed = 0usize;
    for c in &raw.checks {
        let result = match c.kind.as_str() {
            "tdlap" => check_tdlap(c)?,
            "tail" => check_tail(c)?,
            "rollout" => check_rollout(c, &base)?,
            "walkthrough" => check_walkthrough(c, &base)?,
            other => {
                return Err(CliError::Schema(format!(
                    "check {:?}: kind must be tdlap, tail, rollout, or walkthrough, got {other:?}",
                    c.name
                )))
            }
        };
        let status = if result.ok { "ok" } else { "FAIL" };
        if !result.ok {
            failed += 1;
        }
        lines.push(format!("{status} {} kind={} {}", c.name, c.kind, result.detail));
    }
    Ok(AuditOutcome { lines, failed })
}

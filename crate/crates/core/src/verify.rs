//! Verification harness: statistical one-sided tests, deterministic
//! certificates, and convergence trend tests, aggregated with reproducible
//! per-check seeds.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("statistical test underpowered: n = {0} < 30")]
    Underpowered(u64),
    #[error("trend test needs at least 3 values, got {0}")]
    TooFewValues(usize),
    #[error("unknown check id `{0}`")]
    UnknownCheck(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CheckKind {
    Deterministic,
    Statistical,
    Trend,
}

/// One verified claim, with enough context to reproduce it.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub check_id: String,
    pub kind: CheckKind,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub seed: u64,
    pub provenance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckResult {
    pub fn deterministic(id: &str, statistic: f64, threshold: f64, seed: u64, prov: &str) -> Self {
        CheckResult {
            check_id: id.into(),
            kind: CheckKind::Deterministic,
            statistic,
            threshold,
            pass: statistic <= threshold,
            seed,
            provenance: prov.into(),
            stderr: None,
            n: None,
            note: None,
        }
    }
}

/// One-sided mean test: pass iff mean <= bound + 3 stderr + slack (ties pass).
pub fn one_sided_bound_test(
    id: &str,
    est: &crate::value::Estimate,
    bound: f64,
    slack: f64,
    seed: u64,
    prov: &str,
) -> Result<CheckResult, VerifyError> {
    if est.n_paths < 30 {
        return Err(VerifyError::Underpowered(est.n_paths));
    }
    let threshold = bound + 3.0 * est.stderr + slack;
    Ok(CheckResult {
        check_id: id.into(),
        kind: CheckKind::Statistical,
        statistic: est.mean,
        threshold,
        pass: est.mean <= threshold,
        seed,
        provenance: prov.into(),
        stderr: Some(est.stderr),
        n: Some(est.n_paths),
        note: None,
    })
}

/// Decreasing-trend test: counts adjacent increases beyond one combined
/// standard error; passes when at most `allowed_inversions` occur.
pub fn trend_test(
    id: &str,
    values: &[f64],
    stderrs: &[f64],
    allowed_inversions: usize,
    seed: u64,
    prov: &str,
) -> Result<CheckResult, VerifyError> {
    if values.len() < 3 {
        return Err(VerifyError::TooFewValues(values.len()));
    }
    let mut inversions = 0usize;
    for i in 0..values.len() - 1 {
        let se = (stderrs[i] * stderrs[i] + stderrs[i + 1] * stderrs[i + 1]).sqrt();
        if values[i + 1] > values[i] + se {
            inversions += 1;
        }
    }
    Ok(CheckResult {
        check_id: id.into(),
        kind: CheckKind::Trend,
        statistic: inversions as f64,
        threshold: allowed_inversions as f64,
        pass: inversions <= allowed_inversions,
        seed,
        provenance: prov.into(),
        stderr: None,
        n: Some(values.len() as u64),
        note: Some(format!("values {values:?}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Estimate;

    fn est(mean: f64, stderr: f64) -> Estimate {
        Estimate { mean, stderr, n_paths: 1000, bias_bound: 0.0 }
    }

    #[test]
    fn one_sided_examples() {
        let r = one_sided_bound_test("t", &est(0.5, 0.01), 1.0, 0.0, 0, "p").unwrap();
        assert!(r.pass);
        let r = one_sided_bound_test("t", &est(1.2, 0.01), 1.0, 0.05, 0, "p").unwrap();
        assert!(!r.pass);
        // boundary case: mean == bound + 3 se exactly passes (closed inequality)
        let r = one_sided_bound_test("t", &est(1.03, 0.01), 1.0, 0.0, 0, "p").unwrap();
        assert!(r.pass);
        // underpowered
        let small = Estimate { mean: 0.0, stderr: 0.0, n_paths: 10, bias_bound: 0.0 };
        assert!(one_sided_bound_test("t", &small, 1.0, 0.0, 0, "p").is_err());
    }

    #[test]
    fn trend_examples() {
        let r = trend_test("t", &[0.3, 0.2, 0.1], &[0.0; 3], 0, 0, "p").unwrap();
        assert!(r.pass);
        let r = trend_test("t", &[0.3, 0.35, 0.1], &[0.01; 3], 0, 0, "p").unwrap();
        assert!(!r.pass);
        // inversion within noise is tolerated
        let r = trend_test("t", &[0.3, 0.301, 0.1], &[0.005; 3], 0, 0, "p").unwrap();
        assert!(r.pass);
        assert!(trend_test("t", &[0.3, 0.2], &[0.0; 2], 0, 0, "p").is_err());
    }
}

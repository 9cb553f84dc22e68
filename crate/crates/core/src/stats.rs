//! McNemar's test for paired classifier outcomes.

use statrs::function::erf::erfc;

use crate::error::{arg_err, Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Paired outcomes: `a` both right, `b` only the first model right,
/// `c` only the second model right, `d` both wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub chi2: f64,
    pub p: f64,
    pub alpha: f64,
    pub reject: bool,
}

impl TestResult {
    /// `chi2,p,reject` with three decimals and a two-figure truncated p-value.
    pub fn to_csv_row(&self) -> String {
        format!("{:.3},{},{}", self.chi2, format_sci(self.p, 1), self.reject)
    }
}

/// Scientific notation with the mantissa truncated (not rounded) to `decimals`
/// decimals and a signed exponent of at least two digits, e.g. `1.9e-02` for
/// 0.01963.
pub fn format_sci(x: f64, decimals: usize) -> String {
    let raw = format!("{x:.15e}");
    let (mantissa, exp) = raw.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let point = mantissa.find('.').unwrap_or(mantissa.len());
    let keep = if decimals == 0 { point } else { point + 1 + decimals };
    let mantissa = &mantissa[..keep.min(mantissa.len())];
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1dof(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

/// Continuity-corrected statistic `max(|b - c| - 1, 0)² / (b + c)` and its p-value.
pub fn mcnemar(t: &ContingencyTable) -> Result<TestResult> {
    mcnemar_with_alpha(t, DEFAULT_ALPHA)
}

pub fn mcnemar_with_alpha(t: &ContingencyTable, alpha: f64) -> Result<TestResult> {
    if t.b + t.c == 0 {
        return arg_err("McNemar's test is undefined without disagreements (b + c = 0)");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return arg_err(format!("significance level must lie in (0, 1), got {alpha}"));
    }
    let diff = (t.b as f64 - t.c as f64).abs();
    let chi2 = (diff - 1.0).max(0.0).powi(2) / (t.b + t.c) as f64;
    let p = chi2_sf_1dof(chi2);
    Ok(TestResult { chi2, p, alpha, reject: p < alpha })
}

/// Reads tables from CSV with an `a,b,c,d` header.
pub fn read_tables_csv(text: &str) -> Result<Vec<ContingencyTable>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("missing column {name:?}")))
    };
    let idx = [column("a")?, column("b")?, column("c")?, column("d")?];
    let mut out = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let mut v = [0u64; 4];
        for (slot, &i) in v.iter_mut().zip(&idx) {
            *slot = rec
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("row {}: counts must be non-negative integers", n + 1)))?;
        }
        out.push(ContingencyTable { a: v[0], b: v[1], c: v[2], d: v[3] });
    }
    Ok(out)
}

use std::fmt::Write as _;
use std::path::Path;

use super::write_bytes;
use crate::analysis::StatsReport;
use crate::error::Result;

/// C's `%.10g`: ten significant digits, trailing zeros trimmed, exponent
/// form below 1e-4 or from 1e10 upward.
pub fn format_g(x: f64) -> String {
    const PRECISION: i32 = 10;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PRECISION).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn escape(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// A header row plus string cells; numbers go through [`format_g`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let line: Vec<String> = row.iter().map(|c| escape(c)).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), self.render().as_bytes())
    }
}

/// Long-format CSV of a report: one row per metadata entry and per value.
pub fn stats_csv(report: &StatsReport) -> CsvTable {
    let mut t = CsvTable::new(["kind", "name", "producer", "index", "value"]);
    for (k, v) in &report.metadata {
        t.push(["meta", k.as_str(), "", "", v.as_str()]);
    }
    for s in &report.statistics {
        for (i, &v) in s.values.iter().enumerate() {
            t.push([
                "stat".to_string(),
                s.name.clone(),
                s.producer.to_string(),
                i.to_string(),
                format_g(v),
            ]);
        }
    }
    t
}

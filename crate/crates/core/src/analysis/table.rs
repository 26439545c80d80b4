//! The error table: counts and shares of every DoH outcome.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::campaign::MeasurementRecord;
use crate::transport::ErrorClass;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub label: String,
    pub class: Option<ErrorClass>,
    pub count: u64,
    pub percent: f64,
    pub display: String,
}

/// Error rows by descending count, then the success and all-errors rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorTable {
    pub errors: Vec<ErrorRow>,
    pub successes: u64,
    pub all_errors: u64,
    pub total: u64,
}

/// Share of `count` in `total` to one decimal place, with a trailing ".0"
/// dropped ("7%"). Non-zero shares that round to 0.0 print as "<1%".
pub fn format_percent(count: u64, total: u64) -> String {
    if total == 0 {
        return "0%".into();
    }
    // Round half up on exact integers.
    let tenths = (count as u128 * 2000 + total as u128) / (2 * total as u128);
    if tenths == 0 && count > 0 {
        return "<1%".into();
    }
    if tenths.is_multiple_of(10) {
        format!("{}%", tenths / 10)
    } else {
        format!("{}.{}%", tenths / 10, tenths % 10)
    }
}

/// `531528` → `531,528`.
pub fn format_count(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn percent(count: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 * 100.0 / total as f64
    }
}

/// Tallies DoH outcomes; ping records are ignored.
pub fn error_table(records: &[MeasurementRecord]) -> ErrorTable {
    ErrorTable::from_records(records)
}

impl ErrorTable {
    /// Like [`error_table`] over any record stream.
    pub fn from_records<I, R>(records: I) -> ErrorTable
    where
        I: IntoIterator<Item = R>,
        R: Borrow<MeasurementRecord>,
    {
        let mut counts: BTreeMap<ErrorClass, u64> = BTreeMap::new();
        for r in records {
            let r = r.borrow();
            if r.is_doh() {
                *counts.entry(r.outcome).or_default() += 1;
            }
        }
        ErrorTable::from_counts(&counts)
    }

    pub fn from_counts(counts: &BTreeMap<ErrorClass, u64>) -> ErrorTable {
        let successes = counts.get(&ErrorClass::Success).copied().unwrap_or(0);
        let total: u64 = counts.values().sum();
        let mut errors: Vec<ErrorRow> = counts
            .iter()
            .filter(|(c, n)| !c.is_success() && **n > 0)
            .map(|(c, n)| ErrorRow {
                label: c.label().to_string(),
                class: Some(*c),
                count: *n,
                percent: percent(*n, total),
                display: format_percent(*n, total),
            })
            .collect();
        errors.sort_by(|a, b| b.count.cmp(&a.count).then(a.class.cmp(&b.class)));
        ErrorTable {
            errors,
            successes,
            all_errors: total - successes,
            total,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn success_row(&self) -> ErrorRow {
        ErrorRow {
            label: ErrorClass::Success.label().into(),
            class: Some(ErrorClass::Success),
            count: self.successes,
            percent: percent(self.successes, self.total),
            display: format_percent(self.successes, self.total),
        }
    }

    pub fn all_errors_row(&self) -> ErrorRow {
        ErrorRow {
            label: "All Errors".into(),
            class: None,
            count: self.all_errors,
            percent: percent(self.all_errors, self.total),
            display: format_percent(self.all_errors, self.total),
        }
    }

    /// Every row in print order; empty for an empty table.
    pub fn rows(&self) -> Vec<ErrorRow> {
        if self.is_empty() {
            return Vec::new();
        }
        let mut rows = self.errors.clone();
        rows.push(self.success_row());
        rows.push(self.all_errors_row());
        rows
    }

    /// Aligned plain-text rendering.
    pub fn render(&self) -> String {
        let rows = self.rows();
        let head = ("Error", "Count", "% of All Responses");
        let w0 = rows.iter().map(|r| r.label.len()).chain([head.0.len()]).max().unwrap();
        let w1 = rows
            .iter()
            .map(|r| format_count(r.count).len())
            .chain([head.1.len()])
            .max()
            .unwrap();
        let w2 = head.2.len();
        let mut out = String::new();
        let rule = "-".repeat(w0 + w1 + w2 + 4);
        writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", head.0, head.1, head.2).unwrap();
        writeln!(out, "{rule}").unwrap();
        for (i, r) in rows.iter().enumerate() {
            if i == self.errors.len() {
                writeln!(out, "{rule}").unwrap();
            }
            writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", r.label, format_count(r.count), r.display).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["outcome", "label", "count", "percent", "display"]).unwrap();
        for r in self.rows() {
            let outcome = r.class.map_or("AllErrors".to_string(), |c| c.to_string());
            w.write_record([
                outcome,
                r.label,
                r.count.to_string(),
                format!("{:.4}", r.percent),
                r.display,
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

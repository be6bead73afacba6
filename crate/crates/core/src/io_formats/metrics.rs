use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// One row of a metrics log; column order follows insertion order.
pub type MetricRecord = IndexMap<String, f64>;

/// Formats `v` like C's `%.{sig}g`: `sig` significant digits, trailing zeros
/// dropped, scientific notation for very small or large magnitudes.
pub fn format_sig(v: f64, sig: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Renders records as CSV text: a header row taken from the first record,
/// then one line per record with 9 significant digits.
pub fn metrics_to_string(records: &[MetricRecord]) -> Result<String> {
    let Some(first) = records.first() else {
        return Ok("\n".into());
    };
    let keys: Vec<&String> = first.keys().collect();
    let mut out = keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != keys.len() {
            return Err(Error::Schema { record: i });
        }
        let mut row = Vec::with_capacity(keys.len());
        for k in &keys {
            let v = rec.get(*k).ok_or(Error::Schema { record: i })?;
            row.push(format_sig(*v, 9));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_metrics(records: &[MetricRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = metrics_to_string(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Shared helpers for the line-oriented text formats and CSV emission.
//!
//! Floats are written with 17 significant digits so every round trip is
//! value-exact; files use `\n` line endings and `.` decimal separators.

use crate::{Error, Result};

/// Formats a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "nan" => Ok(f64::NAN),
        _ => s
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad float: {s:?}"))),
    }
}

pub fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::Parse(format!("bad integer: {s:?}")))
}

/// Splits a header line and checks the leading magic + version tokens.
pub fn expect_header<'a>(line: &'a str, magic: &str) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 || fields[0] != magic || fields[1] != "v1" {
        return Err(Error::Parse(format!(
            "expected `{magic} v1` header, got {line:?}"
        )));
    }
    Ok(fields[2..].to_vec())
}

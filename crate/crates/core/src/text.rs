//! Plain-text matrix I/O for the command line.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Formats like C's `%.{digits}g`: `digits` significant figures, trailing
/// zeros dropped, scientific notation outside `1e-4 ≤ |x| < 10^digits`.
pub fn format_significant(x: f64, digits: usize) -> String {
    assert!(digits >= 1);
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    // The exponent after rounding to `digits` figures decides the style.
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp) as usize;
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

/// Parses comma-separated rows of numbers. Blank lines are skipped; every
/// row must have the same width.
pub fn parse_csv_matrix(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::Input(format!(
                        "line {}: not a number: {:?}",
                        line_no + 1,
                        field.trim()
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Input(format!(
                    "line {}: {} fields, expected {}",
                    line_no + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Input("no rows".into()));
    }
    Ok(Matrix::from_rows(&rows))
}

/// One CSV line per row, entries in `%.9g` form.
pub fn render_csv_matrix(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&v| format_significant(v, 9)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

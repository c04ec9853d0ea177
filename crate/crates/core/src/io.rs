//! Plain-text number formatting and small file helpers shared by reports.

use std::path::Path;

use crate::error::Result;

/// Number formatting for CSV output: rounded to 15 significant digits,
/// shortest form that round-trips, -0 printed as 0.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r: f64 = format!("{v:.14e}").parse().unwrap_or(v);
    if r == 0.0 {
        return "0".into();
    }
    let a = r.abs();
    if (1e-5..1e15).contains(&a) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

/// Joins values into one CSV row.
pub fn csv_row(vals: &[f64]) -> String {
    vals.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>().join(",")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Formats a float with 17 significant digits, enough for a lossless
/// round-trip through `str::parse::<f64>`.
pub fn format_float(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.16e}")
    } else {
        value.to_string()
    }
}

/// Formats an optional float; `None` becomes an empty CSV field.
pub(crate) fn format_opt(value: Option<f64>) -> String {
    value.map(format_float).unwrap_or_default()
}

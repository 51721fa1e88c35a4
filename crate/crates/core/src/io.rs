//! Output formatting shared by the CSV exporters.

/// Scientific notation with 17 significant digits; round-trips every f64.
pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Joins already-formatted fields into one CSV row.
pub fn row<I: IntoIterator<Item = String>>(fields: I) -> String {
    fields.into_iter().collect::<Vec<_>>().join(",")
}

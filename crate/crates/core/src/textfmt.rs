//! Text encoding of floats shared by every file writer.
//!
//! Values are written with the shortest decimal digits that parse back to the
//! same binary64 value, so every text artifact round-trips bit-exactly.

/// Shortest round-trip decimal form of `x`.
///
/// Plain notation in the "human" range, exponent notation outside it to keep
/// tiny and huge magnitudes compact. Both forms parse back exactly.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-5..1e16).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:?}")
    }
}

/// Fixed two-decimal percent cell, as used in the report tables.
pub fn format_pct(x: f64) -> String {
    format!("{x:.2}")
}

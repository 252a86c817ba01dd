//! Number formatting shared by the CSV writers and the command line.

/// Formats `x` with `digits` significant digits, in fixed notation when the
/// decimal exponent lies in `[-5, digits)` and in scientific notation otherwise.
pub fn sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return format!("{:.*}", digits.saturating_sub(1), 0.0);
    }
    let digits = digits.max(1);
    // The exponent after rounding to `digits` places, taken from the formatter itself.
    let sci = format!("{:.*e}", digits - 1, x);
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if exp < -5 || exp >= digits as i32 {
        sci
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{:.*}", decimals, x)
    }
}

/// 17 significant digits: enough to round-trip an `f64`.
pub fn machine(x: f64) -> String {
    sig(x, 17)
}

/// 6 significant digits for human-readable tables.
pub fn human(x: f64) -> String {
    sig(x, 6)
}

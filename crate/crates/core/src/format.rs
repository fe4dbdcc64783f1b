//! Text formatting shared by every CSV writer.

/// Formats `v` with 9 significant digits, `%.9g` style: fixed notation for
/// decimal exponents in `[-5, 9)`, scientific otherwise, trailing zeros trimmed.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[cfg(test)]
mod tests {
    use super::sig9;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(118.41), "118.41");
        assert_eq!(sig9(-2.5), "-2.5");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(123456789.4), "123456789");
        assert_eq!(sig9(1234567894.0), "1.23456789e9");
        assert_eq!(sig9(9.9999999996), "10");
        assert_eq!(sig9(1.5e-7), "1.5e-7");
        assert_eq!(sig9(0.000123456789123), "0.000123456789");
    }

    #[test]
    fn round_trips_to_nine_digits() {
        for &v in &[
            std::f64::consts::PI,
            -0.001234567891,
            98765.4321987,
            6.02214076e23,
        ] {
            let back: f64 = sig9(v).parse().unwrap();
            assert!(((back - v) / v).abs() < 5e-9, "{v} -> {}", sig9(v));
        }
    }
}

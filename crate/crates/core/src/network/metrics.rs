use std::fmt::Write as _;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_err,test_loss,test_err,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with the fixed header; every real formatted by [`format_g9`].
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                format_g9(r.train_loss),
                format_g9(r.train_err),
                format_g9(r.test_loss),
                format_g9(r.test_err),
                format_g9(r.seconds)
            );
        }
        s
    }
}

/// `printf("%.9g")`: nine significant digits, trailing zeros dropped,
/// exponent form outside `[1e-5, 1e9)`.
pub fn format_g9(v: f64) -> String {
    const P: i32 = 9;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    // Rounding to P digits first fixes the exponent (e.g. 9.999999999 → 10).
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (P - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        // Expected strings from C printf("%.9g").
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (1234.56789012, "1234.56789"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-0.5, "-0.5"),
            (9.9999999999, "10"),
            (1e100, "1e+100"),
        ];
        for (v, want) in cases {
            assert_eq!(format_g9(v), want, "{v}");
        }
    }

    #[test]
    fn empty_metrics_is_header_only() {
        assert_eq!(Metrics::default().to_csv(), format!("{METRICS_HEADER}\n"));
    }
}

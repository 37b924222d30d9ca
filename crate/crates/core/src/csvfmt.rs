//! Small helpers shared by the CSV writers.
//!
//! Reals are written with 17 significant digits so that every `f64`
//! survives a write/read round trip exactly.

use crate::error::{Error, Result};

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_real(field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad real `{field}`")))
}

pub fn parse_int<T: std::str::FromStr>(field: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad integer `{field}`")))
}

/// Split a data line into exactly `n` comma-separated fields.
pub fn fields(line: &str, n: usize) -> Result<Vec<&str>> {
    let out: Vec<&str> = line.split(',').collect();
    if out.len() != n {
        return Err(Error::Format(format!(
            "expected {n} fields, got {} in `{line}`",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn reals_round_trip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            prop_assert_eq!(parse_real(&fmt_real(x)).unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn field_count_checked() {
        assert_eq!(fields("a,b", 2).unwrap(), vec!["a", "b"]);
        assert!(fields("a,b", 3).is_err());
    }
}

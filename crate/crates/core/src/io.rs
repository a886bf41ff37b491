//! Text and binary encodings shared by the serializable types.
//!
//! Floats are written with 17 significant digits so every value survives a
//! text round trip bit-exactly.

use std::io::{BufRead, Read, Write};

use crate::scalar::{lit, Scalar};
use crate::{Error, Result};

/// `{:.16e}` of the value widened to `f64`; non-finite values print as
/// `NaN`, `inf`, `-inf`.
pub fn fmt_float<F: Scalar>(v: F) -> String {
    let v = v.to_f64_lossy();
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn parse_float<F: Scalar>(s: &str) -> Result<F> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse(format!("invalid number {s:?}")))?;
    Ok(lit(v))
}

pub fn parse_index(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Parse(format!("invalid index {s:?}")))
}

/// Reads a headered CSV, checks the header, and returns the data rows split
/// on commas.
pub fn read_csv_rows<R: BufRead>(input: R, header: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Parse("empty CSV input".into()))??;
    if first.trim() != header {
        return Err(Error::Parse(format!("expected CSV header {header:?}, found {first:?}")));
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != width {
            return Err(Error::Parse(format!("CSV row {} has {} fields, expected {width}", n + 2, fields.len())));
        }
        rows.push(fields);
    }
    Ok(rows)
}

pub(crate) fn write_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(out: &mut W, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64<W: Write>(out: &mut W, v: f64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn float_text_round_trip(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let back: f64 = parse_float(&fmt_float(v)).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }

        #[test]
        fn f32_text_round_trip(bits in any::<u32>()) {
            let v = f32::from_bits(bits);
            prop_assume!(v.is_finite());
            let back: f32 = parse_float(&fmt_float(v)).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn csv_header_mismatch_is_rejected() {
        let data = "a,b\n1,2\n";
        assert!(read_csv_rows(data.as_bytes(), "a,c").is_err());
        assert_eq!(read_csv_rows(data.as_bytes(), "a,b").unwrap(), vec![vec!["1".to_string(), "2".to_string()]]);
        assert!(read_csv_rows("a,b\n1\n".as_bytes(), "a,b").is_err());
    }
}

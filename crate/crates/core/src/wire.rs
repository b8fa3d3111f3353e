//! Canonical message encoding: deterministic JSON with sorted keys and
//! fixed-width float rendering, plus the length-prefixed TCP framing.
//!
//! Floats are rendered with 17 significant digits on the wire so that every
//! `f64` round-trips bit-exactly across transports, and rounded to 12
//! significant digits for transcript comparison so that last-ulp differences
//! in arithmetic ordering do not count as distinguishable.

use std::io::{Read, Write};

use serde_json::Value;

use crate::error::{Error, Result};

/// Significant digits used on the wire (lossless for `f64`).
pub const WIRE_DIGITS: usize = 17;
/// Significant digits used when comparing transcripts.
pub const COMPARE_DIGITS: usize = 12;

fn format_number(v: &serde_json::Number, digits: usize) -> Result<String> {
    if let Some(i) = v.as_i64() {
        return Ok(i.to_string());
    }
    if let Some(u) = v.as_u64() {
        return Ok(u.to_string());
    }
    let f = v.as_f64().ok_or(Error::NonFinite("message field"))?;
    if !f.is_finite() {
        return Err(Error::NonFinite("message field"));
    }
    // normalize the sign of zero so equal values render identically
    let f = if f == 0.0 { 0.0 } else { f };
    Ok(format!("{:.*e}", digits - 1, f))
}

fn render(value: &Value, digits: usize, out: &mut String) -> Result<()> {
    match value {
        // canonical messages carry no optional fields; a null here is a
        // non-finite float that serde mapped away
        Value::Null => return Err(Error::NonFinite("message field")),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&format_number(n, digits)?),
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s)?);
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                render(item, digits, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key)?);
                out.push(':');
                render(&map[*key], digits, out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

/// Canonical wire rendering of any serializable value.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    render(&v, WIRE_DIGITS, &mut out)?;
    Ok(out)
}

/// Comparison rendering: identical to the wire format except numbers are
/// rounded to 12 significant digits.
pub fn comparison_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    render(&v, COMPARE_DIGITS, &mut out)?;
    Ok(out)
}

/// Writes one length-prefixed frame: 4-byte big-endian length, then UTF-8
/// JSON.
pub fn write_frame<W: Write>(w: &mut W, payload: &str) -> Result<()> {
    let bytes = payload.as_bytes();
    let len = u32::try_from(bytes.len())
        .map_err(|_| Error::Protocol("frame exceeds u32 length".into()))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one length-prefixed frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<String> {
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > 64 << 20 {
        return Err(Error::Protocol(format!("frame of {len} bytes is too large")));
    }
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)?;
    String::from_utf8(data).map_err(|e| Error::Protocol(format!("invalid utf-8 frame: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn wire_rendering_roundtrips_floats() {
        for &x in &[0.1, -3.5e-7, 1.0 / 3.0, 12345.678901234567, f64::MIN_POSITIVE] {
            let s = canonical_json(&x).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s} did not round-trip");
        }
    }

    #[test]
    fn zero_sign_is_normalized() {
        let pos = canonical_json(&0.0f64).unwrap();
        let neg = canonical_json(&(-0.0f64)).unwrap();
        assert_eq!(pos, neg);
    }

    #[test]
    fn keys_are_sorted() {
        let v = json!({"zeta": 1, "alpha": 2, "mid": {"b": 1, "a": 2}});
        let s = canonical_json(&v).unwrap();
        assert_eq!(s, r#"{"alpha":2,"mid":{"a":2,"b":1},"zeta":1}"#);
    }

    #[test]
    fn comparison_rounds_away_ulp_noise() {
        let a: f64 = 0.1 + 0.2;
        let b: f64 = 0.3;
        assert_ne!(a.to_bits(), b.to_bits());
        assert_ne!(canonical_json(&a).unwrap(), canonical_json(&b).unwrap());
        assert_eq!(comparison_json(&a).unwrap(), comparison_json(&b).unwrap());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(canonical_json(&f64::NAN).is_err());
        assert!(canonical_json(&f64::INFINITY).is_err());
    }

    #[test]
    fn frames_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, "hello").unwrap();
        write_frame(&mut buf, r#"{"a":1}"#).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cursor).unwrap(), "hello");
        assert_eq!(read_frame(&mut cursor).unwrap(), r#"{"a":1}"#);
    }
}

//! Deterministic text output: 17 significant digits for every float.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

use crate::error::{Error, Result};

/// Bumped whenever a record layout changes.
pub const FORMAT_VERSION: u32 = 1;

/// Formats a float with 17 significant digits, e.g. `1.0000000000000000e0`.
///
/// Non-finite values print as `nan`, `inf` and `-inf`.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// Parses numbers written by [`fmt_num`].
pub fn parse_num(s: &str) -> Result<f64> {
    match s.trim() {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t.parse().map_err(|_| Error::Format(format!("not a number: `{t}`"))),
    }
}

struct FixedDigits;

impl Formatter for FixedDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            // JSON has no non-finite numbers
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// A JSON-lines record: format version, producing command and the resolved
/// settings, followed by the fields of `body`.
#[derive(Debug, Serialize)]
pub struct Record<'a, T: Serialize> {
    pub format_version: u32,
    pub command: &'a str,
    pub settings: &'a BTreeMap<String, String>,
    #[serde(flatten)]
    pub body: &'a T,
}

impl<'a, T: Serialize> Record<'a, T> {
    pub fn new(command: &'a str, settings: &'a BTreeMap<String, String>, body: &'a T) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            command,
            settings,
            body,
        }
    }
}

/// Serializes `value` as a single JSON line with fixed-precision floats.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, FixedDigits);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
}

/// Writes `value` followed by a newline.
pub fn write_json_line<W: Write, T: Serialize>(mut out: W, value: &T) -> Result<()> {
    writeln!(out, "{}", to_json_line(value)?)?;
    Ok(())
}

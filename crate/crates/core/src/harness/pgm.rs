//! Binary greyscale images (`P5`, 8-bit).

use crate::error::{Error, Result};

/// 8-bit greyscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parse a `P5` file with maxval 255. Comments are not accepted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<&[u8]> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::validation("PGM header is truncated"));
            }
            Ok(&bytes[start..pos])
        };
        if token()? != b"P5" {
            return Err(Error::validation("not a binary PGM (expected P5)"));
        }
        let mut num = |what: &str| -> Result<usize> {
            std::str::from_utf8(token()?)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::validation(format!("PGM {what} is not a number")))
        };
        let width = num("width")?;
        let height = num("height")?;
        if num("maxval")? != 255 {
            return Err(Error::validation("only 8-bit PGM (maxval 255) is supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let expected = width.checked_mul(height).ok_or_else(|| Error::validation("PGM size overflows"))?;
        if bytes.len() < start || bytes.len() - start != expected {
            return Err(Error::validation(format!(
                "PGM raster has {} bytes, expected {expected}",
                bytes.len().saturating_sub(start)
            )));
        }
        Ok(Pgm { width, height, pixels: bytes[start..].to_vec() })
    }
}

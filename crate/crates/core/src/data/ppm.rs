//! Binary PPM (P6, 8-bit) reading and writing.

use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

fn parse_err(offset: usize, detail: impl Into<String>) -> DataError {
    DataError::Parse {
        offset,
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a P6 image into `[3, H, W]` with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, DataError> {
    if !bytes.starts_with(b"P6") {
        return Err(parse_err(0, "missing P6 magic"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("max value")?;
    if w == 0 || h == 0 {
        return Err(parse_err(cur.pos, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(parse_err(cur.pos, format!("max value {maxval} unsupported (need 255)")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(cur.pos, "expected whitespace before pixel data"));
    }
    let start = cur.pos + 1;
    let need = 3 * w * h;
    let have = bytes.len() - start;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated pixel data: {have} of {need} bytes"),
        ));
    }
    let px = &bytes[start..start + need];
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        px[rest * 3 + c] as f64 / 255.0
    }))
}

/// Encodes `[3, H, W]` values in `[0, 1]` (clamped, rounded) as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, DataError> {
    let &[3, h, w] = image.shape() else {
        return Err(DataError::Invalid(format!("expected [3, H, W] image, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm(path: &Path) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        DataError::Parse { offset, detail } => DataError::Parse {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<(), DataError> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| DataError::io(path, e))
}

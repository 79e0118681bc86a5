//! Binary 8-bit PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// Header comment lines without the leading `#`.
    pub comments: Vec<String>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("PGM", reason)
}

impl Pgm {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "{height}×{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Pgm {
            width,
            height,
            pixels,
            comments: Vec::new(),
        })
    }

    /// Quantize values in `[0,1]` to `round(255·v)`. Accepts `[H,W]` or any
    /// shape with leading unit dimensions.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|d| *d != 1) {
            return Err(Error::shape(format!("expected a single plane, got {s:?}")));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        let pixels = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        Pgm::new(s[s.len() - 2], s[s.len() - 1], pixels)
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        Pgm {
            width: m.width(),
            height: m.height(),
            pixels: m.data().iter().map(|v| v * 255).collect(),
            comments: Vec::new(),
        }
    }

    pub fn with_comment(mut self, c: impl Into<String>) -> Self {
        self.comments.push(c.into());
        self
    }

    /// `[H,W]` tensor of `p / 255`.
    pub fn to_unit_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width],
            self.pixels.iter().map(|p| *p as f64 / 255.0).collect(),
        )
        .expect("sized")
    }

    /// Pixels `>= 128` are foreground.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.pixels.iter().map(|p| (*p >= 128) as u8).collect(),
        )
        .expect("sized")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"P5\n".to_vec();
        for c in &self.comments {
            for line in c.lines() {
                out.extend_from_slice(format!("# {line}\n").as_bytes());
            }
        }
        out.extend_from_slice(format!("{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(b"P5") {
            return Err(bad("missing P5 magic"));
        }
        let mut pos = 2;
        let mut comments = Vec::new();
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        let end = bytes[pos..]
                            .iter()
                            .position(|b| *b == b'\n')
                            .map_or(bytes.len(), |e| pos + e);
                        let text = String::from_utf8_lossy(&bytes[pos + 1..end]);
                        comments.push(text.strip_prefix(' ').unwrap_or(&text).to_string());
                        pos = end;
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            if start == pos {
                return Err(bad("expected a decimal header field"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("header field out of range"))?;
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(bad(format!("unsupported maxval {maxval}")));
        }
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(bad("missing whitespace after header"));
        }
        pos += 1;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| bad("image dimensions overflow"))?;
        let data = &bytes[pos..];
        if data.len() < n {
            return Err(bad(format!("expected {n} pixel bytes, found {}", data.len())));
        }
        let pixels = if maxval == 255 {
            data[..n].to_vec()
        } else {
            data[..n]
                .iter()
                .map(|p| ((*p as usize).min(maxval) * 255 / maxval) as u8)
                .collect()
        };
        let mut img = Pgm::new(height, width, pixels).map_err(|e| bad(e.to_string()))?;
        img.comments = comments;
        Ok(img)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Pgm::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

//! Netpbm images: plain and binary PPM (P3/P6) and PGM (P2/P5), maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit channel-major pixels, `channels × height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixels {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Pixels {
    /// `[3, H, W]` in [0, 1]; gray images are replicated to three channels.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for c in 0..3 {
            let src = if self.channels == 1 { 0 } else { c };
            out.extend(self.data[src * plane..(src + 1) * plane].iter().map(|&v| v as f64 / 255.0));
        }
        Tensor::new(&[3, self.height, self.width], out).expect("sized above")
    }

    /// Rounds a `[C, H, W]` tensor in [0, 1] to 8 bits.
    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let (channels, height, width) = match t.shape() {
            [h, w] => (1, *h, *w),
            [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
            s => return Err(Error::Format(format!("cannot store a {s:?} tensor as an image"))),
        };
        let data = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Pixels {
            channels,
            height,
            width,
            data,
        })
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    /// Byte offset of the payload.
    offset: usize,
}

fn header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a netpbm file"));
    }
    let magic = [bytes[0], bytes[1]];
    if !matches!(magic[1], b'2' | b'3' | b'5' | b'6') {
        return Err(Error::Format(format!(
            "unsupported magic number P{}",
            magic[1] as char
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    // exactly one whitespace byte separates the header from a binary payload
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("truncated header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos,
    })
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pixels> {
    let h = header(bytes)?;
    let channels = if matches!(h.magic[1], b'3' | b'6') { 3 } else { 1 };
    let n = h.width * h.height * channels;
    let interleaved: Vec<u8> = match h.magic[1] {
        b'5' | b'6' => {
            let payload = &bytes[h.offset..];
            if payload.len() < n {
                return Err(Error::Format(format!(
                    "truncated payload: {} of {n} bytes",
                    payload.len()
                )));
            }
            payload[..n].to_vec()
        }
        _ => {
            let text = std::str::from_utf8(&bytes[h.offset..])
                .map_err(|_| Error::Format("non-text plain payload".into()))?;
            let vals: Vec<u8> = text
                .split_ascii_whitespace()
                .take(n)
                .map(|t| {
                    t.parse::<usize>()
                        .ok()
                        .filter(|&v| v <= h.maxval)
                        .map(|v| v as u8)
                        .ok_or_else(|| Error::Format(format!("bad sample {t:?}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() < n {
                return Err(Error::Format(format!("truncated payload: {} of {n} samples", vals.len())));
            }
            vals
        }
    };
    // interleaved RGB → channel-major
    let plane = h.width * h.height;
    let mut data = vec![0u8; n];
    for (i, &v) in interleaved.iter().enumerate() {
        data[(i % channels) * plane + i / channels] = v;
    }
    Ok(Pixels {
        channels,
        height: h.height,
        width: h.width,
        data,
    })
}

/// `[3, H, W]` tensor in [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    parse_pnm(&bytes)
        .map(|p| p.to_tensor())
        .map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
}

fn encode(p: &Pixels, magic: &str) -> Vec<u8> {
    let plane = p.width * p.height;
    let mut out = format!("{magic}\n{} {}\n255\n", p.width, p.height).into_bytes();
    for i in 0..plane {
        for c in 0..p.channels {
            out.push(p.data[c * plane + i]);
        }
    }
    out
}

/// Binary PPM (P6).
pub fn write_ppm(path: impl AsRef<Path>, p: &Pixels) -> Result<()> {
    if p.channels != 3 {
        return Err(Error::Format("PPM needs three channels".into()));
    }
    std::fs::write(&path, encode(p, "P6")).map_err(|e| Error::io(&path, e))
}

/// Binary PGM (P5).
pub fn write_pgm(path: impl AsRef<Path>, p: &Pixels) -> Result<()> {
    if p.channels != 1 {
        return Err(Error::Format("PGM needs one channel".into()));
    }
    std::fs::write(&path, encode(p, "P5")).map_err(|e| Error::io(&path, e))
}

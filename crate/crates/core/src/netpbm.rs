//! Binary PGM (P5, 8- or 16-bit, big endian) and PPM (P6, 8-bit) images.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad image header near byte {start}")))
}

/// Returns `(width, height, maxval, payload offset)`.
fn read_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    let kind = String::from_utf8_lossy(magic);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!("image magic must be {kind}")));
    }
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("{kind} maxval {maxval} out of range")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format(format!("{kind} header not terminated")));
    }
    Ok((width, height, maxval, pos + 1))
}

impl Pgm {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let (width, height, maxval, pos) = read_header(bytes, b"P5")?;
        let bps = if maxval > 255 { 2 } else { 1 };
        let payload = &bytes[pos..];
        let want = width * height * bps;
        if payload.len() != want {
            return Err(Error::Format(format!(
                "PGM {width}x{height} needs {want} payload bytes, found {}",
                payload.len()
            )));
        }
        let samples = if bps == 2 {
            payload
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            payload.iter().map(|&b| b as u16).collect()
        };
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageRgb {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let (width, height, maxval, pos) = read_header(bytes, b"P6")?;
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        let payload = &bytes[pos..];
        if payload.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "PPM {width}x{height} needs {} payload bytes, found {}",
                width * height * 3,
                payload.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: payload.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

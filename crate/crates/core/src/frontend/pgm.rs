//! Binary PGM (P5) rasters: 8-bit intensity images and 16-bit depth maps.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a binary PGM (P5) file")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("expected {expected} bytes of pixel data, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("PGM maxval {found} does not fit the requested {bits}-bit raster")]
    Depth { found: u32, bits: u32 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type GrayImage = Raster<u8>;
pub type DepthImage = Raster<u16>;

impl<T: Copy + Default> Raster<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::default(); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PgmError::Header("unexpected end of header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = token
            .parse()
            .map_err(|_| PgmError::Header(format!("expected a number at byte {start}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::Header("missing separator after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::Header(format!("maxval {maxval} out of range")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        offset: pos,
    })
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let h = parse_header(bytes)?;
    if h.maxval > 255 {
        return Err(PgmError::Depth {
            found: h.maxval,
            bits: 8,
        });
    }
    let n = h.width * h.height;
    let data = &bytes[h.offset..];
    if data.len() < n {
        return Err(PgmError::Truncated {
            expected: n,
            found: data.len(),
        });
    }
    Ok(Raster {
        width: h.width,
        height: h.height,
        data: data[..n].to_vec(),
    })
}

/// Decodes a 16-bit (big-endian) P5 file; 8-bit files are widened.
pub fn decode_depth(bytes: &[u8]) -> Result<DepthImage, PgmError> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height;
    let data = &bytes[h.offset..];
    let values = if h.maxval > 255 {
        if data.len() < 2 * n {
            return Err(PgmError::Truncated {
                expected: 2 * n,
                found: data.len(),
            });
        }
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        if data.len() < n {
            return Err(PgmError::Truncated {
                expected: n,
                found: data.len(),
            });
        }
        data[..n].iter().map(|&v| v as u16).collect()
    };
    Ok(Raster {
        width: h.width,
        height: h.height,
        data: values,
    })
}

pub fn encode_gray(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_depth(img: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>, PgmError> {
    std::fs::read(path).map_err(|source| PgmError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PgmError> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|source| PgmError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn load_gray(path: &Path) -> Result<GrayImage, PgmError> {
    decode_gray(&read(path)?)
}

pub fn load_depth(path: &Path) -> Result<DepthImage, PgmError> {
    decode_depth(&read(path)?)
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<(), PgmError> {
    write(path, &encode_gray(img))
}

pub fn save_depth(path: &Path, img: &DepthImage) -> Result<(), PgmError> {
    write(path, &encode_depth(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let img = GrayImage::from_fn(7, 3, |x, y| (x * 30 + y) as u8);
        assert_eq!(decode_gray(&encode_gray(&img)).unwrap(), img);
    }

    #[test]
    fn depth_round_trip() {
        let img = DepthImage::from_fn(4, 5, |x, y| (x * 1000 + y * 7 + 60000 * (x % 2)) as u16);
        assert_eq!(decode_depth(&encode_depth(&img)).unwrap(), img);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[5, 9]);
        let img = decode_gray(&bytes).unwrap();
        assert_eq!(img.data, vec![5, 9]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_gray(b"P2\n1 1\n255\n0"), Err(PgmError::BadMagic)));
        assert!(matches!(
            decode_gray(b"P5\n4 4\n255\n\x00\x01"),
            Err(PgmError::Truncated { expected: 16, found: 2 })
        ));
        assert!(matches!(
            decode_gray(b"P5\n1 1\n65535\n\x00\x01"),
            Err(PgmError::Depth { .. })
        ));
    }
}

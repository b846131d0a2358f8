//! 8-bit grayscale PGM images (P2 and P5, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    /// Row-major pixels.
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::FormatError("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmEncoding {
    /// `P2`
    Ascii,
    /// `P5`
    Binary,
}

/// Header tokens, skipping `#` comments. Returns the tokens and the offset after the
/// single whitespace byte that ends the header.
fn header(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::FormatError("truncated PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    Ok((tokens, pos + 1))
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::FormatError(format!("bad {what} '{tok}'")))
}

/// Parse PGM bytes.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (tok, body) = header(bytes, 4)?;
    let encoding = match tok[0].as_str() {
        "P2" => PgmEncoding::Ascii,
        "P5" => PgmEncoding::Binary,
        other => return Err(Error::FormatError(format!("unsupported magic '{other}'"))),
    };
    let width = parse_dim(&tok[1], "width")?;
    let height = parse_dim(&tok[2], "height")?;
    if tok[3] != "255" {
        return Err(Error::FormatError(format!("maxval must be 255, got {}", tok[3])));
    }
    let n = width * height;
    let pixels = match encoding {
        PgmEncoding::Binary => {
            let data = bytes.get(body..body + n).ok_or_else(|| {
                Error::FormatError("pixel data shorter than width * height".into())
            })?;
            data.to_vec()
        }
        PgmEncoding::Ascii => {
            let text = String::from_utf8_lossy(bytes.get(body.min(bytes.len())..).unwrap_or(&[]));
            let vals: Vec<u8> = text
                .split_ascii_whitespace()
                .map(|t| {
                    t.parse::<u16>()
                        .ok()
                        .filter(|&v| v <= 255)
                        .map(|v| v as u8)
                        .ok_or_else(|| Error::FormatError(format!("bad pixel '{t}'")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != n {
                return Err(Error::FormatError(format!(
                    "expected {n} pixels, found {}",
                    vals.len()
                )));
            }
            vals
        }
    };
    GrayImage::new(width, height, pixels)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    parse_pgm(&fs::read(path)?)
}

pub fn encode_pgm(img: &GrayImage, encoding: PgmEncoding) -> Vec<u8> {
    match encoding {
        PgmEncoding::Binary => {
            let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&img.pixels);
            out
        }
        PgmEncoding::Ascii => {
            let mut out = format!("P2\n{} {}\n255\n", img.width, img.height);
            for row in img.pixels.chunks(img.width) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
    }
}

/// Write a binary (P5) PGM.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    save_pgm_as(img, path, PgmEncoding::Binary)
}

pub fn save_pgm_as(img: &GrayImage, path: impl AsRef<Path>, encoding: PgmEncoding) -> Result<()> {
    fs::write(path, encode_pgm(img, encoding))?;
    Ok(())
}

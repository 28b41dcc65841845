//! Binary Netpbm (P5 graymap / P6 pixmap) reading and writing.
//! <https://netpbm.sourceforge.net/doc/pgm.html>

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("malformed netpbm header: {0}")]
    Header(String),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit raster with `channels` interleaved samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), PnmError> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(PnmError::Header(format!("expected {count} header fields, found {}", tokens.len())));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(PnmError::Header("missing whitespace after maxval".into()));
    }
    Ok((tokens, i + 1))
}

pub fn decode(bytes: &[u8]) -> Result<Raster, PnmError> {
    let (tokens, offset) = header_tokens(bytes, 4)?;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(PnmError::Header(format!("unsupported magic `{other}`"))),
    };
    let parse = |s: &str, what: &str| -> Result<usize, PnmError> {
        s.parse::<usize>()
            .map_err(|_| PnmError::Header(format!("invalid {what} `{s}`")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::Header("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(PnmError::Header(format!("maxval {maxval} unsupported (expected 255)")));
    }
    let expected = width * height * channels;
    let data = &bytes[offset..];
    if data.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: data.len(),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: data[..expected].to_vec(),
    })
}

pub fn encode(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<Raster, PnmError> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, raster: &Raster) -> Result<(), PnmError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode(raster))?;
    f.flush()?;
    Ok(())
}

//! Image file formats: binary PGM (8-bit and 16-bit big-endian) and the
//! SWR1 raw float format (16-byte header, then f32 little-endian samples).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use swiftreg_core::Image;

use crate::error::{AppError, Result};

const SWR_MAGIC: &[u8; 4] = b"SWR1";

/// A decoded integer raster, before depth conversion.
pub struct RawPgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u16>,
}

fn bad(path: &Path, reason: impl Into<String>) -> AppError {
    AppError::BadImage {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads one whitespace-delimited header token, skipping '#' comments.
fn next_token(data: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < data.len() {
        let b = data[*pos];
        if b == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&data[start..*pos]).into_owned())
    } else {
        None
    }
}

pub fn read_pgm(path: &Path) -> Result<RawPgm> {
    let mut data = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut data))
        .map_err(|e| AppError::io(path, e))?;
    let mut pos = 0usize;
    let magic = next_token(&data, &mut pos).ok_or_else(|| bad(path, "truncated header"))?;
    if magic != "P5" {
        return Err(bad(path, format!("unsupported magic {magic:?}, want P5")));
    }
    let mut field = |name: &str| -> Result<usize> {
        next_token(&data, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(path, format!("bad {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(path, "zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(path, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let n = width * height;
    let samples: Vec<u16> = if maxval < 256 {
        if data.len() < pos + n {
            return Err(bad(path, "truncated pixel data"));
        }
        data[pos..pos + n].iter().map(|&b| b as u16).collect()
    } else {
        if data.len() < pos + 2 * n {
            return Err(bad(path, "truncated pixel data"));
        }
        data[pos..pos + 2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(RawPgm {
        width,
        height,
        maxval: maxval as u32,
        samples,
    })
}

/// Writes an 8-bit binary PGM, quantizing [0,1] with round-half-up.
pub fn write_pgm8(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| AppError::io(path, e))?);
    let mut run = || -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
        let bytes: Vec<u8> = img
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        w.write_all(&bytes)?;
        w.flush()
    };
    run().map_err(|e| AppError::io(path, e))
}

pub fn write_swr(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| AppError::io(path, e))?);
    let mut run = || -> std::io::Result<()> {
        w.write_all(SWR_MAGIC)?;
        w.write_all(&(img.width as u32).to_le_bytes())?;
        w.write_all(&(img.height as u32).to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        for &v in &img.pixels {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()
    };
    run().map_err(|e| AppError::io(path, e))
}

pub fn read_swr(path: &Path) -> Result<Image> {
    let mut data = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut data))
        .map_err(|e| AppError::io(path, e))?;
    if data.len() < 16 || &data[0..4] != SWR_MAGIC {
        return Err(bad(path, "not an SWR1 file"));
    }
    let width = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    if data[12..16] != [0u8; 4] {
        return Err(bad(path, "nonzero reserved bytes"));
    }
    let n = width * height;
    if width == 0 || height == 0 {
        return Err(bad(path, "zero dimension"));
    }
    if data.len() < 16 + 4 * n {
        return Err(bad(path, "truncated pixel data"));
    }
    let pixels: Vec<f64> = data[16..16 + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Image::new(width, height, pixels))
}

/// Reads PGM or SWR1, dispatching on the leading magic bytes. Integer PGM
/// samples are scaled to [0,1] by the declared maxval.
pub fn read_image(path: &Path) -> Result<Image> {
    let mut magic = [0u8; 2];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| AppError::io(path, e))?;
    if &magic == b"P5" {
        let raw = read_pgm(path)?;
        let scale = raw.maxval as f64;
        Ok(Image::new(
            raw.width,
            raw.height,
            raw.samples.iter().map(|&s| s as f64 / scale).collect(),
        ))
    } else if &magic == &SWR_MAGIC[0..2] {
        read_swr(path)
    } else {
        Err(bad(path, "unrecognized format (want P5 or SWR1)"))
    }
}

/// Writes PGM or SWR1 based on the output extension (".swr" selects SWR1).
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("swr") => write_swr(path, img),
        _ => write_pgm8(path, img),
    }
}

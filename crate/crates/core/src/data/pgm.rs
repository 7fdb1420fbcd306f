//! Binary PGM (P5) images, maxval 255. Pixels map to [0, 1] reals.

use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { line: 0, msg: format!("pgm: missing {what}") });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "P5" {
        return Err(Error::Parse { line: 1, msg: format!("pgm: magic '{magic}', expected P5") });
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "pgm: bad width".into() })?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "pgm: bad height".into() })?;
    let maxval: usize = token("maxval")?
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "pgm: bad maxval".into() })?;
    if maxval != 255 {
        return Err(Error::Parse { line: 1, msg: format!("pgm: maxval {maxval}, expected 255") });
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if bytes.len() < pos + width * height {
        return Err(Error::Parse {
            line: 1,
            msg: format!("pgm: raster truncated, need {} bytes", width * height),
        });
    }
    let pixels = bytes[pos..pos + width * height].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(GrayImage { width, height, pixels })
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<GrayImage> {
    decode(&std::fs::read(path)?)
}

//! Binary portable graymap (P5, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub fn encode(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::Data(format!(
            "PGM holds one channel, image has {}",
            img.channels
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ImageTensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Data(format!(
            "unsupported image magic {:?}",
            fields[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("bad PGM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported PGM maxval {maxval}")));
    }
    let raster = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| Error::Data("truncated PGM raster".into()))?;
    let scale = 1.0 / maxval as f32;
    ImageTensor::new(
        height,
        width,
        1,
        raster.iter().map(|&b| f32::from(b) * scale).collect(),
    )
}

pub fn write(path: &Path, img: &ImageTensor) -> Result<()> {
    fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ImageTensor> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

//! Single-channel floating-point images and binary PGM (P5) files.
//!
//! Intensities are nonnegative reals; files store them quantized against a
//! maxval of up to 65535 (8-bit one byte per pixel, 16-bit two bytes
//! big-endian, per the PGM convention). Reads normalize into [0, 1].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::dim(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "image pixels must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f32 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.pixels.iter().map(|&v| v as f64).sum();
        (sum / self.pixels.len() as f64) as f32
    }
}

/// Read a binary (P5) PGM. Pixel values are scaled by 1/maxval into [0, 1].
pub fn read_pgm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let perr = |msg: &str| Error::Parse {
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(perr("not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(perr("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(perr("expected an integer header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = text
            .parse::<usize>()
            .map_err(|_| perr("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(perr("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(perr("maxval must be in 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(perr("missing whitespace before raster")),
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bytes_per;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| perr("truncated raster"))?;
    if pos + need != bytes.len() {
        return Err(perr("trailing bytes after raster"));
    }
    let inv = 1.0f32 / maxval as f32;
    let pixels: Vec<f32> = if bytes_per == 1 {
        raster.iter().map(|&b| b as f32 * inv).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 * inv)
            .collect()
    };
    if pixels.iter().any(|&v| v > 1.0) {
        return Err(perr("sample value exceeds maxval"));
    }
    Image::new(height, width, pixels)
}

/// Write a binary (P5) PGM, quantizing values by round(clamp(v,0,1)·maxval).
pub fn write_pgm(path: &Path, img: &Image, maxval: u16) -> Result<()> {
    if maxval == 0 {
        return Err(Error::contract("pgm maxval must be positive"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n{}\n", img.width(), img.height(), maxval)?;
    let m = maxval as f32;
    if maxval < 256 {
        let data: Vec<u8> = img
            .pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * m).round() as u8)
            .collect();
        w.write_all(&data)?;
    } else {
        let mut data = Vec::with_capacity(img.pixels().len() * 2);
        for &v in img.pixels() {
            let q = (v.clamp(0.0, 1.0) * m).round() as u16;
            data.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&data)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_and_nonfinite_pixels() {
        assert!(Image::new(1, 2, vec![0.0, -0.1]).is_err());
        assert!(Image::new(1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(Image::new(1, 2, vec![0.0, 0.5]).is_ok());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn pgm_8bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Image::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        write_pgm(&path, &img, 255).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.height(), 2);
        assert_eq!(back.width(), 3);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_16bit_round_trip_is_tighter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Image::new(1, 4, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        write_pgm(&path, &img, 65535).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        assert_eq!(back.pixels()[0], 0.0);
        assert_eq!(back.pixels()[3], 1.0);
    }

    #[test]
    fn parses_comments_and_flexible_whitespace() {
        let mut bytes = b"P5 # comment\n# another\n 3\t2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.width(), 3);
        assert_eq!(img.height(), 2);
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(1, 2), 1.0);
        assert!((img.get(0, 1) - 0.2).abs() < 1e-3);
    }

    #[test]
    fn rejects_malformed_pgm() {
        assert!(parse_pgm(b"P6 1 1 255 x").is_err());
        assert!(parse_pgm(b"P5 1 1 0\n\x00").is_err());
        assert!(parse_pgm(b"P5 2 2 255\n\x00\x00").is_err()); // truncated
        let mut long = b"P5 1 1 255\n\x00".to_vec();
        long.push(0); // trailing byte
        assert!(parse_pgm(&long).is_err());
        assert!(parse_pgm(b"P5 0 1 255\n").is_err());
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x00]); // 256, not 1
        let img = parse_pgm(&bytes).unwrap();
        assert!((img.get(0, 0) - 256.0 / 65535.0).abs() < 1e-7);
    }
}

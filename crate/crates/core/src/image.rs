//! RGB images in `[0,1]` and binary PPM/PGM I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{contract, Error, Result};

/// Axis-aligned pixel box, top-left `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn square(x: usize, y: usize, size: usize) -> Self {
        Self::new(x, y, size, size)
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.h).contains(&y) && (self.x..self.x + self.w).contains(&x)
    }
}

/// Row-major `height x width x 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(contract(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn white(height: usize, width: usize) -> Self {
        Self::filled(height, width, [1.0; 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = self.offset(y, x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = self.offset(y, x);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Copy of the `h x w` region with top-left `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(contract(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let o = self.offset(y, x0);
            data.extend_from_slice(&self.data[o..o + w * 3]);
        }
        Image::new(h, w, data)
    }

    pub fn crop_rect(&self, r: &Rect) -> Result<Image> {
        self.crop(r.y, r.x, r.h, r.w)
    }

    /// Copies `src` into this image with top-left at `(y0, x0)`.
    pub fn blit(&mut self, src: &Image, y0: usize, x0: usize) -> Result<()> {
        if y0 + src.height > self.height || x0 + src.width > self.width {
            return Err(contract("blit source exceeds the destination"));
        }
        for y in 0..src.height {
            let o = self.offset(y0 + y, x0);
            let so = src.offset(y, 0);
            self.data[o..o + src.width * 3].copy_from_slice(&src.data[so..so + src.width * 3]);
        }
        Ok(())
    }

    /// Horizontal concatenation; heights must agree.
    pub fn hstack(parts: &[&Image]) -> Result<Image> {
        let h = parts.first().map_or(0, |p| p.height);
        if parts.iter().any(|p| p.height != h) {
            return Err(contract("hstack needs equal heights"));
        }
        let w: usize = parts.iter().map(|p| p.width).sum();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for p in parts {
                let o = p.offset(y, 0);
                data.extend_from_slice(&p.data[o..o + p.width * 3]);
            }
        }
        Image::new(h, w, data)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
        let (kind, w, h, bytes) = read_pnm(path.as_ref())?;
        if kind != "P6" {
            return Err(Error::Config(format!("expected P6, found {kind}")));
        }
        Image::new(h, w, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary mask as P5 (0 or 255).
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != height * width {
        return Err(contract("mask size does not match extents"));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let (kind, w, h, bytes) = read_pnm(path.as_ref())?;
    if kind != "P5" {
        return Err(Error::Config(format!("expected P5, found {kind}")));
    }
    Ok((h, w, bytes.iter().map(|&b| b > 127).collect()))
}

fn read_pnm(path: &Path) -> Result<(String, usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Config("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad PNM header field `{s}`")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Config(format!("unsupported maxval {maxval}")));
    }
    let channels = if fields[0] == "P6" { 3 } else { 1 };
    let need = w * h * channels;
    if raw.len() < pos + need {
        return Err(Error::Config("truncated PNM payload".into()));
    }
    Ok((fields[0].clone(), w, h, raw[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f64 / 255.0).collect();
        let img = Image::new(2, 3, data).unwrap();
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(Image::read_ppm(&p).unwrap(), img);

        let mask = vec![true, false, false, true, true, false];
        let q = dir.path().join("m.pgm");
        write_pgm(&q, 2, 3, &mask).unwrap();
        assert_eq!(read_pgm(&q).unwrap(), (2, 3, mask));
    }

    #[test]
    fn crop_bounds() {
        let img = Image::white(4, 4);
        assert!(img.crop(2, 2, 2, 2).is_ok());
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}

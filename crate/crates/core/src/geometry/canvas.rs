use crate::error::{contract, Result};
use crate::image::Image;

use super::similarity::{
    estimate_similarity, patch_to_image_scale, translation_offset, Landmarks5, MAX_PASTE_SCALE,
    MIN_PASTE_SCALE,
};

/// Reference face crop with an alpha map, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FacePatch {
    pub pixels: Image,
    pub alpha: Vec<f64>,
}

impl FacePatch {
    pub fn new(mut pixels: Image, mut alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != pixels.height() * pixels.width() {
            return Err(contract("alpha extents do not match the patch"));
        }
        pixels.clamp01();
        alpha.iter_mut().for_each(|a| *a = a.clamp(0.0, 1.0));
        Ok(Self { pixels, alpha })
    }

    pub fn opaque(pixels: Image) -> Self {
        let n = pixels.height() * pixels.width();
        Self::new(pixels, vec![1.0; n]).expect("opaque alpha matches")
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }
}

/// Where and how large a patch lands on the canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    /// Scale of the image-to-patch landmark fit, before the reciprocal.
    pub raw_scale: f64,
    /// Patch-to-image scale after clamping.
    pub scale: f64,
    /// Integer paste offset `(x, y)` of the resized patch's top-left pixel.
    pub offset: (i64, i64),
}

impl Placement {
    /// `patch_landmarks` live in the patch frame, `image_landmarks` in the
    /// canvas frame. The fit runs image-to-patch, hence the reciprocal.
    pub fn from_landmarks(patch_landmarks: &Landmarks5, image_landmarks: &Landmarks5) -> Result<Self> {
        let fit = estimate_similarity(image_landmarks, patch_landmarks)?;
        let scale = patch_to_image_scale(fit.raw_scale)?;
        let offset = translation_offset(patch_landmarks, image_landmarks, scale);
        Ok(Self {
            raw_scale: fit.raw_scale,
            scale,
            offset,
        })
    }

    /// Resized patch extents `(h, w)`.
    pub fn resized_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let r = |n: usize| ((n as f64 * self.scale).round() as usize).max(1);
        (r(h), r(w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PasteRecord {
    pub raw_scale: f64,
    pub scale: f64,
    pub offset: (i64, i64),
    pub resized: (usize, usize),
    /// Part of the resized patch fell outside the canvas.
    pub clipped: bool,
    /// Number of canvas pixels the alpha actually covered.
    pub covered: usize,
}

/// Image-sized white canvas, binary mask of pasted support, and one record
/// per paste.
#[derive(Clone, Debug)]
pub struct LocationCanvas {
    canvas: Image,
    mask: Vec<bool>,
    records: Vec<PasteRecord>,
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, h: usize, w: usize) -> Image {
    let (sh, sw) = (img.height(), img.width());
    let mut out = Image::white(h, w);
    let src = |n: usize, s: usize, d: usize| -> (usize, usize, f64) {
        let pos = ((n as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, pos - lo as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = src(y, sh, h);
        for x in 0..w {
            let (x0, x1, fx) = src(x, sw, w);
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            let mut px = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
                px[ch] = top * (1.0 - fy) + bot * fy;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

pub fn resize_nearest(values: &[f64], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f64> {
    let idx = |n: usize, s: usize, d: usize| (((n as f64 + 0.5) * s as f64 / d as f64) as usize).min(s - 1);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = idx(y, sh, h);
        for x in 0..w {
            out.push(values[sy * sw + idx(x, sw, w)]);
        }
    }
    out
}

impl LocationCanvas {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            canvas: Image::white(height, width),
            mask: vec![false; height * width],
            records: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.canvas.height()
    }

    pub fn width(&self) -> usize {
        self.canvas.width()
    }

    pub fn image(&self) -> &Image {
        &self.canvas
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn records(&self) -> &[PasteRecord] {
        &self.records
    }

    /// Resizes the patch by `placement.scale` (bilinear pixels, nearest
    /// alpha), source-over composites it at `placement.offset`, and ORs the
    /// covered support into the mask. Out-of-bounds parts are dropped.
    pub fn paste_face(&mut self, patch: &FacePatch, placement: &Placement) -> Result<&PasteRecord> {
        if !(MIN_PASTE_SCALE..=MAX_PASTE_SCALE).contains(&placement.scale) {
            return Err(contract(format!(
                "paste scale {} outside [{MIN_PASTE_SCALE}, {MAX_PASTE_SCALE}]",
                placement.scale
            )));
        }
        let (rh, rw) = placement.resized_extent(patch.height(), patch.width());
        let pixels = resize_bilinear(&patch.pixels, rh, rw);
        let alpha = resize_nearest(&patch.alpha, patch.height(), patch.width(), rh, rw);
        let (ox, oy) = placement.offset;
        let (h, w) = (self.height() as i64, self.width() as i64);
        let mut clipped = false;
        let mut covered = 0;
        for y in 0..rh {
            for x in 0..rw {
                let (cy, cx) = (oy + y as i64, ox + x as i64);
                if cy < 0 || cx < 0 || cy >= h || cx >= w {
                    clipped = true;
                    continue;
                }
                let a = alpha[y * rw + x];
                if a <= 0.0 {
                    continue;
                }
                let (cy, cx) = (cy as usize, cx as usize);
                let src = pixels.pixel(y, x);
                let dst = self.canvas.pixel(cy, cx);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    out[c] = a * src[c] + (1.0 - a) * dst[c];
                }
                self.canvas.set_pixel(cy, cx, out);
                let cw = self.canvas.width();
                self.mask[cy * cw + cx] = true;
                covered += 1;
            }
        }
        if covered == 0 {
            log::debug!("paste at {:?} left no footprint on the canvas", placement.offset);
        }
        self.records.push(PasteRecord {
            raw_scale: placement.raw_scale,
            scale: placement.scale,
            offset: placement.offset,
            resized: (rh, rw),
            clipped,
            covered,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Full landmark-driven placement and paste.
    pub fn place_face(
        &mut self,
        patch: &FacePatch,
        patch_landmarks: &Landmarks5,
        image_landmarks: &Landmarks5,
    ) -> Result<&PasteRecord> {
        let placement = Placement::from_landmarks(patch_landmarks, image_landmarks)?;
        self.paste_face(patch, &placement)
    }
}

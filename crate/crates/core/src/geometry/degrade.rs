//! Photometric and geometric degradations applied to a reference patch
//! before it is pasted onto the canvas.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config, Error, Result};

use super::canvas::FacePatch;

pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.2, 0.2);
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.25);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.05);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive shift on every channel.
    Brightness(f64),
    /// Scale about the patch mean.
    Contrast(f64),
    /// 3x3 binomial blur, edge-replicated.
    Blur,
    /// Additive Gaussian noise with this standard deviation.
    Noise(f64),
    Flip,
    Grayscale,
}

impl Degradation {
    fn validate(self) -> Result<Self> {
        let check = |v: f64, (lo, hi): (f64, f64), name: &str| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(config(format!("{name} magnitude {v} outside [{lo}, {hi}]")))
            }
        };
        match self {
            Self::Brightness(b) => check(b, BRIGHTNESS_RANGE, "brightness")?,
            Self::Contrast(c) => check(c, CONTRAST_RANGE, "contrast")?,
            Self::Noise(s) => check(s, NOISE_RANGE, "noise")?,
            Self::Blur | Self::Flip | Self::Grayscale => {}
        }
        Ok(self)
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Brightness(b) => write!(f, "brightness:{b}"),
            Self::Contrast(c) => write!(f, "contrast:{c}"),
            Self::Blur => write!(f, "blur"),
            Self::Noise(s) => write!(f, "noise:{s}"),
            Self::Flip => write!(f, "flip"),
            Self::Grayscale => write!(f, "grayscale"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = |what: &str| -> Result<f64> {
            arg.ok_or_else(|| config(format!("{what} needs a magnitude, e.g. `{what}:0.1`")))?
                .parse()
                .map_err(|_| config(format!("bad {what} magnitude in `{s}`")))
        };
        let d = match name {
            "brightness" => Self::Brightness(num("brightness")?),
            "contrast" => Self::Contrast(num("contrast")?),
            "noise" => Self::Noise(num("noise")?),
            "blur" => Self::Blur,
            "flip" => Self::Flip,
            "grayscale" => Self::Grayscale,
            other => return Err(config(format!("unknown degradation `{other}`"))),
        };
        d.validate()
    }
}

/// Ordered list of degradations; empty means identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DegradationSpec(pub Vec<Degradation>);

impl DegradationSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for DegradationSpec {
    type Err = Error;

    /// Comma-separated, e.g. `brightness:0.1,blur,flip`. `""` and
    /// `identity` are the empty spec.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "identity" {
            return Ok(Self::identity());
        }
        s.split(',').map(str::parse).collect::<Result<Vec<_>>>().map(Self)
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "identity");
        }
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Per-kind application probabilities; magnitudes are drawn uniformly from
/// the allowed ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationBank {
    pub p_brightness: f64,
    pub p_contrast: f64,
    pub p_blur: f64,
    pub p_noise: f64,
    pub p_flip: f64,
    pub p_grayscale: f64,
}

impl Default for DegradationBank {
    fn default() -> Self {
        Self {
            p_brightness: 0.5,
            p_contrast: 0.5,
            p_blur: 0.3,
            p_noise: 0.3,
            p_flip: 0.0,
            p_grayscale: 0.0,
        }
    }
}

impl DegradationBank {
    pub fn disabled() -> Self {
        Self {
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_blur: 0.0,
            p_noise: 0.0,
            p_flip: 0.0,
            p_grayscale: 0.0,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DegradationSpec {
        let mut ops = Vec::new();
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        if rng.random::<f64>() < self.p_brightness {
            ops.push(Degradation::Brightness(uniform(rng, BRIGHTNESS_RANGE)));
        }
        if rng.random::<f64>() < self.p_contrast {
            ops.push(Degradation::Contrast(uniform(rng, CONTRAST_RANGE)));
        }
        if rng.random::<f64>() < self.p_blur {
            ops.push(Degradation::Blur);
        }
        if rng.random::<f64>() < self.p_noise {
            ops.push(Degradation::Noise(uniform(rng, NOISE_RANGE)));
        }
        if rng.random::<f64>() < self.p_flip {
            ops.push(Degradation::Flip);
        }
        if rng.random::<f64>() < self.p_grayscale {
            ops.push(Degradation::Grayscale);
        }
        DegradationSpec(ops)
    }
}

/// Applies `spec` in order. Output pixels are clamped to `[0,1]`; alpha
/// changes only under `Flip`.
pub fn degrade_patch<R: Rng>(patch: &FacePatch, spec: &DegradationSpec, rng: &mut R) -> Result<FacePatch> {
    if spec.is_identity() {
        return Ok(patch.clone());
    }
    let (h, w) = (patch.height(), patch.width());
    let mut px = patch.pixels.clone();
    let mut alpha = patch.alpha.clone();
    for d in &spec.0 {
        match *d.validate_ref()? {
            Degradation::Brightness(b) => px.data_mut().iter_mut().for_each(|v| *v += b),
            Degradation::Contrast(c) => {
                let mean = px.data().iter().sum::<f64>() / px.data().len() as f64;
                px.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
            }
            Degradation::Blur => px = blur3(&px),
            Degradation::Noise(s) => px
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += s * rng.sample::<f64, _>(StandardNormal)),
            Degradation::Flip => {
                let src = px.clone();
                let a = alpha.clone();
                for y in 0..h {
                    for x in 0..w {
                        px.set_pixel(y, x, src.pixel(y, w - 1 - x));
                        alpha[y * w + x] = a[y * w + w - 1 - x];
                    }
                }
            }
            Degradation::Grayscale => {
                for p in px.data_mut().chunks_mut(3) {
                    let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                    p.fill(l);
                }
            }
        }
    }
    FacePatch::new(px, alpha)
}

impl Degradation {
    fn validate_ref(&self) -> Result<&Self> {
        self.validate()?;
        Ok(self)
    }
}

fn blur3(img: &crate::image::Image) -> crate::image::Image {
    let (h, w) = (img.height(), img.width());
    let k = [0.25, 0.5, 0.25];
    let pass = |src: &crate::image::Image, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (t, kv) in k.iter().enumerate() {
                    let o = t as i64 - 1;
                    let (sy, sx) = if horizontal {
                        (y, (x as i64 + o).clamp(0, w as i64 - 1) as usize)
                    } else {
                        ((y as i64 + o).clamp(0, h as i64 - 1) as usize, x)
                    };
                    let p = src.pixel(sy, sx);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                out.set_pixel(y, x, acc);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

//! Synthetic multi-identity scenes. An identity is an 8-vector that fixes
//! two colored Gaussian blobs on a mid-gray patch; appearance nuisance is
//! brightness, contrast and pixel noise only.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config, contract, Error, Result};
use crate::geometry::{FacePatch, Landmarks5, LocationCanvas};
use crate::image::{write_pgm, Image, Rect};

pub const IDENTITY_DIM: usize = 8;

pub type IdentityVector = [f64; IDENTITY_DIM];

pub fn random_identity<R: Rng>(rng: &mut R) -> IdentityVector {
    let mut z = [0.0; IDENTITY_DIM];
    z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    z
}

/// Photometric nuisance: `(p - 0.5) * contrast + 0.5 + brightness + noise`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Nuisance {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            brightness: rng.random_range(-0.1..=0.1),
            contrast: rng.random_range(0.85..=1.15),
            noise_std: rng.random_range(0.0..=0.01),
            noise_seed: rng.random(),
        }
    }
}

struct Blob {
    center: [f64; 2],
    color: [f64; 3],
    sigma: f64,
}

fn blobs(z: &IdentityVector) -> [Blob; 2] {
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let blob = |k: usize| {
        let hue = z[4 + k] * 1.7 + k as f64 * 2.0;
        let tau = std::f64::consts::TAU;
        Blob {
            center: [0.5 + 0.3 * z[2 * k].tanh(), 0.5 + 0.3 * z[2 * k + 1].tanh()],
            color: [
                0.5 + 0.4 * hue.cos(),
                0.5 + 0.4 * (hue - tau / 3.0).cos(),
                0.5 + 0.4 * (hue + tau / 3.0).cos(),
            ],
            sigma: 0.09 + 0.08 * sigmoid(z[6 + k]),
        }
    };
    [blob(0), blob(1)]
}

/// Renders an identity into an `h x w` patch. Blob geometry is defined in
/// normalized coordinates, so any resolution shows the same pattern.
pub fn render_identity(z: &IdentityVector, h: usize, w: usize, nuisance: &Nuisance) -> Image {
    let bs = blobs(z);
    let mut noise = ChaCha8Rng::seed_from_u64(nuisance.noise_seed);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let mut px = [0.5; 3];
            for b in &bs {
                let d2 = (u - b.center[0]).powi(2) + (v - b.center[1]).powi(2);
                let a = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + b.color[c] * a;
                }
            }
            for p in px {
                let n: f64 = if nuisance.noise_std > 0.0 {
                    nuisance.noise_std * noise.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push(((p - 0.5) * nuisance.contrast + 0.5 + nuisance.brightness + n).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(h, w, data).expect("buffer sized from extents")
}

/// Prompt vocabulary: index is the token id.
pub const VOCAB: [&str; 16] = [
    "a", "photo", "of", "red", "green", "blue", "yellow", "purple", "teal", "plain", "striped",
    "one", "two", "three", "four", "people",
];
const COLOR_TOKENS: std::ops::Range<usize> = 3..9;
const STYLE_TOKENS: std::ops::Range<usize> = 9..11;
const COUNT_TOKENS: usize = 11;

fn background_rgb(token: usize) -> [f64; 3] {
    match VOCAB[token] {
        "red" => [0.75, 0.3, 0.3],
        "green" => [0.3, 0.7, 0.35],
        "blue" => [0.3, 0.4, 0.8],
        "yellow" => [0.8, 0.75, 0.3],
        "purple" => [0.6, 0.35, 0.7],
        _ => [0.3, 0.65, 0.65],
    }
}

pub fn prompt_text(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| VOCAB.get(t).copied().unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub face_size: usize,
    pub box_sizes: Vec<usize>,
    pub n_min: usize,
    pub n_max: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            face_size: 16,
            box_sizes: vec![12, 16],
            n_min: 1,
            n_max: 2,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || self.image_size % p != 0 {
            return Err(config(format!("image size {} not divisible by patch {p}", self.image_size)));
        }
        if self.box_sizes.is_empty() {
            return Err(config("no box sizes"));
        }
        for &b in &self.box_sizes {
            if b == 0 || b % p != 0 || b > self.image_size {
                return Err(config(format!("box size {b} must be a positive multiple of {p} within the image")));
            }
        }
        if !(1..=4).contains(&self.n_min) || self.n_max < self.n_min || self.n_max > 4 {
            return Err(config(format!("identity count range {}..={} must lie in 1..=4", self.n_min, self.n_max)));
        }
        if self.face_size < 8 {
            return Err(config("face patch must be at least 8 pixels"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySlot {
    pub z: IdentityVector,
    /// Canonical `face_size` square reference, rendered with its own nuisance.
    pub reference: Image,
    pub rect: Rect,
    pub image_landmarks: Landmarks5,
    pub gt_nuisance: Nuisance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: usize,
    pub image: Image,
    pub prompt: Vec<usize>,
    pub identities: Vec<IdentitySlot>,
}

fn place_boxes<R: Rng>(cfg: &SceneConfig, n: usize, rng: &mut R) -> Result<Vec<Rect>> {
    let p = cfg.patch;
    for _ in 0..cfg.max_attempts {
        let mut rects: Vec<Rect> = Vec::with_capacity(n);
        for _ in 0..n {
            let size = cfg.box_sizes[rng.random_range(0..cfg.box_sizes.len())];
            let slots = (cfg.image_size - size) / p + 1;
            let r = Rect::square(rng.random_range(0..slots) * p, rng.random_range(0..slots) * p, size);
            if rects.iter().any(|o| o.overlaps(&r)) {
                break;
            }
            rects.push(r);
        }
        if rects.len() == n {
            return Ok(rects);
        }
    }
    Err(Error::Config(format!(
        "could not pack {n} disjoint boxes into {0}x{0} after {1} attempts",
        cfg.image_size, cfg.max_attempts
    )))
}

/// Patch-frame landmarks of the canonical reference.
pub fn reference_landmarks(face_size: usize) -> Landmarks5 {
    Landmarks5::template_in_box([0.0, 0.0], face_size as f64)
}

pub fn generate_scene<R: Rng>(cfg: &SceneConfig, id: usize, n: usize, rng: &mut R) -> Result<SyntheticScene> {
    cfg.validate()?;
    if !(1..=4).contains(&n) {
        return Err(contract(format!("{n} identities requested; scenes hold 1 to 4")));
    }
    let color = rng.random_range(COLOR_TOKENS);
    let style = rng.random_range(STYLE_TOKENS);
    let s = cfg.image_size;
    let bg = background_rgb(color);
    let mut image = Image::filled(s, s, bg);
    if VOCAB[style] == "striped" {
        for y in 0..s {
            for x in (0..s).filter(|x| (x / 4) % 2 == 1) {
                let px = image.pixel(y, x).map(|v| v * 0.7);
                image.set_pixel(y, x, px);
            }
        }
    }
    let rects = place_boxes(cfg, n, rng)?;
    let mut identities = Vec::with_capacity(n);
    for rect in rects {
        let z = random_identity(rng);
        let gt_nuisance = Nuisance::sample(rng);
        let ref_nuisance = Nuisance::sample(rng);
        image.blit(&render_identity(&z, rect.h, rect.w, &gt_nuisance), rect.y, rect.x)?;
        identities.push(IdentitySlot {
            z,
            reference: render_identity(&z, cfg.face_size, cfg.face_size, &ref_nuisance),
            rect,
            image_landmarks: Landmarks5::template_in_box([rect.x as f64, rect.y as f64], rect.w as f64),
            gt_nuisance,
        });
    }
    Ok(SyntheticScene {
        id,
        image,
        prompt: vec![color, style, COUNT_TOKENS + n - 1],
        identities,
    })
}

/// Scene `index` of the stream `seed`; independent of every other index.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// `count` scenes with identity counts drawn from `n_min..=n_max`, or all
/// equal to `fixed_n`.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64, count: usize, fixed_n: Option<usize>) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            let n = fixed_n.unwrap_or_else(|| rng.random_range(cfg.n_min..=cfg.n_max));
            generate_scene(cfg, i, n, &mut rng)
        })
        .collect()
}

/// Canvas holding one identity's reference pasted at its landmarks.
pub fn identity_canvas(cfg: &SceneConfig, reference: &FacePatch, slot: &IdentitySlot) -> Result<LocationCanvas> {
    let mut canvas = LocationCanvas::new(cfg.image_size, cfg.image_size);
    canvas.place_face(reference, &reference_landmarks(cfg.face_size), &slot.image_landmarks)?;
    Ok(canvas)
}

/// Writes images, references, per-identity canvases and masks plus a
/// `scenes.csv` index.
pub fn write_dataset(cfg: &SceneConfig, scenes: &[SyntheticScene], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = String::from("scene,identity,x,y,w,h,prompt\n");
    for s in scenes {
        s.image.write_ppm(dir.join(format!("scene{:05}.ppm", s.id)))?;
        for (i, slot) in s.identities.iter().enumerate() {
            let stem = format!("scene{:05}_id{i}", s.id);
            slot.reference.write_ppm(dir.join(format!("{stem}_ref.ppm")))?;
            let canvas = identity_canvas(cfg, &FacePatch::opaque(slot.reference.clone()), slot)?;
            canvas.image().write_ppm(dir.join(format!("{stem}_canvas.ppm")))?;
            write_pgm(dir.join(format!("{stem}_mask.pgm")), cfg.image_size, cfg.image_size, canvas.mask())?;
            let r = slot.rect;
            index.push_str(&format!("{},{i},{},{},{},{},{}\n", s.id, r.x, r.y, r.w, r.h, prompt_text(&s.prompt)));
        }
    }
    fs::write(dir.join("scenes.csv"), index)?;
    Ok(())
}

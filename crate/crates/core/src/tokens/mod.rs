//! Packing text, image and pruned location-canvas tokens into one sequence
//! with per-token rotary coordinates.

pub mod rope;

use crate::error::{config, contract, Result};
use crate::image::Image;
use crate::numerics::{matmul, Tensor};

pub use rope::{apply_rope, RopeConfig};

/// `(type, x, y)`: text `(0,0,0)`, image `(0,x,y)`, identity `(1,x,y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RopeCoord {
    pub kind: u8,
    pub x: usize,
    pub y: usize,
}

impl RopeCoord {
    pub const TEXT: RopeCoord = RopeCoord { kind: 0, x: 0, y: 0 };

    pub fn image(x: usize, y: usize) -> Self {
        Self { kind: 0, x, y }
    }

    pub fn identity(x: usize, y: usize) -> Self {
        Self { kind: 1, x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Text,
    Image,
    /// Zero-based identity index.
    Identity(usize),
}

impl Branch {
    pub fn is_global(self) -> bool {
        matches!(self, Branch::Text | Branch::Image)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub branch: Branch,
    pub start: usize,
    pub len: usize,
}

/// Branch labels, segments and coordinates for `[T, I, F_1..F_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    coords: Vec<RopeCoord>,
    branches: Vec<Branch>,
    segments: Vec<Segment>,
    grid: (usize, usize),
}

impl SequenceLayout {
    /// `grid` is `(width, height)` of the image token grid.
    pub fn new(n_text: usize, grid: (usize, usize), identities: &[Vec<RopeCoord>]) -> Result<Self> {
        let (gw, gh) = grid;
        let mut coords = vec![RopeCoord::TEXT; n_text];
        coords.extend(grid_coords(gw, gh));
        let mut segments = vec![
            Segment {
                branch: Branch::Text,
                start: 0,
                len: n_text,
            },
            Segment {
                branch: Branch::Image,
                start: n_text,
                len: gw * gh,
            },
        ];
        for (i, ids) in identities.iter().enumerate() {
            if let Some(c) = ids.iter().find(|c| c.kind != 1 || c.x >= gw || c.y >= gh) {
                return Err(contract(format!("identity {i} has invalid coordinate {c:?}")));
            }
            segments.push(Segment {
                branch: Branch::Identity(i),
                start: coords.len(),
                len: ids.len(),
            });
            coords.extend_from_slice(ids);
        }
        let branches = segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.branch, s.len))
            .collect();
        Ok(Self {
            coords,
            branches,
            segments,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[RopeCoord] {
        &self.coords
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn num_identities(&self) -> usize {
        self.segments.len() - 2
    }

    pub fn text(&self) -> Segment {
        self.segments[0]
    }

    pub fn image(&self) -> Segment {
        self.segments[1]
    }

    pub fn identity(&self, i: usize) -> Segment {
        self.segments[2 + i]
    }
}

/// Packed tokens plus their layout.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub layout: SequenceLayout,
}

/// Row-major grid enumeration, x fastest.
pub fn grid_coords(gw: usize, gh: usize) -> impl Iterator<Item = RopeCoord> {
    (0..gh).flat_map(move |y| (0..gw).map(move |x| RopeCoord::image(x, y)))
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(config(format!("{h}x{w} is not divisible by patch size {p}")));
    }
    Ok(())
}

/// Non-overlapping `p x p` patches flattened in `(dy, dx, channel)` order:
/// returns `[N, 3p^2]` with `N = (H/p)(W/p)`, row-major over the grid.
pub fn patchify(image: &Image, p: usize) -> Result<Tensor> {
    let (h, w) = (image.height(), image.width());
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let width = 3 * p * p;
    let mut data = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let o = image.offset(gy * p + dy, gx * p);
                data.extend_from_slice(&image.data()[o..o + 3 * p]);
            }
        }
    }
    Tensor::matrix(gh * gw, width, data)
}

/// For each pixel value of an `h x w x 3` image (row-major), its flat index
/// into the `patchify` layout.
pub fn patch_index(h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    check_divisible(h, w, p)?;
    let gw = w / p;
    let width = 3 * p * p;
    let mut idx = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let token = (y / p) * gw + x / p;
            let within = ((y % p) * p + x % p) * 3;
            for c in 0..3 {
                idx.push(token * width + within + c);
            }
        }
    }
    Ok(idx)
}

pub fn unpatchify(patches: &Tensor, h: usize, w: usize, p: usize) -> Result<Image> {
    let idx = patch_index(h, w, p)?;
    if patches.numel() != h * w * 3 {
        return Err(contract("patch tensor does not cover the image"));
    }
    Image::new(h, w, idx.iter().map(|&i| patches.data()[i]).collect())
}

/// Patchify followed by a linear projection `[3p^2, d]` plus bias `[1, d]`.
/// Returns tokens and their grid coordinates.
pub fn patch_embed(
    image: &Image,
    p: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Vec<RopeCoord>)> {
    let patches = patchify(image, p)?;
    let mut tokens = matmul(&patches, weight)?;
    let d = tokens.cols();
    if bias.shape() != [1, d] {
        return Err(contract("patch embedding bias has the wrong shape"));
    }
    for r in 0..tokens.rows() {
        for c in 0..d {
            let v = tokens.get(r, c) + bias.data()[c];
            tokens.set(r, c, v);
        }
    }
    let coords = grid_coords(image.width() / p, image.height() / p).collect();
    Ok((tokens, coords))
}

/// Any-coverage pooling of a pixel mask to the token grid (row-major).
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, p: usize) -> Result<Vec<bool>> {
    check_divisible(h, w, p)?;
    if mask.len() != h * w {
        return Err(contract("mask size does not match extents"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![false; gh * gw];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                out[(y / p) * gw + x / p] = true;
            }
        }
    }
    Ok(out)
}

/// Row indices of mask-true cells, row-major.
pub fn kept_indices(token_mask: &[bool]) -> Vec<usize> {
    token_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Keeps canvas tokens under the mask and tags their coordinates as
/// identity tokens.
pub fn prune_identity_tokens(
    canvas_tokens: &Tensor,
    token_mask: &[bool],
    grid_width: usize,
) -> Result<(Tensor, Vec<RopeCoord>)> {
    let (n, d) = canvas_tokens.dims2()?;
    if n != token_mask.len() {
        return Err(contract(format!(
            "{n} canvas tokens but the token mask has {} cells",
            token_mask.len()
        )));
    }
    let keep = kept_indices(token_mask);
    if keep.is_empty() {
        log::debug!("identity mask is empty; segment will have no tokens");
    }
    let mut data = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        data.extend_from_slice(canvas_tokens.row_slice(i));
    }
    let coords = keep
        .iter()
        .map(|&i| RopeCoord::identity(i % grid_width, i / grid_width))
        .collect();
    Ok((Tensor::matrix(keep.len(), d, data)?, coords))
}

/// Concatenates `[T, I, F_1..F_n]`. All widths must agree.
pub fn assemble_sequence(
    text: &Tensor,
    image: &Tensor,
    image_grid: (usize, usize),
    identities: &[(Tensor, Vec<RopeCoord>)],
) -> Result<TokenSequence> {
    let d = image.cols();
    let parts = std::iter::once(text)
        .chain(std::iter::once(image))
        .chain(identities.iter().map(|(t, _)| t));
    let mut data = Vec::new();
    let mut rows = 0;
    for t in parts {
        let (r, c) = t.dims2()?;
        if c != d && r > 0 {
            return Err(contract(format!("token width {c} does not match {d}")));
        }
        rows += r;
        data.extend_from_slice(t.data());
    }
    if image.rows() != image_grid.0 * image_grid.1 {
        return Err(contract("image token count does not match its grid"));
    }
    for (i, (t, c)) in identities.iter().enumerate() {
        if t.rows() != c.len() {
            return Err(contract(format!("identity {i}: tokens and coords disagree")));
        }
    }
    let coords: Vec<Vec<RopeCoord>> = identities.iter().map(|(_, c)| c.clone()).collect();
    let layout = SequenceLayout::new(text.rows(), image_grid, &coords)?;
    Ok(TokenSequence {
        tokens: Tensor::matrix(rows, d, data)?,
        layout,
    })
}

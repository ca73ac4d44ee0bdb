//! Three-axis rotary embedding over `(type, x, y)` coordinates.

use crate::error::{config, Result};
use crate::numerics::{PairRotation, Tensor};

use super::RopeCoord;

/// Head-dimension split into type / x / y bands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta: f64,
    type_dims: usize,
    axis_dims: usize,
}

impl RopeConfig {
    /// With `head_dim = 2m`, the type axis gets `2 * ceil(m / 4)` dims and
    /// x and y split the remainder evenly; every band must hold whole pairs.
    pub fn new(head_dim: usize, theta: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(config(format!("rope head dim {head_dim} must be even and positive")));
        }
        if theta <= 1.0 || !theta.is_finite() {
            return Err(config(format!("rope theta {theta} must exceed 1")));
        }
        let m = head_dim / 2;
        let type_dims = 2 * m.div_ceil(4);
        let rest = head_dim - type_dims;
        if rest == 0 || rest % 4 != 0 {
            return Err(config(format!(
                "head dim {head_dim} leaves {rest} dims for x/y, which do not split into whole pairs"
            )));
        }
        Ok(Self {
            head_dim,
            theta,
            type_dims,
            axis_dims: rest / 2,
        })
    }

    /// `(type, x, y)` band widths.
    pub fn bands(&self) -> (usize, usize, usize) {
        (self.type_dims, self.axis_dims, self.axis_dims)
    }

    fn band_freqs(&self, dims: usize) -> impl Iterator<Item = f64> + '_ {
        (0..dims / 2).map(move |j| self.theta.powf(-2.0 * j as f64 / dims as f64))
    }

    /// Rotation angles for one coordinate, one per pair, bands in
    /// `(type, x, y)` order.
    pub fn angles(&self, c: RopeCoord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        out.extend(self.band_freqs(self.type_dims).map(|f| c.kind as f64 * f));
        out.extend(self.band_freqs(self.axis_dims).map(|f| c.x as f64 * f));
        out.extend(self.band_freqs(self.axis_dims).map(|f| c.y as f64 * f));
        out
    }

    pub fn rotation(&self, coords: &[RopeCoord]) -> PairRotation {
        let angles: Vec<f64> = coords.iter().flat_map(|&c| self.angles(c)).collect();
        PairRotation::from_angles(coords.len(), self.head_dim / 2, &angles)
            .expect("angle table sized from coords")
    }
}

/// Rotates each row of `x` (`[N, head_dim]`) by its token's coordinate.
pub fn apply_rope(x: &Tensor, coords: &[RopeCoord], cfg: &RopeConfig) -> Result<Tensor> {
    cfg.rotation(coords).apply(x)
}

//! Deterministic stand-in for a face-recognition network: per-image
//! standardization, adaptive average pooling to a fixed grid, a seeded
//! Gaussian projection and L2 normalization.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::image::Image;
use crate::numerics::{normal_init, Tape, Tensor, Var};

pub const EMBED_DIM: usize = 32;
pub const POOL: usize = 8;
pub const DEFAULT_SEED: u64 = 0x1dca_0e5e;
/// Stabilizer for the final normalization.
pub const EPS_COS: f64 = 1e-12;
/// Added to the pixel variance; small enough that the affine invariance
/// holds to rounding.
const EPS_STD: f64 = 1e-20;

/// Bins of adaptive average pooling: `[floor(i n / k), ceil((i+1) n / k))`.
fn bins(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i * n / k, ((i + 1) * n).div_ceil(k))).collect()
}

pub struct OracleEmbedder {
    seed: u64,
    projection: Tensor,
    /// Pool-then-project matrices per input extent.
    cache: Mutex<HashMap<(usize, usize), Arc<Tensor>>>,
}

impl Clone for OracleEmbedder {
    fn clone(&self) -> Self {
        Self::new(self.seed)
    }
}

impl std::fmt::Debug for OracleEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleEmbedder").field("seed", &self.seed).finish()
    }
}

impl Default for OracleEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

/// Embedding plus a flag set when the input was constant and the result
/// is not unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

impl OracleEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = POOL * POOL * 3;
        Self {
            seed,
            projection: normal_init(&mut rng, d, EMBED_DIM, 1.0 / (d as f64).sqrt()),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `[h*w*3, EMBED_DIM]`: pooling composed with the projection.
    pub fn matrix(&self, h: usize, w: usize) -> Result<Arc<Tensor>> {
        if h == 0 || w == 0 {
            return Err(contract("cannot embed an empty patch"));
        }
        let mut cache = self.cache.lock().expect("embedder cache poisoned");
        if let Some(m) = cache.get(&(h, w)) {
            return Ok(Arc::clone(m));
        }
        let (by, bx) = (bins(h, POOL), bins(w, POOL));
        let mut a = vec![0.0; h * w * 3 * EMBED_DIM];
        let proj = self.projection.data();
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let prow = &proj[((i * POOL + j) * 3 + c) * EMBED_DIM..][..EMBED_DIM];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let arow = &mut a[((y * w + x) * 3 + c) * EMBED_DIM..][..EMBED_DIM];
                            for (o, p) in arow.iter_mut().zip(prow) {
                                *o += inv * p;
                            }
                        }
                    }
                }
            }
        }
        let m = Arc::new(Tensor::matrix(h * w * 3, EMBED_DIM, a)?);
        cache.insert((h, w), Arc::clone(&m));
        Ok(m)
    }

    /// Embeds row-major `h x w x 3` values (any affine range).
    pub fn embed_values(&self, h: usize, w: usize, values: &[f64]) -> Result<Embedding> {
        if values.len() != h * w * 3 {
            return Err(contract("pixel buffer does not match extents"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + EPS_STD).sqrt();
        let m = self.matrix(h, w)?;
        let mut out = vec![0.0; EMBED_DIM];
        for (k, v) in values.iter().enumerate() {
            let s = (v - mean) * inv;
            for (o, a) in out.iter_mut().zip(m.row_slice(k)) {
                *o += s * a;
            }
        }
        let norm = (out.iter().map(|v| v * v).sum::<f64>() + EPS_COS * EPS_COS).sqrt();
        out.iter_mut().for_each(|v| *v /= norm);
        let degenerate = var <= EPS_STD;
        if degenerate {
            log::warn!("embedding a constant {h}x{w} patch; result is not unit-norm");
        }
        Ok(Embedding {
            vector: out,
            degenerate,
        })
    }

    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        self.embed_values(image.height(), image.width(), image.data())
            .map(|e| e.vector)
    }

    /// Differentiable version over a `[1, h*w*3]` row. Returns `[1, EMBED_DIM]`.
    pub fn embed_var(&self, tape: &mut Tape, pixels: Var, h: usize, w: usize) -> Result<Var> {
        if tape.value(pixels).shape() != [1, h * w * 3] {
            return Err(contract(format!(
                "embed_var expects [1, {}], got {:?}",
                h * w * 3,
                tape.value(pixels).shape()
            )));
        }
        let std = tape.layer_norm_eps(pixels, EPS_STD)?;
        let m = tape.leaf(self.matrix(h, w)?.as_ref().clone());
        let z = tape.matmul(std, m)?;
        tape.l2_normalize_rows(z, EPS_COS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pooling_bins_cover_the_extent() {
        assert_eq!(bins(16, 8)[3], (6, 8));
        let b = bins(12, 8);
        assert_eq!(b.first().unwrap().0, 0);
        assert_eq!(b.last().unwrap().1, 12);
        assert!(b.iter().all(|(a, c)| c > a));
    }

    #[test]
    fn affine_invariance_and_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = OracleEmbedder::default();
        let v: Vec<f64> = (0..12 * 12 * 3).map(|_| rng.random::<f64>()).collect();
        let a = e.embed_values(12, 12, &v).unwrap();
        let w: Vec<f64> = v.iter().map(|x| 1.5 * x + 0.1).collect();
        let b = e.embed_values(12, 12, &w).unwrap();
        let n: f64 = a.vector.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_patch_is_flagged() {
        let e = OracleEmbedder::default();
        let out = e.embed_values(8, 8, &[0.3; 192]).unwrap();
        assert!(out.degenerate);
        assert!(out.vector.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tape_version_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = OracleEmbedder::default();
        let v: Vec<f64> = (0..10 * 9 * 3).map(|_| rng.random::<f64>()).collect();
        let direct = e.embed_values(10, 9, &v).unwrap().vector;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, v.len(), v).unwrap());
        let out = e.embed_var(&mut tape, x, 10, 9).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn seed_determines_projection() {
        let img = Image::new(8, 8, (0..192).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let a = OracleEmbedder::new(1).embed(&img).unwrap();
        assert_eq!(a, OracleEmbedder::new(1).embed(&img).unwrap());
        assert_ne!(a, OracleEmbedder::new(2).embed(&img).unwrap());
    }
}

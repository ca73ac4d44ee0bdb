//! The toy diffusion transformer: AdaLN-modulated joint blocks over
//! `[text, image, identity_1..identity_n]` tokens, per-identity modulation
//! offsets and the identity-isolated attention mask.

pub mod checkpoint;
mod model;

use crate::error::{config, Result};
use crate::numerics::AttentionMask;
use crate::tokens::{Branch, RopeConfig, SequenceLayout};

pub use model::{
    from_model_space, time_embedding, to_model_space, Dit, IdentityInput, ModelInput,
    ModulationState, Triple,
};

/// Architecture hyperparameters. `d_c` equals the model width.
#[derive(Clone, Debug, PartialEq)]
pub struct DitConfig {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub vocab: usize,
    /// Length of identity embeddings fed to the offset MLP.
    pub embed_dim: usize,
    pub time_dim: usize,
    pub rope_theta: f64,
    /// Add `MLP_id(e_i)` to the conditioning of identity tokens.
    pub identity_modulation: bool,
    /// Star mask; `false` lets every token see every token.
    pub isolated_attention: bool,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            width: 32,
            heads: 2,
            blocks: 3,
            vocab: 16,
            embed_dim: 32,
            time_dim: 32,
            rope_theta: 100.0,
            identity_modulation: true,
            isolated_attention: true,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(config(format!(
                "width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if self.blocks == 0 || self.vocab == 0 || self.embed_dim == 0 {
            return Err(config("blocks, vocab and embed_dim must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(config(format!("time_dim {} must be even", self.time_dim)));
        }
        if self.patch == 0 {
            return Err(config("patch size must be positive"));
        }
        self.rope()?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.head_dim(), self.rope_theta)
    }
}

/// Text and image rows see everything; identity `i` sees text, image and
/// its own segment.
pub fn build_identity_isolated_mask(layout: &SequenceLayout) -> AttentionMask {
    let b = layout.branches();
    AttentionMask::from_fn(b.len(), |p, q| match b[p] {
        Branch::Identity(i) => b[q].is_global() || b[q] == Branch::Identity(i),
        Branch::Text | Branch::Image => true,
    })
}

pub fn build_mask(layout: &SequenceLayout, isolated: bool) -> AttentionMask {
    if isolated {
        build_identity_isolated_mask(layout)
    } else {
        AttentionMask::all_visible(layout.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::RopeCoord;

    fn layout(lens: &[usize]) -> SequenceLayout {
        let ids: Vec<Vec<RopeCoord>> = lens[2..].iter().map(|&n| vec![RopeCoord::identity(0, 0); n]).collect();
        SequenceLayout::new(lens[0], (lens[1], 1), &ids).unwrap()
    }

    #[test]
    fn no_or_one_identity_is_all_ones() {
        for lens in [&[2, 3][..], &[2, 3, 4][..]] {
            let m = build_identity_isolated_mask(&layout(lens));
            assert_eq!(m, AttentionMask::all_visible(lens.iter().sum()));
        }
    }

    #[test]
    fn three_identities_match_rule_enumeration() {
        let lens = [2, 3, 1, 2, 2];
        let l = layout(&lens);
        let m = build_identity_isolated_mask(&l);
        let seg_of = |p: usize| {
            let mut acc = 0;
            lens.iter().position(|&n| {
                acc += n;
                p < acc
            })
        };
        for p in 0..10 {
            for q in 0..10 {
                let (sp, sq) = (seg_of(p).unwrap(), seg_of(q).unwrap());
                let want = sp < 2 || sq < 2 || sp == sq;
                assert_eq!(m.allowed(p, q), want, "({p},{q})");
            }
        }
        assert!((0..10).all(|p| m.row(p).iter().any(|&a| a)));
    }

    #[test]
    fn default_config_is_valid() {
        DitConfig::default().validate().unwrap();
        let bad = DitConfig { heads: 3, ..DitConfig::default() };
        assert!(bad.validate().is_err());
    }
}

//! Scenes to model inputs: canvases, pruned tokens and embeddings.

use rand::Rng;

use crate::dit::{to_model_space, IdentityInput};
use crate::error::Result;
use crate::flow::{prepare_conditions, PreparedIdentity};
use crate::geometry::{degrade_patch, DegradationBank, FacePatch};
use crate::image::Image;
use crate::metrics::OracleEmbedder;
use crate::numerics::Tensor;
use crate::synth::{generate_dataset, identity_canvas, scene_rng, SceneConfig, SyntheticScene};

use super::config::ExperimentConfig;

/// Held-out scenes come from their own stream so every run, whatever its
/// seed, is scored on the same set.
pub const HELDOUT_SEED: u64 = 0x4e1d_0077;

/// Model-ready conditions for one identity.
#[derive(Clone, Debug)]
pub struct ConditionedIdentity {
    pub input: IdentityInput,
    /// Embedding of the conditioning reference (before degradation).
    pub embedding: Vec<f64>,
    pub dropped: bool,
    pub replaced: bool,
}

/// Builds the canvas for `reference`, optionally degraded first, prunes
/// tokens and attaches the reference embedding.
pub fn condition_identity<R: Rng>(
    cfg: &SceneConfig,
    scene: &SyntheticScene,
    slot: usize,
    prepared: &PreparedIdentity,
    bank: &DegradationBank,
    embedder: &OracleEmbedder,
    rng: &mut R,
) -> Result<ConditionedIdentity> {
    let embedding = embedder.embed(&prepared.reference)?;
    let spec = bank.sample(rng);
    let patch = degrade_patch(&FacePatch::opaque(prepared.reference.clone()), &spec, rng)?;
    let canvas = identity_canvas(cfg, &patch, &scene.identities[slot])?;
    let full = IdentityInput::from_canvas(canvas.image(), canvas.mask(), embedding.clone(), cfg.patch)?;
    let input = if prepared.dropped { full.dropped() } else { full };
    Ok(ConditionedIdentity {
        input,
        embedding,
        dropped: prepared.dropped,
        replaced: prepared.replaced,
    })
}

/// Training-time conditions: replacement with probability `p`, dropout,
/// degradation.
pub fn training_conditions<R: Rng>(
    cfg: &ExperimentConfig,
    scene: &SyntheticScene,
    p: f64,
    embedder: &OracleEmbedder,
    rng: &mut R,
) -> Result<Vec<ConditionedIdentity>> {
    let scene_cfg = cfg.scene_config();
    let bank = cfg.degradation_bank();
    let prepared = prepare_conditions(&scene.identities, p, cfg.dropout, rng)?;
    prepared
        .iter()
        .enumerate()
        .map(|(i, pr)| condition_identity(&scene_cfg, scene, i, pr, &bank, embedder, rng))
        .collect()
}

/// Inference conditions: the scene's own references, no degradation, no
/// dropout.
pub fn inference_conditions(
    cfg: &SceneConfig,
    scene: &SyntheticScene,
    embedder: &OracleEmbedder,
) -> Result<Vec<ConditionedIdentity>> {
    let bank = DegradationBank::disabled();
    let mut rng = scene_rng(0, 0);
    scene
        .identities
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let pr = PreparedIdentity {
                reference: slot.reference.clone(),
                replaced: false,
                dropped: false,
            };
            condition_identity(cfg, scene, i, &pr, &bank, embedder, &mut rng)
        })
        .collect()
}

pub fn inputs_of(conds: &[ConditionedIdentity]) -> Vec<IdentityInput> {
    conds.iter().map(|c| c.input.clone()).collect()
}

/// Clean image in model space.
pub fn scene_target(scene: &SyntheticScene, patch: usize) -> Result<Tensor> {
    to_model_space(&scene.image, patch)
}

/// Training scene `index`, regenerated on demand.
pub fn training_scene(cfg: &ExperimentConfig, index: usize) -> Result<SyntheticScene> {
    let sc = cfg.scene_config();
    let mut rng = scene_rng(cfg.seed, index);
    let n = rng.random_range(sc.n_min..=sc.n_max);
    crate::synth::generate_scene(&sc, index, n, &mut rng)
}

pub fn heldout_scenes(cfg: &ExperimentConfig) -> Result<Vec<SyntheticScene>> {
    let sc = SceneConfig {
        n_min: 2,
        n_max: 2,
        ..cfg.scene_config()
    };
    generate_dataset(&sc, HELDOUT_SEED, cfg.heldout_scenes, Some(2))
}

/// The scene with each canvas beside it, for inspection.
pub fn canvas_strip(cfg: &SceneConfig, scene: &SyntheticScene, generated: Option<&Image>) -> Result<Image> {
    let mut parts = Vec::new();
    if let Some(g) = generated {
        parts.push(g.clone());
    }
    parts.push(scene.image.clone());
    for slot in &scene.identities {
        let c = identity_canvas(cfg, &FacePatch::opaque(slot.reference.clone()), slot)?;
        parts.push(c.image().clone());
    }
    let refs: Vec<&Image> = parts.iter().collect();
    Image::hstack(&refs)
}

//! Sampling and held-out evaluation of trained models.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dit::checkpoint::{load_model, read_archive};
use crate::dit::{from_model_space, Dit, IdentityInput, ModelInput};
use crate::error::{contract, Result};
use crate::flow::{
    crop_indices, euler_sample, face_similarity_value, gaussian_like, one_step_estimate, FlowBatch, Guidance,
};
use crate::image::Image;
use crate::metrics::{cosine_sim, evaluate_run, EvalCase, EvalReport, OracleEmbedder, RankingThresholds};
use crate::numerics::Tensor;
use crate::synth::{SceneConfig, SyntheticScene};

use super::config::ExperimentConfig;
use super::data::{canvas_strip, heldout_scenes, inference_conditions, inputs_of, scene_target};
use super::manifest::Manifest;

/// Noise stream for scene `id` under `seed`.
fn noise_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id as u64);
    r
}

/// Euler-samples one image conditioned on `identities`.
pub fn sample_image(
    model: &Dit,
    cfg: &SceneConfig,
    prompt: &[usize],
    identities: &[IdentityInput],
    steps: usize,
    cfg_scale: f64,
    x1: Tensor,
) -> Result<Image> {
    let g = cfg.image_size / cfg.patch;
    let uncond = Dit::unconditional(identities);
    let mut field = |x: &Tensor, t: f64, guide: Guidance| {
        let ids = match guide {
            Guidance::Conditional => identities,
            Guidance::Unconditional => &uncond[..],
        };
        model.velocity(&ModelInput {
            x_t: x,
            grid: (g, g),
            t,
            prompt,
            identities: ids,
        })
    };
    let x0 = euler_sample(&mut field, x1, steps, cfg_scale)?;
    from_model_space(&x0, cfg.image_size, cfg.image_size, cfg.patch)
}

/// Generates `scene` from its own references with noise drawn from
/// `(seed, scene.id)`.
pub fn sample_scene(
    model: &Dit,
    cfg: &SceneConfig,
    scene: &SyntheticScene,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    embedder: &OracleEmbedder,
) -> Result<Image> {
    check_width(model, cfg)?;
    let conds = inference_conditions(cfg, scene, embedder)?;
    let shape = scene_target(scene, cfg.patch)?;
    let x1 = gaussian_like(&shape, &mut noise_rng(seed, scene.id));
    sample_image(model, cfg, &scene.prompt, &inputs_of(&conds), steps, cfg_scale, x1)
}

fn check_width(model: &Dit, cfg: &SceneConfig) -> Result<()> {
    if model.config.patch != cfg.patch {
        return Err(crate::error::config(format!(
            "model patch {} does not match scene patch {}",
            model.config.patch, cfg.patch
        )));
    }
    Ok(())
}

/// Slot-level outcome of the localization check.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationSlot {
    pub scene: usize,
    pub identity: usize,
    pub cos_own: f64,
    pub cos_other: f64,
}

impl LocalizationSlot {
    pub fn correct(&self) -> bool {
        self.cos_own > self.cos_other
    }
}

pub fn localization_fraction(slots: &[LocalizationSlot]) -> f64 {
    if slots.is_empty() {
        return 0.0;
    }
    slots.iter().filter(|s| s.correct()).count() as f64 / slots.len() as f64
}

/// For each identity `i` of a two-identity scene: cosine of the generated
/// crop at box `i` against `e_{r_i}` and against the other reference.
pub fn localization_slots(
    scene: &SyntheticScene,
    generated: &Image,
    embedder: &OracleEmbedder,
) -> Result<Vec<LocalizationSlot>> {
    if scene.identities.len() != 2 {
        return Err(contract("localization check needs two-identity scenes"));
    }
    let refs = scene
        .identities
        .iter()
        .map(|s| embedder.embed(&s.reference))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(2);
    for (i, slot) in scene.identities.iter().enumerate() {
        let g = embedder.embed(&generated.crop_rect(&slot.rect)?)?;
        out.push(LocalizationSlot {
            scene: scene.id,
            identity: i,
            cos_own: cosine_sim(&g, &refs[i])?,
            cos_other: cosine_sim(&g, &refs[1 - i])?,
        });
    }
    Ok(out)
}

/// Mean face-similarity loss of one-step estimates on `scenes`, with `t`
/// and noise drawn from `(seed, scene.id)` so different models see the
/// same inputs.
pub fn heldout_face_loss(
    model: &Dit,
    cfg: &SceneConfig,
    scenes: &[SyntheticScene],
    seed: u64,
    embedder: &OracleEmbedder,
) -> Result<f64> {
    let g = cfg.image_size / cfg.patch;
    let s = cfg.image_size;
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in scenes {
        let conds = inference_conditions(cfg, scene, embedder)?;
        let ids = inputs_of(&conds);
        let batch = FlowBatch::sample(scene_target(scene, cfg.patch)?, &mut noise_rng(seed ^ 0xf5, scene.id))?;
        let mu = model.velocity(&ModelInput {
            x_t: &batch.x_t,
            grid: (g, g),
            t: batch.t,
            prompt: &scene.prompt,
            identities: &ids,
        })?;
        let x_hat = one_step_estimate(&batch.x_t, batch.t, &mu)?;
        let mut gen = Vec::new();
        let mut refs = Vec::new();
        for (slot, c) in scene.identities.iter().zip(&conds) {
            let idx = crop_indices(&slot.rect, s, s, cfg.patch)?;
            let vals: Vec<f64> = idx.iter().map(|&k| x_hat.data()[k]).collect();
            gen.push(embedder.embed_values(slot.rect.h, slot.rect.w, &vals)?.vector);
            refs.push(c.embedding.clone());
        }
        total += face_similarity_value(&refs, &gen)? * refs.len() as f64;
        count += refs.len();
    }
    if count == 0 {
        return Err(contract("no identity slots to score"));
    }
    Ok(total / count as f64)
}

/// Held-out evaluation of one model.
#[derive(Clone, Debug)]
pub struct ModelEval {
    pub report: EvalReport,
    pub slots: Vec<LocalizationSlot>,
    pub localization: f64,
    pub heldout_l_fs: f64,
    pub images: Vec<Image>,
}

pub fn evaluate_model(
    model: &Dit,
    cfg: &ExperimentConfig,
    scenes: &[SyntheticScene],
    seed: u64,
    thresholds: &RankingThresholds,
) -> Result<ModelEval> {
    let sc = cfg.scene_config();
    let embedder = OracleEmbedder::default();
    let mut cases = Vec::with_capacity(scenes.len());
    let mut slots = Vec::new();
    let mut images = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let img = sample_scene(model, &sc, scene, cfg.sample_steps, cfg.cfg_scale, seed, &embedder)?;
        if scene.identities.len() == 2 {
            slots.extend(localization_slots(scene, &img, &embedder)?);
        }
        cases.push(EvalCase {
            case_id: scene.id,
            generated: img.clone(),
            ground_truth: scene.image.clone(),
            identities: scene.identities.iter().map(|s| (Some(s.rect), s.reference.clone())).collect(),
        });
        images.push(img);
    }
    let report = evaluate_run(&cases, &embedder, thresholds);
    Ok(ModelEval {
        report,
        localization: localization_fraction(&slots),
        slots,
        heldout_l_fs: heldout_face_loss(model, &sc, scenes, seed, &embedder)?,
        images,
    })
}

pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Dit> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Dit::new(cfg.dit_config(), &mut rng)?;
    let entries = read_archive(path)?;
    for p in model.params.iter() {
        if let Some((_, t)) = entries.iter().find(|(n, _)| *n == p.name) {
            if t.shape() != p.tensor.shape() {
                return Err(crate::error::config(format!(
                    "checkpoint `{}` has shape {:?}; the configured model needs {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
        }
    }
    load_model(&mut model, path)?;
    Ok(model)
}

/// Writes `sample_<id>.ppm` for each of the first `count` held-out scenes:
/// generated image, ground truth and every canvas side by side.
pub fn run_sample(cfg: &ExperimentConfig, checkpoint: &Path, count: usize) -> Result<Vec<Image>> {
    Manifest::new("sample", cfg).write(&cfg.out, cfg)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let sc = cfg.scene_config();
    let embedder = OracleEmbedder::default();
    let scenes = heldout_scenes(cfg)?;
    let mut out = Vec::new();
    for scene in scenes.iter().take(count) {
        let img = sample_scene(&model, &sc, scene, cfg.sample_steps, cfg.cfg_scale, cfg.seed, &embedder)?;
        canvas_strip(&sc, scene, Some(&img))?.write_ppm(cfg.out.join(format!("sample_{:04}.ppm", scene.id)))?;
        out.push(img);
    }
    Ok(out)
}

/// Scores a checkpoint on the held-out set. Writes `eval_report.csv`,
/// `localization.csv` and `eval_summary.txt`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, thresholds: &RankingThresholds) -> Result<ModelEval> {
    Manifest::new("eval", cfg).write(&cfg.out, cfg)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let scenes = heldout_scenes(cfg)?;
    let ev = evaluate_model(&model, cfg, &scenes, cfg.seed, thresholds)?;
    ev.report.write_csv(cfg.out.join("eval_report.csv"))?;
    let mut loc = String::from("scene,identity,cos_own,cos_other,correct\n");
    for s in &ev.slots {
        let _ = writeln!(loc, "{},{},{},{},{}", s.scene, s.identity, s.cos_own, s.cos_other, s.correct());
    }
    fs::write(cfg.out.join("localization.csv"), loc)?;
    fs::write(cfg.out.join("eval_summary.txt"), summary_text(&ev))?;
    Ok(ev)
}

pub fn summary_text(ev: &ModelEval) -> String {
    let o = &ev.report.overall;
    format!(
        "identities = {}\nmean_sim_gt = {}\nmean_sim_ref = {}\nmean_cp = {}\ncp_eligible = {}\nquality_eligible = {}\nlocalization = {}\nheldout_l_fs = {}\n",
        o.count,
        o.mean_sim_gt,
        o.mean_sim_ref,
        o.mean_cp,
        ev.report.views.cp.len(),
        ev.report.views.quality.len(),
        ev.localization,
        ev.heldout_l_fs
    )
}

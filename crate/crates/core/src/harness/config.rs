//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dit::DitConfig;
use crate::error::{config, Result};
use crate::flow::CurriculumSchedule;
use crate::geometry::DegradationBank;
use crate::synth::SceneConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub image_size: usize,
    pub patch: usize,
    pub face_size: usize,
    pub box_sizes: Vec<usize>,
    pub n_min: usize,
    pub n_max: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub rope_theta: f64,
    pub identity_modulation: bool,
    pub isolated_attention: bool,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch: usize,
    /// Empty means milestones at `k/7` of the run.
    pub curriculum_milestones: Vec<u64>,
    pub curriculum_probs: Vec<f64>,
    pub replacement: bool,
    pub degrade: bool,
    pub dropout: f64,
    pub seed: u64,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            face_size: 16,
            box_sizes: vec![12, 16],
            n_min: 1,
            n_max: 2,
            width: 32,
            heads: 2,
            blocks: 3,
            rope_theta: 100.0,
            identity_modulation: true,
            isolated_attention: true,
            lambda: 0.1,
            lr: 1e-3,
            weight_decay: 1e-3,
            steps: 3000,
            batch: 8,
            curriculum_milestones: Vec::new(),
            curriculum_probs: crate::flow::DEFAULT_PROBS.to_vec(),
            replacement: true,
            degrade: true,
            dropout: 0.15,
            seed: 0,
            train_scenes: 4096,
            heldout_scenes: 50,
            sample_steps: 28,
            cfg_scale: 1.0,
            checkpoint_every: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| config(format!("bad list item `{s}` for `{key}`"))))
        .collect()
}

fn scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| config(format!("bad value `{v}` for `{key}`")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "image_size" => self.image_size = scalar(key, v)?,
            "patch" => self.patch = scalar(key, v)?,
            "face_size" => self.face_size = scalar(key, v)?,
            "box_sizes" => self.box_sizes = list(key, v)?,
            "n_min" => self.n_min = scalar(key, v)?,
            "n_max" => self.n_max = scalar(key, v)?,
            "width" => self.width = scalar(key, v)?,
            "heads" => self.heads = scalar(key, v)?,
            "blocks" => self.blocks = scalar(key, v)?,
            "rope_theta" => self.rope_theta = scalar(key, v)?,
            "identity_modulation" => self.identity_modulation = scalar(key, v)?,
            "isolated_attention" => self.isolated_attention = scalar(key, v)?,
            "lambda" => self.lambda = scalar(key, v)?,
            "lr" => self.lr = scalar(key, v)?,
            "weight_decay" => self.weight_decay = scalar(key, v)?,
            "steps" => self.steps = scalar(key, v)?,
            "batch" => self.batch = scalar(key, v)?,
            "curriculum_milestones" => self.curriculum_milestones = list(key, v)?,
            "curriculum_probs" => self.curriculum_probs = list(key, v)?,
            "replacement" => self.replacement = scalar(key, v)?,
            "degrade" => self.degrade = scalar(key, v)?,
            "dropout" => self.dropout = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "train_scenes" => self.train_scenes = scalar(key, v)?,
            "heldout_scenes" => self.heldout_scenes = scalar(key, v)?,
            "sample_steps" => self.sample_steps = scalar(key, v)?,
            "cfg_scale" => self.cfg_scale = scalar(key, v)?,
            "checkpoint_every" => self.checkpoint_every = scalar(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key in a fixed order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("image_size", self.image_size.to_string());
        m.insert("patch", self.patch.to_string());
        m.insert("face_size", self.face_size.to_string());
        m.insert("box_sizes", join(&self.box_sizes));
        m.insert("n_min", self.n_min.to_string());
        m.insert("n_max", self.n_max.to_string());
        m.insert("width", self.width.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("blocks", self.blocks.to_string());
        m.insert("rope_theta", self.rope_theta.to_string());
        m.insert("identity_modulation", self.identity_modulation.to_string());
        m.insert("isolated_attention", self.isolated_attention.to_string());
        m.insert("lambda", self.lambda.to_string());
        m.insert("lr", self.lr.to_string());
        m.insert("weight_decay", self.weight_decay.to_string());
        m.insert("steps", self.steps.to_string());
        m.insert("batch", self.batch.to_string());
        m.insert("curriculum_milestones", join(&self.curriculum_milestones));
        m.insert("curriculum_probs", join(&self.curriculum_probs));
        m.insert("replacement", self.replacement.to_string());
        m.insert("degrade", self.degrade.to_string());
        m.insert("dropout", self.dropout.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("train_scenes", self.train_scenes.to_string());
        m.insert("heldout_scenes", self.heldout_scenes.to_string());
        m.insert("sample_steps", self.sample_steps.to_string());
        m.insert("cfg_scale", self.cfg_scale.to_string());
        m.insert("checkpoint_every", self.checkpoint_every.to_string());
        m.insert("out", self.out.display().to_string());
        m
    }

    /// Canonical text; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.dit_config().validate()?;
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(config(format!("lambda {} must be a nonnegative number", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(config(format!("dropout {} outside [0,1]", self.dropout)));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(config("lr must be positive and weight_decay nonnegative"));
        }
        if self.batch == 0 || self.train_scenes == 0 {
            return Err(config("batch and train_scenes must be positive"));
        }
        if self.sample_steps == 0 {
            return Err(config("sample_steps must be at least 1"));
        }
        self.curriculum()?;
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size,
            patch: self.patch,
            face_size: self.face_size,
            box_sizes: self.box_sizes.clone(),
            n_min: self.n_min,
            n_max: self.n_max,
            ..SceneConfig::default()
        }
    }

    pub fn dit_config(&self) -> DitConfig {
        DitConfig {
            patch: self.patch,
            width: self.width,
            heads: self.heads,
            blocks: self.blocks,
            rope_theta: self.rope_theta,
            identity_modulation: self.identity_modulation,
            isolated_attention: self.isolated_attention,
            ..DitConfig::default()
        }
    }

    /// Replacement probability schedule; constant zero when replacement is
    /// off.
    pub fn curriculum(&self) -> Result<CurriculumSchedule> {
        if !self.replacement {
            return CurriculumSchedule::fixed(0.0);
        }
        if self.curriculum_milestones.is_empty() && self.curriculum_probs.len() == 7 {
            let c = CurriculumSchedule::compressed(self.steps)?;
            return CurriculumSchedule::new(c.milestones, self.curriculum_probs.clone());
        }
        CurriculumSchedule::new(self.curriculum_milestones.clone(), self.curriculum_probs.clone())
    }

    pub fn degradation_bank(&self) -> DegradationBank {
        if self.degrade {
            DegradationBank::default()
        } else {
            DegradationBank::disabled()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("lambda = 0.5\nbox_sizes = 8, 12 # comment\n\nsteps=10").unwrap();
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.box_sizes, vec![8, 12]);
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ExperimentConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("steps", "-3").is_err());
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let c = ExperimentConfig { dropout: 1.5, ..ExperimentConfig::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { image_size: 30, ..ExperimentConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_curriculum_is_compressed() {
        let c = ExperimentConfig { steps: 700, ..ExperimentConfig::default() };
        let s = c.curriculum().unwrap();
        assert_eq!(s.probability(99), 0.0);
        assert_eq!(s.probability(100), 0.05);
        assert_eq!(s.probability(600), 0.5);
        let off = ExperimentConfig { replacement: false, ..c };
        assert_eq!(off.curriculum().unwrap().probability(10_000), 0.0);
    }
}

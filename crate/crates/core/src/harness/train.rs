//! The training loop: per-sample tapes, ordered gradient reduction, AdamW,
//! CSV logs, checkpoints and exact resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dit::checkpoint::{load_training, save_training};
use crate::dit::{Dit, IdentityInput, ModelInput};
use crate::error::{config, Error, Result};
use crate::flow::{
    cfm_loss, crop_face, face_similarity_term, one_step_estimate_var, total_loss, CurriculumSchedule, FlowBatch,
};
use crate::image::Rect;
use crate::metrics::OracleEmbedder;
use crate::numerics::{AdamW, Tape};

use super::config::ExperimentConfig;
use super::data::{inputs_of, scene_target, training_conditions, training_scene};
use super::manifest::Manifest;

pub const TRAIN_LOG: &str = "train_log.csv";
/// Same rows without wallclock, for bit-exact comparison across reruns.
pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const TRAIN_HEADER: &str = "step,L_fm,L_fs,L,p_replace,wallclock_s\n";
const LOSS_HEADER: &str = "step,L_fm,L_fs,L,p_replace\n";

const INIT_STREAM: u64 = u64::MAX;
const MASTER_STREAM: u64 = u64::MAX - 1;

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_fm: f64,
    /// Mean over non-dropped identity slots; zero when every slot was
    /// dropped.
    pub l_fs: f64,
    pub l: f64,
    pub p_replace: f64,
    pub wallclock_s: f64,
}

impl StepRecord {
    pub fn loss_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_fm, self.l_fs, self.l, self.p_replace)
    }
}

/// Everything drawn for one sample before any model evaluation.
struct Draw {
    scene_index: usize,
    batch: FlowBatch,
    prompt: Vec<usize>,
    identities: Vec<IdentityInput>,
    /// `(box, target embedding)` of every non-dropped identity.
    slots: Vec<(Rect, Vec<f64>)>,
}

struct SampleOut {
    l_fm: f64,
    l_fs_sum: f64,
    grads: Vec<Vec<f64>>,
}

pub fn worker_threads() -> usize {
    std::env::var("IDCANVAS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn master_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(MASTER_STREAM);
    r
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: Dit,
    pub opt: AdamW,
    pub step: u64,
    rng: ChaCha8Rng,
    schedule: CurriculumSchedule,
    embedder: OracleEmbedder,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(INIT_STREAM);
        let model = Dit::new(cfg.dit_config(), &mut init)?;
        let opt = AdamW::new(&model.params, cfg.lr, (0.9, 0.95), cfg.weight_decay);
        let threads = worker_threads();
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            schedule: cfg.curriculum()?,
            rng: master_rng(cfg.seed),
            cfg,
            model,
            opt,
            step: 0,
            embedder: OracleEmbedder::default(),
            pool,
        })
    }

    pub fn schedule(&self) -> &CurriculumSchedule {
        &self.schedule
    }

    fn draw(&self, seed: u64, scene_index: usize, p: f64) -> Result<Draw> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = training_scene(&self.cfg, scene_index)?;
        let conds = training_conditions(&self.cfg, &scene, p, &self.embedder, &mut rng)?;
        let batch = FlowBatch::sample(scene_target(&scene, self.cfg.patch)?, &mut rng)?;
        let slots = conds
            .iter()
            .zip(&scene.identities)
            .filter(|(c, _)| !c.dropped)
            .map(|(c, s)| (s.rect, c.embedding.clone()))
            .collect();
        Ok(Draw {
            scene_index,
            batch,
            prompt: scene.prompt.clone(),
            identities: inputs_of(&conds),
            slots,
        })
    }

    fn sample_gradients(&self, d: &Draw, batch_size: usize, total_slots: usize) -> Result<SampleOut> {
        let g = self.cfg.image_size / self.cfg.patch;
        let input = ModelInput {
            x_t: &d.batch.x_t,
            grid: (g, g),
            t: d.batch.t,
            prompt: &d.prompt,
            identities: &d.identities,
        };
        let mut tape = Tape::new();
        let mu = self.model.forward(&mut tape, &input)?;
        let target = tape.leaf(d.batch.target.clone());
        let l_fm = cfm_loss(&mut tape, mu, target)?;
        let mut loss = tape.scale(l_fm, 1.0 / batch_size as f64);
        let mut l_fs_sum = 0.0;
        if !d.slots.is_empty() {
            let xt = tape.leaf(d.batch.x_t.clone());
            let x_hat = one_step_estimate_var(&mut tape, xt, d.batch.t, mu)?;
            let s = self.cfg.image_size;
            let mut terms = Vec::with_capacity(d.slots.len());
            for (rect, e) in &d.slots {
                let crop = crop_face(&mut tape, x_hat, rect, s, s, self.cfg.patch)?;
                terms.push(face_similarity_term(&mut tape, &self.embedder, crop, rect, e)?);
            }
            let all = tape.concat_rows(&terms)?;
            let sum = tape.sum(all);
            l_fs_sum = tape.value(sum).item();
            if self.cfg.lambda > 0.0 {
                let w = tape.scale(sum, self.cfg.lambda / total_slots as f64);
                loss = tape.add(loss, w)?;
            }
        }
        let grads_all = tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = self.model.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        for (id, gr) in grads_all.param_grads(&tape) {
            for (a, b) in grads[id.0].iter_mut().zip(gr) {
                *a += b;
            }
        }
        Ok(SampleOut {
            l_fm: tape.value(l_fm).item(),
            l_fs_sum,
            grads,
        })
    }

    /// One optimizer step over a fresh batch.
    pub fn step_once(&mut self, started: Instant) -> Result<StepRecord> {
        let p = self.schedule.probability(self.step);
        let b = self.cfg.batch;
        let mut plan = Vec::with_capacity(b);
        for _ in 0..b {
            let seed: u64 = self.rng.random();
            let index = self.rng.random_range(0..self.cfg.train_scenes);
            plan.push((seed, index));
        }
        let draws = plan
            .iter()
            .map(|&(s, i)| self.draw(s, i, p))
            .collect::<Result<Vec<_>>>()?;
        let total_slots: usize = draws.iter().map(|d| d.slots.len()).sum();
        let outs: Vec<Result<SampleOut>> = match &self.pool {
            Some(pool) => pool.install(|| {
                draws
                    .par_iter()
                    .map(|d| self.sample_gradients(d, b, total_slots))
                    .collect()
            }),
            None => draws.iter().map(|d| self.sample_gradients(d, b, total_slots)).collect(),
        };
        let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;

        let l_fm = outs.iter().map(|o| o.l_fm).sum::<f64>() / b as f64;
        let l_fs = if total_slots > 0 {
            outs.iter().map(|o| o.l_fs_sum).sum::<f64>() / total_slots as f64
        } else {
            0.0
        };
        let l = total_loss(l_fm, l_fs, self.cfg.lambda)?;
        if !l.is_finite() || outs.iter().any(|o| o.grads.iter().flatten().any(|g| !g.is_finite())) {
            let path = self.dump_batch(&draws, &outs)?;
            return Err(Error::NonFinite(format!(
                "loss {l} at step {}; batch written to {}",
                self.step + 1,
                path.display()
            )));
        }
        for (i, p) in self.model.params.iter_mut().enumerate() {
            let acc = p.tensor.grad_mut();
            acc.iter_mut().for_each(|v| *v = 0.0);
            for o in &outs {
                for (a, g) in acc.iter_mut().zip(&o.grads[i]) {
                    *a += g;
                }
            }
        }
        self.opt.update(&mut self.model.params);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            l_fm,
            l_fs,
            l,
            p_replace: p,
            wallclock_s: started.elapsed().as_secs_f64(),
        })
    }

    fn dump_batch(&self, draws: &[Draw], outs: &[SampleOut]) -> Result<PathBuf> {
        fs::create_dir_all(&self.cfg.out)?;
        let path = self.cfg.out.join(format!("nonfinite_step{}.txt", self.step + 1));
        let mut s = String::from("sample,scene_index,t,n_slots,l_fm,l_fs_sum,nonfinite_grads\n");
        for (k, (d, o)) in draws.iter().zip(outs).enumerate() {
            let bad = o.grads.iter().flatten().filter(|g| !g.is_finite()).count();
            let _ = writeln!(s, "{k},{},{},{},{},{},{bad}", d.scene_index, d.batch.t, d.slots.len(), o.l_fm, o.l_fs_sum);
        }
        fs::write(&path, s)?;
        Ok(path)
    }

    /// Parameters and optimizer state, plus a `.rng` sidecar holding the
    /// data stream position.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        save_training(&self.model, &self.opt, path)?;
        let side = format!(
            "seed = {}\nstep = {}\nword_pos = {}\n",
            self.cfg.seed,
            self.step,
            self.rng.get_word_pos()
        );
        fs::write(rng_sidecar(path), side)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`] under the same config.
    pub fn resume(cfg: ExperimentConfig, path: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        load_training(&mut t.model, &mut t.opt, path)?;
        let side = fs::read_to_string(rng_sidecar(path))?;
        let mut seed = None;
        let mut step = None;
        let mut word_pos = None;
        for line in side.lines() {
            if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "seed" => seed = v.parse::<u64>().ok(),
                    "step" => step = v.parse::<u64>().ok(),
                    "word_pos" => word_pos = v.parse::<u128>().ok(),
                    _ => {}
                }
            }
        }
        let (Some(seed), Some(step), Some(word_pos)) = (seed, step, word_pos) else {
            return Err(Error::Checkpoint("incomplete rng sidecar".into()));
        };
        if seed != t.cfg.seed {
            return Err(config(format!("checkpoint seed {seed} differs from config seed {}", t.cfg.seed)));
        }
        t.rng.set_word_pos(word_pos);
        t.step = step;
        Ok(t)
    }
}

pub fn rng_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".rng");
    PathBuf::from(s)
}

pub struct TrainOutcome {
    pub model: Dit,
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

fn keep_rows(path: &Path, header: &str, upto: u64) -> Result<String> {
    let mut out = header.to_string();
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if step.is_some_and(|s| s <= upto) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Trains `cfg.steps` steps (continuing from `resume` if given), writing
/// the manifest first, then logs, periodic checkpoints and `final.ckpt`.
pub fn run_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.out.clone();
    Manifest::new("train", cfg).write(&dir, cfg)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), p)?,
        None => Trainer::new(cfg.clone())?,
    };
    let mut train_log = keep_rows(&dir.join(TRAIN_LOG), TRAIN_HEADER, trainer.step)?;
    let mut loss_log = keep_rows(&dir.join(LOSS_LOG), LOSS_HEADER, trainer.step)?;
    if resume.is_none() {
        train_log = TRAIN_HEADER.into();
        loss_log = LOSS_HEADER.into();
    }
    let started = Instant::now();
    let mut records = Vec::new();
    while trainer.step < cfg.steps {
        let r = trainer.step_once(started)?;
        let _ = writeln!(train_log, "{},{}", r.loss_row(), r.wallclock_s);
        let _ = writeln!(loss_log, "{}", r.loss_row());
        if r.step % 100 == 0 || r.step == cfg.steps {
            log::info!("step {} L_fm {:.4} L_fs {:.4} p {:.2}", r.step, r.l_fm, r.l_fs, r.p_replace);
            fs::write(dir.join(TRAIN_LOG), &train_log)?;
            fs::write(dir.join(LOSS_LOG), &loss_log)?;
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
            trainer.save(&dir.join("checkpoints").join(format!("step{:07}.ckpt", r.step)))?;
        }
        records.push(r);
    }
    fs::write(dir.join(TRAIN_LOG), &train_log)?;
    fs::write(dir.join(LOSS_LOG), &loss_log)?;
    let checkpoint = dir.join(FINAL_CHECKPOINT);
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        model: trainer.model,
        records,
        checkpoint,
    })
}

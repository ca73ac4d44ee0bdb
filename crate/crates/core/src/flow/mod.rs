//! Flow-matching objectives, the face-similarity regularizer, reference
//! replacement and dropout, the curriculum and the Euler sampler.

pub mod toy2d;

use std::rc::Rc;

use rand::Rng;

use crate::error::{config, contract, Result};
use crate::image::{Image, Rect};
use crate::metrics::OracleEmbedder;
use crate::numerics::{Tape, Tensor, Var};
use crate::synth::{render_identity, IdentitySlot, Nuisance};
use crate::tokens::patch_index;

/// Training-step record. Images are in patch layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub target: Tensor,
}

impl FlowBatch {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        let x_t = interpolate(&x0, &x1, t)?;
        let target = x1.zip_map(&x0, |a, b| a - b)?;
        Ok(Self {
            x0,
            x1,
            t,
            x_t,
            target,
        })
    }

    /// Draws `x1 ~ N(0, I)` and `t ~ U[0,1]`.
    pub fn sample<R: Rng>(x0: Tensor, rng: &mut R) -> Result<Self> {
        let x1 = gaussian_like(&x0, rng);
        let t = rng.random::<f64>();
        Self::new(x0, x1, t)
    }
}

pub fn gaussian_like<R: Rng>(x: &Tensor, rng: &mut R) -> Tensor {
    let data = (0..x.numel())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape copied")
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(contract(format!("t = {t} outside [0,1]")));
    }
    Ok(())
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// Mean over entries of `(prediction - target)^2`.
pub fn cfm_loss(tape: &mut Tape, prediction: Var, target: Var) -> Result<Var> {
    let d = tape.sub(prediction, target)?;
    Ok(tape.mean_square(d))
}

pub fn cfm_loss_value(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    let d = prediction.zip_map(target, |a, b| a - b)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64)
}

/// `x_t - t * mu`.
pub fn one_step_estimate(x_t: &Tensor, t: f64, mu: &Tensor) -> Result<Tensor> {
    check_t(t)?;
    x_t.zip_map(mu, |x, m| x - t * m)
}

pub fn one_step_estimate_var(tape: &mut Tape, x_t: Var, t: f64, mu: Var) -> Result<Var> {
    check_t(t)?;
    let s = tape.scale(mu, t);
    tape.sub(x_t, s)
}

/// Flat indices (into a patch-layout image) of the pixels inside `rect`,
/// row-major `(y, x, channel)`.
pub fn crop_indices(rect: &Rect, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if !rect.fits_in(h, w) {
        return Err(contract(format!("crop box {rect:?} outside {h}x{w} image")));
    }
    let all = patch_index(h, w, p)?;
    let mut out = Vec::with_capacity(rect.w * rect.h * 3);
    for y in rect.y..rect.y + rect.h {
        let o = (y * w + rect.x) * 3;
        out.extend_from_slice(&all[o..o + rect.w * 3]);
    }
    Ok(out)
}

/// Pure slice of the box region of a patch-layout image, as a
/// `[1, rect.h * rect.w * 3]` row.
pub fn crop_face(tape: &mut Tape, x_hat: Var, rect: &Rect, h: usize, w: usize, p: usize) -> Result<Var> {
    if tape.value(x_hat).numel() != h * w * 3 {
        return Err(contract("image does not match the stated extents"));
    }
    let idx = crop_indices(rect, h, w, p)?;
    let n = idx.len();
    tape.gather(x_hat, Rc::new(idx), vec![1, n])
}

/// `1 - cos` for one `[1, rect.h * rect.w * 3]` crop against a unit
/// reference embedding.
pub fn face_similarity_term(tape: &mut Tape, embedder: &OracleEmbedder, crop: Var, rect: &Rect, reference: &[f64]) -> Result<Var> {
    let e = embedder.embed_var(tape, crop, rect.h, rect.w)?;
    let r = tape.leaf(Tensor::row(reference));
    let prod = tape.mul(e, r)?;
    let cos = tape.sum(prod);
    let neg = tape.scale(cos, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `(1/n) sum_i (1 - cos(e_ref_i, E(crop_i)))` where each crop is a
/// `[1, h*w*3]` row with its box.
pub fn face_similarity_loss(
    tape: &mut Tape,
    embedder: &OracleEmbedder,
    crops: &[(Var, Rect)],
    references: &[Vec<f64>],
) -> Result<Var> {
    if crops.is_empty() || crops.len() != references.len() {
        return Err(contract("face similarity needs one reference per crop, at least one"));
    }
    let mut terms = Vec::with_capacity(crops.len());
    for ((crop, rect), r) in crops.iter().zip(references) {
        terms.push(face_similarity_term(tape, embedder, *crop, rect, r)?);
    }
    let all = tape.concat_rows(&terms)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, 1.0 / crops.len() as f64))
}

/// Same value from precomputed embeddings.
pub fn face_similarity_value(references: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    if references.is_empty() || references.len() != generated.len() {
        return Err(contract("face similarity needs matching, non-empty embedding lists"));
    }
    let mut acc = 0.0;
    for (r, g) in references.iter().zip(generated) {
        let dot: f64 = r.iter().zip(g).map(|(a, b)| a * b).sum();
        acc += 1.0 - dot;
    }
    Ok(acc / references.len() as f64)
}

pub fn total_loss(l_fm: f64, l_fs: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(contract(format!("lambda {lambda} must be nonnegative")));
    }
    Ok(l_fm + lambda * l_fs)
}

/// Piecewise-constant replacement probability: `probs[k]` holds on
/// `[milestones[k-1], milestones[k])`, with `milestones[-1] = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSchedule {
    pub milestones: Vec<u64>,
    pub probs: Vec<f64>,
}

pub const DEFAULT_PROBS: [f64; 7] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];

impl CurriculumSchedule {
    pub fn new(milestones: Vec<u64>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != milestones.len() + 1 {
            return Err(config(format!(
                "{} probabilities need {} milestones, got {}",
                probs.len(),
                probs.len().saturating_sub(1),
                milestones.len()
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(config("curriculum probabilities must lie in [0,1]"));
        }
        if probs.windows(2).any(|w| w[1] < w[0]) {
            return Err(config("curriculum probabilities must be nondecreasing"));
        }
        if milestones.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config("curriculum milestones must be strictly increasing"));
        }
        Ok(Self { milestones, probs })
    }

    /// Milestones every 10k steps.
    pub fn standard() -> Self {
        Self::new((1..=6).map(|k| k * 10_000).collect(), DEFAULT_PROBS.to_vec()).expect("valid")
    }

    /// The standard probabilities with milestones at `k/7` of the run.
    /// Runs shorter than seven steps get milestones one step apart.
    pub fn compressed(total_steps: u64) -> Result<Self> {
        let mut m: Vec<u64> = Vec::with_capacity(6);
        for k in 1..=6 {
            let prev = m.last().copied().unwrap_or(0);
            m.push((k * total_steps / 7).max(prev + 1));
        }
        Self::new(m, DEFAULT_PROBS.to_vec())
    }

    pub fn fixed(p: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![p])
    }

    pub fn probability(&self, step: u64) -> f64 {
        let k = self.milestones.iter().take_while(|&&m| m <= step).count();
        self.probs[k]
    }
}

/// Conditioning reference for one identity after replacement and dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedIdentity {
    pub reference: Image,
    pub replaced: bool,
    pub dropped: bool,
}

/// Each identity's reference is replaced, with probability `p`, by a fresh
/// render of the same identity vector; independently each identity is
/// dropped with probability `dropout_rate`.
pub fn prepare_conditions<R: Rng>(
    identities: &[IdentitySlot],
    p: f64,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<Vec<PreparedIdentity>> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&dropout_rate) {
        return Err(contract("replacement and dropout probabilities must lie in [0,1]"));
    }
    let mut out = Vec::with_capacity(identities.len());
    for slot in identities {
        let replaced = rng.random::<f64>() < p;
        let reference = if replaced {
            let n = Nuisance::sample(rng);
            render_identity(&slot.z, slot.reference.height(), slot.reference.width(), &n)
        } else {
            slot.reference.clone()
        };
        let dropped = rng.random::<f64>() < dropout_rate;
        out.push(PreparedIdentity {
            reference,
            replaced,
            dropped,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    Conditional,
    Unconditional,
}

/// Integrates `dx/dt = mu(x, t)` from `t = 1` to `t = 0` with `steps`
/// uniform Euler steps. At `cfg_scale == 1` only the conditional branch is
/// evaluated; otherwise `mu = mu_u + s (mu_c - mu_u)`.
pub fn euler_sample(
    velocity: &mut dyn FnMut(&Tensor, f64, Guidance) -> Result<Tensor>,
    x1: Tensor,
    steps: usize,
    cfg_scale: f64,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(contract("sampling needs at least one step"));
    }
    let mut x = x1;
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * h;
        let mu = if cfg_scale == 1.0 {
            velocity(&x, t, Guidance::Conditional)?
        } else {
            let c = velocity(&x, t, Guidance::Conditional)?;
            let u = velocity(&x, t, Guidance::Unconditional)?;
            u.zip_map(&c, |a, b| a + cfg_scale * (b - a))?
        };
        x = x.zip_map(&mu, |a, m| a - h * m)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn curriculum_table() {
        let s = CurriculumSchedule::standard();
        let cases = [
            (0, 0.0),
            (9_999, 0.0),
            (10_000, 0.05),
            (15_000, 0.05),
            (20_000, 0.1),
            (30_000, 0.2),
            (40_000, 0.3),
            (50_000, 0.4),
            (60_000, 0.5),
            (1_000_000, 0.5),
        ];
        for (step, p) in cases {
            assert_eq!(s.probability(step), p, "step {step}");
        }
    }

    #[test]
    fn curriculum_validation() {
        assert!(CurriculumSchedule::new(vec![5], vec![0.5, 0.1]).is_err());
        assert!(CurriculumSchedule::new(vec![5, 5], vec![0.0, 0.1, 0.2]).is_err());
        assert!(CurriculumSchedule::new(vec![], vec![0.0, 0.1]).is_err());
        let c = CurriculumSchedule::compressed(700).unwrap();
        assert_eq!(c.milestones, vec![100, 200, 300, 400, 500, 600]);
        assert_eq!(CurriculumSchedule::compressed(3).unwrap().milestones, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(CurriculumSchedule::fixed(0.5).unwrap().probability(123), 0.5);
    }

    #[test]
    fn single_step_with_exact_velocity_recovers_x0() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = gaussian_like(&Tensor::zeros(&[4, 3]), &mut rng);
        let x1 = gaussian_like(&x0, &mut rng);
        let v = x1.zip_map(&x0, |a, b| a - b).unwrap();
        let out = euler_sample(&mut |_, _, _| Ok(v.clone()), x1, 1, 1.0).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-15);
    }

    #[test]
    fn euler_is_first_order() {
        // dx/dt = a x, integrated back from x(1) = 1: x(0) = exp(-a).
        let a = 0.8;
        let err = |steps: usize| {
            let out = euler_sample(&mut |x, _, _| Ok(x.map(|v| a * v)), Tensor::scalar(1.0), steps, 1.0).unwrap();
            (out.item() - (-a).exp()).abs()
        };
        for n in [20, 40, 80] {
            let ratio = err(n) / err(2 * n);
            assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio} at {n}");
        }
    }

    #[test]
    fn unit_cfg_is_single_branch() {
        let mut calls = Vec::new();
        let x1 = Tensor::filled(&[2, 2], 0.3);
        let mut f = |x: &Tensor, t: f64, g: Guidance| {
            calls.push(g);
            Ok(x.map(|v| v * t + 0.1))
        };
        let a = euler_sample(&mut f, x1.clone(), 5, 1.0).unwrap();
        assert!(calls.iter().all(|&g| g == Guidance::Conditional));
        assert_eq!(calls.len(), 5);
        let b = euler_sample(&mut |x, t, _| Ok(x.map(|v| v * t + 0.1)), x1, 5, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.7, 0.3, 0.0).unwrap(), 0.7);
        assert!((total_loss(1.0, 0.5, 0.1).unwrap() - 1.05).abs() < 1e-15);
        assert!(total_loss(1.0, 0.5, -0.1).is_err());
    }
}

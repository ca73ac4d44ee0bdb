//! Two-dimensional flow-matching sanity problem: a small velocity MLP
//! trained on a mixture of two Gaussians.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::numerics::{normal_init, AdamW, ParamId, ParamStore, Tape, Tensor, Var};

use super::{euler_sample, gaussian_like};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub width: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sample_steps: usize,
    pub means: [[f64; 2]; 2],
    pub std: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            width: 32,
            steps: 5000,
            batch: 256,
            lr: 3e-3,
            sample_steps: 100,
            means: [[-2.0, 0.0], [2.0, 0.0]],
            std: 0.5,
        }
    }
}

/// Equal-weight mixture draws, `[n, 2]`.
pub fn sample_mixture<R: Rng>(cfg: &ToyConfig, n: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let m = cfg.means[rng.random_range(0..2)];
        for c in m {
            data.push(c + cfg.std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Tensor::matrix(n, 2, data).expect("sized")
}

/// Velocity field on `[x, y, t]` with two GELU hidden layers.
pub struct VelocityMlp {
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl VelocityMlp {
    pub fn new<R: Rng>(width: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for (i, (fi, fo)) in [(3, width), (width, width), (width, 2)].into_iter().enumerate() {
            let w = params.add(format!("fc{i}.w"), normal_init(rng, fi, fo, 1.0 / (fi as f64).sqrt()))?;
            let b = params.add(format!("fc{i}.b"), Tensor::zeros(&[1, fo]))?;
            layers.push((w, b));
        }
        Ok(Self { params, layers })
    }

    fn forward_var(&self, tape: &mut Tape, x: &Tensor, t: &[f64]) -> Result<Var> {
        let n = x.rows();
        if t.len() != n || x.cols() != 2 {
            return Err(contract("toy velocity expects [n, 2] points and n times"));
        }
        let mut input = Vec::with_capacity(3 * n);
        for (r, &tr) in t.iter().enumerate() {
            input.extend_from_slice(x.row_slice(r));
            input.push(tr);
        }
        let mut h = tape.leaf(Tensor::matrix(n, 3, input)?);
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (tape.param(&self.params, w), tape.param(&self.params, b));
            h = tape.linear(h, wv, bv)?;
            if k + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.forward_var(&mut tape, x, &vec![t; x.rows()])?;
        Ok(tape.value(v).clone())
    }
}

/// Trains a velocity field for `cfg.steps` steps with AdamW and a cosine
/// learning-rate decay. Returns the model and the final-step loss.
pub fn train_toy(cfg: &ToyConfig, seed: u64) -> Result<(VelocityMlp, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VelocityMlp::new(cfg.width, &mut rng)?;
    let mut opt = AdamW::new(&model.params, cfg.lr, (0.9, 0.999), 0.0);
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let x0 = sample_mixture(cfg, cfg.batch, &mut rng);
        let x1 = gaussian_like(&x0, &mut rng);
        let t: Vec<f64> = (0..cfg.batch).map(|_| rng.random::<f64>()).collect();
        let mut xt = x0.clone();
        for (r, &tr) in t.iter().enumerate() {
            for c in 0..2 {
                xt.set(r, c, (1.0 - tr) * x0.get(r, c) + tr * x1.get(r, c));
            }
        }
        let target = x1.zip_map(&x0, |a, b| a - b)?;
        let mut tape = Tape::new();
        let pred = model.forward_var(&mut tape, &xt, &t)?;
        let tv = tape.leaf(target);
        let loss = super::cfm_loss(&mut tape, pred, tv)?;
        last = tape.value(loss).item();
        tape.backward(loss)?.accumulate_into(&tape, &mut model.params);
        opt.update(&mut model.params);
    }
    Ok((model, last))
}

/// Integrates the learned field from `n` noise draws.
pub fn sample_toy(model: &VelocityMlp, n: usize, steps: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let x1 = gaussian_like(&Tensor::zeros(&[n, 2]), rng);
    euler_sample(&mut |x, t, _| model.velocity(x, t), x1, steps, 1.0)
}

fn mean_pair_distance(a: &Tensor, b: &Tensor, same: bool) -> f64 {
    let (na, nb) = (a.rows(), b.rows());
    let (ad, bd) = (a.data(), b.data());
    let mut acc = 0.0;
    for i in 0..na {
        let (x, y) = (ad[2 * i], ad[2 * i + 1]);
        let mut row = 0.0;
        for j in 0..nb {
            let (dx, dy) = (x - bd[2 * j], y - bd[2 * j + 1]);
            row += (dx * dx + dy * dy).sqrt();
        }
        acc += row;
    }
    // Zero diagonal terms are dropped from the same-sample averages.
    let pairs = if same { na * (na - 1) } else { na * nb };
    acc / pairs as f64
}

/// `sqrt(2 E|X-Y| - E|X-X'| - E|Y-Y'|)` for 2-D samples, with unbiased
/// within-sample means. Negative estimates clamp to zero.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.cols() != 2 || y.cols() != 2 || x.rows() < 2 || y.rows() < 2 {
        return Err(contract("energy distance needs at least two 2-D points per sample"));
    }
    let xy = mean_pair_distance(x, y, false);
    let xx = mean_pair_distance(x, x, true);
    let yy = mean_pair_distance(y, y, true);
    Ok((2.0 * xy - xx - yy).max(0.0).sqrt())
}

/// Trains on `seed`, samples 4096 points and compares them with 4096
/// fresh mixture draws.
pub fn toy_energy_distance(cfg: &ToyConfig, seed: u64, n: usize) -> Result<f64> {
    let (model, _) = train_toy(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let gen = sample_toy(&model, n, cfg.sample_steps, &mut rng)?;
    let target = sample_mixture(cfg, n, &mut rng);
    energy_distance(&gen, &target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_distance_of_shifted_points() {
        let a = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0, 3.0, 1.0, 3.0]).unwrap();
        // cross mean (3 + 3 + sqrt10 + sqrt10)/4; within means 1.
        let xy = (6.0 + 2.0 * 10f64.sqrt()) / 4.0;
        let want = (2.0 * xy - 2.0).sqrt();
        assert!((energy_distance(&a, &b).unwrap() - want).abs() < 1e-12);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn same_distribution_is_near_zero() {
        let cfg = ToyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = sample_mixture(&cfg, 2000, &mut rng);
        let b = sample_mixture(&cfg, 2000, &mut rng);
        assert!(energy_distance(&a, &b).unwrap() < 0.04);
    }
}

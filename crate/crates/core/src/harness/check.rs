//! Gradient and oracle suites shared by the `check` command and the
//! acceptance run.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dit::{build_identity_isolated_mask, Dit, DitConfig, ModelInput};
use crate::error::Result;
use crate::flow::{cfm_loss, crop_face, face_similarity_term, one_step_estimate_var, FlowBatch};
use crate::image::Rect;
use crate::metrics::{copy_paste_metric, EmbeddingTriple, OracleEmbedder, CP_EPS};
use crate::numerics::{check_gradient, check_param_gradient, AttentionMask, PairRotation, Tape, Tensor, Var};
use crate::synth::{generate_scene, render_identity, scene_rng, Nuisance, SceneConfig};
use crate::tokens::{RopeCoord, SequenceLayout};

use super::data::{inference_conditions, inputs_of, scene_target};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub points: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn rt(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn mask(rng: &mut ChaCha8Rng, n: usize) -> AttentionMask {
    let bits: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.6)).collect();
    AttentionMask::from_fn(n, |p, q| p == q || bits[p * n + q])
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>, other: Tensor, left: bool) -> OpFn {
    Box::new(move |t, x| {
        let o = t.leaf(other.clone());
        if left {
            f(t, x, o)
        } else {
            f(t, o, x)
        }
    })
}

/// `(name, point, op)` for one random draw of every differentiable op.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, OpFn)> {
    let mut v: Vec<(&'static str, Tensor, OpFn)> = Vec::new();
    let x34 = rt(rng, 3, 4);
    v.push(("matmul_lhs", x34.clone(), binary(|t, a, b| t.matmul(a, b), rt(rng, 4, 2), true)));
    v.push(("matmul_rhs", x34.clone(), binary(|t, a, b| t.matmul(a, b), rt(rng, 2, 3), false)));
    v.push(("add", x34.clone(), binary(|t, a, b| t.add(a, b), rt(rng, 3, 4), true)));
    v.push(("sub_lhs", x34.clone(), binary(|t, a, b| t.sub(a, b), rt(rng, 3, 4), true)));
    v.push(("sub_rhs", x34.clone(), binary(|t, a, b| t.sub(a, b), rt(rng, 3, 4), false)));
    v.push(("mul", x34.clone(), binary(|t, a, b| t.mul(a, b), rt(rng, 3, 4), true)));
    v.push(("scale", x34.clone(), Box::new(|t, x| Ok(t.scale(x, -1.7)))));
    v.push(("add_scalar", x34.clone(), Box::new(|t, x| Ok(t.add_scalar(x, 0.3)))));
    v.push(("add_row_matrix", x34.clone(), binary(|t, a, b| t.add_row(a, b), rt(rng, 1, 4), true)));
    v.push(("add_row_bias", rt(rng, 1, 4), binary(|t, a, b| t.add_row(a, b), x34.clone(), false)));
    v.push(("gelu", x34.map(|a| 2.0 * a), Box::new(|t, x| Ok(t.gelu(x)))));
    v.push(("layer_norm", rt(rng, 3, 6), Box::new(|t, x| t.layer_norm(x))));
    let (q, k, vv) = (rt(rng, 5, 4), rt(rng, 5, 4), rt(rng, 5, 3));
    let m = Rc::new(mask(rng, 5));
    for (name, which) in [("attention_q", 0), ("attention_k", 1), ("attention_v", 2)] {
        let (q, k, vv, m) = (q.clone(), k.clone(), vv.clone(), Rc::clone(&m));
        let point = [q.clone(), k.clone(), vv.clone()][which].clone();
        v.push((
            name,
            point,
            Box::new(move |t, x| {
                let mut ops = [t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(vv.clone())];
                ops[which] = x;
                t.attention(ops[0], ops[1], ops[2], &m)
            }),
        ));
    }
    let angles: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    let rot = Rc::new(PairRotation::from_angles(4, 2, &angles).expect("sized"));
    v.push(("rotate", rt(rng, 4, 4), Box::new(move |t, x| t.rotate(x, &rot))));
    let idx: Rc<Vec<usize>> = Rc::new((0..7).map(|_| rng.random_range(0..12)).collect());
    v.push(("gather", x34.clone(), Box::new(move |t, x| t.gather(x, Rc::clone(&idx), vec![7]))));
    v.push(("gather_rows", x34.clone(), Box::new(|t, x| t.gather_rows(x, &[2, 0, 2]))));
    v.push(("slice_rows", x34.clone(), Box::new(|t, x| t.slice_rows(x, 1, 2))));
    v.push(("slice_cols", x34.clone(), Box::new(|t, x| t.slice_cols(x, 1, 2))));
    let other = rt(rng, 2, 4);
    v.push((
        "concat_rows",
        x34.clone(),
        Box::new(move |t, x| {
            let o = t.leaf(other.clone());
            t.concat_rows(&[o, x, x])
        }),
    ));
    let other = rt(rng, 3, 2);
    v.push((
        "concat_cols",
        x34.clone(),
        Box::new(move |t, x| {
            let o = t.leaf(other.clone());
            t.concat_cols(&[x, o])
        }),
    ));
    v.push(("mean_square", x34.clone(), Box::new(|t, x| Ok(t.mean_square(x)))));
    v.push(("sum", x34.clone(), Box::new(|t, x| Ok(t.sum(x)))));
    v.push(("sum_cols", x34.clone(), Box::new(|t, x| t.sum_cols(x))));
    v.push(("l2_normalize_rows", x34.clone(), Box::new(|t, x| t.l2_normalize_rows(x, 1e-12))));
    let (w, b) = (rt(rng, 4, 3), rt(rng, 1, 3));
    v.push((
        "linear",
        x34.clone(),
        Box::new(move |t, x| {
            let (w, b) = (t.leaf(w.clone()), t.leaf(b.clone()));
            t.linear(x, w, b)
        }),
    ));
    let embedder = OracleEmbedder::default();
    let pixels = rt(rng, 1, 12 * 12 * 3);
    v.push(("oracle_embed", pixels, Box::new(move |t, x| embedder.embed_var(t, x, 12, 12))));
    let rect = Rect::square(4, 0, 4);
    v.push(("crop_face", rt(rng, 4, 48), Box::new(move |t, x| crop_face(t, x, &rect, 8, 8, 4))));
    v
}

/// Every tape op at `points` random draws each.
pub fn op_gradient_suite(points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<CheckResult> = Vec::new();
    for _ in 0..points {
        for (name, point, op) in op_cases(&mut rng) {
            let r = check_gradient(&*op, &point, FD_STEP)?;
            match results.iter_mut().find(|c| c.name == name) {
                Some(c) => {
                    c.max_rel_error = c.max_rel_error.max(r.max_rel_error);
                    c.points += 1;
                }
                None => results.push(CheckResult {
                    name: name.to_string(),
                    max_rel_error: r.max_rel_error,
                    points: 1,
                }),
            }
        }
    }
    Ok(results)
}

/// Configuration of the model-level check.
pub fn check_model_config() -> DitConfig {
    DitConfig {
        width: 16,
        heads: 1,
        blocks: 2,
        ..DitConfig::default()
    }
}

/// Full training loss (flow matching plus face similarity) of a 2-block
/// width-16 model, one random coordinate of every parameter tensor, at
/// `points` random scenes and parameter draws.
pub fn model_gradient_check(points: usize, seed: u64) -> Result<CheckResult> {
    let sc = SceneConfig::default();
    let embedder = OracleEmbedder::default();
    let mut worst: f64 = 0.0;
    for k in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut model = Dit::new(check_model_config(), &mut rng)?;
        model.randomize_zero_init(&mut rng, 0.3);
        let scene = generate_scene(&sc, k, 2, &mut scene_rng(seed, k))?;
        let ids = inputs_of(&inference_conditions(&sc, &scene, &embedder)?);
        let refs: Vec<(Rect, Vec<f64>)> = scene
            .identities
            .iter()
            .map(|s| Ok((s.rect, embedder.embed(&s.reference)?)))
            .collect::<Result<_>>()?;
        let batch = FlowBatch::sample(scene_target(&scene, sc.patch)?, &mut rng)?;
        let g = sc.image_size / sc.patch;
        let coords: Vec<_> = model
            .params
            .ids()
            .map(|id| (id, rng.random_range(0..model.params.get(id).tensor.numel())))
            .collect();
        let net = model.clone();
        let loss = |tape: &mut Tape, store: &crate::numerics::ParamStore| -> Result<Var> {
            let input = ModelInput {
                x_t: &batch.x_t,
                grid: (g, g),
                t: batch.t,
                prompt: &scene.prompt,
                identities: &ids,
            };
            let mu = net.forward_in(store, tape, &input)?;
            let target = tape.leaf(batch.target.clone());
            let fm = cfm_loss(tape, mu, target)?;
            let xt = tape.leaf(batch.x_t.clone());
            let x_hat = one_step_estimate_var(tape, xt, batch.t, mu)?;
            let mut total = fm;
            for (rect, e) in &refs {
                let crop = crop_face(tape, x_hat, rect, sc.image_size, sc.image_size, sc.patch)?;
                let term = face_similarity_term(tape, &embedder, crop, rect, e)?;
                let w = tape.scale(term, 0.05);
                total = tape.add(total, w)?;
            }
            Ok(total)
        };
        let r = check_param_gradient(&mut model.params, &loss, &coords, FD_STEP)?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(CheckResult {
        name: "dit_2block_training_loss".into(),
        max_rel_error: worst,
        points,
    })
}

/// The star rule written out by segment arithmetic, independent of the
/// layout's branch bookkeeping.
pub fn mask_rule(lens: &[usize], p: usize, q: usize) -> bool {
    let seg = |i: usize| {
        let mut acc = 0;
        lens.iter()
            .position(|&n| {
                acc += n;
                i < acc
            })
            .expect("index inside the sequence")
    };
    let (sp, sq) = (seg(p), seg(q));
    // Segments 0 and 1 are text and image.
    if sp <= 1 {
        true
    } else if sq <= 1 {
        true
    } else {
        sp == sq
    }
}

/// Compares the mask builder with [`mask_rule`] for every identity count up
/// to `max_n` and every segment-length tuple with lengths in
/// `1..=max_len`. Returns the number of layouts checked and mismatches.
pub fn mask_oracle_enumeration(max_n: usize, max_len: usize) -> Result<(usize, usize)> {
    let mut layouts = 0;
    let mut mismatches = 0;
    for n in 0..=max_n {
        let k = n + 2;
        let mut lens = vec![1usize; k];
        loop {
            let ids: Vec<Vec<RopeCoord>> = lens[2..]
                .iter()
                .map(|&l| (0..l).map(|j| RopeCoord::identity(j % lens[1], 0)).collect())
                .collect();
            let layout = SequenceLayout::new(lens[0], (lens[1], 1), &ids)?;
            let m = build_identity_isolated_mask(&layout);
            let total: usize = lens.iter().sum();
            for p in 0..total {
                for q in 0..total {
                    if m.allowed(p, q) != mask_rule(&lens, p, q) {
                        mismatches += 1;
                    }
                }
            }
            layouts += 1;
            let mut i = 0;
            while i < k && lens[i] == max_len {
                lens[i] = 1;
                i += 1;
            }
            if i == k {
                break;
            }
            lens[i] += 1;
        }
    }
    Ok((layouts, mismatches))
}

/// Copy-paste score at the two poles for random rendered identities:
/// `(g = t, g = r)` pairs.
pub fn cp_pole_values(trials: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = OracleEmbedder::default();
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let z_t = crate::synth::random_identity(&mut rng);
        let z_r = crate::synth::random_identity(&mut rng);
        let t = e.embed(&render_identity(&z_t, 16, 16, &Nuisance::sample(&mut rng)))?;
        let r = e.embed(&render_identity(&z_r, 16, 16, &Nuisance::sample(&mut rng)))?;
        let at_gt = EmbeddingTriple::new(r.clone(), t.clone(), t.clone())?;
        let at_ref = EmbeddingTriple::new(r.clone(), t.clone(), r.clone())?;
        out.push((copy_paste_metric(&at_gt, CP_EPS)?, copy_paste_metric(&at_ref, CP_EPS)?));
    }
    Ok(out)
}

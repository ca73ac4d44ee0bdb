//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=2,9` restricts the run to the
//! listed criteria.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idcanvas::dit::{from_model_space, Dit, IdentityInput, ModelInput};
use idcanvas::flow::toy2d::{toy_energy_distance, ToyConfig};
use idcanvas::flow::{gaussian_like, CurriculumSchedule};
use idcanvas::geometry::canvas::resize_nearest;
use idcanvas::geometry::{estimate_similarity, patch_to_image_scale, FacePatch, Landmarks5, LocationCanvas, Placement};
use idcanvas::harness::check::{cp_pole_values, mask_oracle_enumeration, model_gradient_check, op_gradient_suite};
use idcanvas::harness::data::{heldout_scenes, inference_conditions, inputs_of, scene_target, training_conditions};
use idcanvas::harness::eval::{evaluate_model, sample_image};
use idcanvas::harness::manifest::config_hash;
use idcanvas::harness::train::LOSS_LOG;
use idcanvas::harness::{run_train, ExperimentConfig};
use idcanvas::image::Image;
use idcanvas::metrics::{OracleEmbedder, RankingThresholds};
use idcanvas::numerics::Tensor;
use idcanvas::synth::{generate_scene, scene_rng};

type Outcome = Result<String, String>;

fn within(started: Instant, limit: Duration, detail: String) -> Outcome {
    let took = started.elapsed();
    if took > limit {
        Err(format!("{detail}; took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(format!("{detail}; {:.1}s", took.as_secs_f64()))
    }
}

fn mask_oracle() -> Outcome {
    let t = Instant::now();
    let (layouts, bad) = mask_oracle_enumeration(4, 6).map_err(|e| e.to_string())?;
    let detail = format!("{layouts} layouts, {bad} mismatched entries");
    if bad != 0 {
        return Err(detail);
    }
    within(t, Duration::from_secs(5), detail)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut results = op_gradient_suite(10, 1).map_err(|e| e.to_string())?;
    results.push(model_gradient_check(10, 7).map_err(|e| e.to_string())?);
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is not empty");
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_error))
        .collect();
    let detail = format!("{} checks, worst {} {:.2e}", results.len(), worst.name, worst.max_rel_error);
    if !failed.is_empty() {
        return Err(format!("{detail}; failing: {}", failed.join(", ")));
    }
    within(t, Duration::from_secs(60), detail)
}

fn toy_flow() -> Outcome {
    let cfg = ToyConfig::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let t = Instant::now();
        let d = toy_energy_distance(&cfg, seed, 4096).map_err(|e| e.to_string())?;
        let secs = t.elapsed().as_secs_f64();
        ok &= d < 0.05 && secs < 120.0;
        parts.push(format!("seed {seed}: {d:.4} in {secs:.1}s"));
    }
    let detail = parts.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn geometry() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = rng.random_range(0.3..=4.0);
        let theta = rng.random_range(-45.0f64..=45.0).to_radians();
        let (tx, ty) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let src = Landmarks5::template_in_box([rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)], 16.0);
        let (c, sn) = (theta.cos(), theta.sin());
        let dst = src
            .map(|[x, y]| [s * (c * x - sn * y) + tx, s * (sn * x + c * y) + ty])
            .map_err(|e| e.to_string())?;
        let fit = estimate_similarity(&src, &dst).map_err(|e| e.to_string())?;
        worst = worst.max((fit.raw_scale - s).abs());
        worst = worst.max((fit.rotation_rad() - theta).abs());
    }
    if worst > 1e-6 {
        return Err(format!("similarity recovery error {worst:.2e}"));
    }

    let clamp_hi = patch_to_image_scale(10.0).map_err(|e| e.to_string())?;
    let clamp_lo = patch_to_image_scale(0.1).map_err(|e| e.to_string())?;
    let patch_lm = Landmarks5::template_in_box([0.0, 0.0], 16.0);
    let shrunk = patch_lm.map(|[x, y]| [x / 10.0 + 3.0, y / 10.0 + 5.0]).map_err(|e| e.to_string())?;
    let placed = Placement::from_landmarks(&patch_lm, &shrunk).map_err(|e| e.to_string())?;
    if clamp_hi != 0.2 || clamp_lo != 5.0 || placed.scale != 0.2 {
        return Err(format!(
            "clamp cases: s(10) = {clamp_hi}, s(0.1) = {clamp_lo}, fitted placement {}",
            placed.scale
        ));
    }

    let mut mismatched = 0;
    for _ in 0..50 {
        let (h, w) = (32usize, 32usize);
        let mut canvas = LocationCanvas::new(h, w);
        let mut oracle = vec![false; h * w];
        for _ in 0..rng.random_range(1..=3) {
            let n = rng.random_range(4..=16);
            let alpha: Vec<f64> = (0..n * n)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.05..=1.0) })
                .collect();
            let patch = FacePatch::new(Image::filled(n, n, [0.2, 0.4, 0.6]), alpha.clone()).map_err(|e| e.to_string())?;
            let scale = rng.random_range(0.2..=3.0);
            let placement = Placement {
                raw_scale: 1.0 / scale,
                scale,
                offset: (rng.random_range(-10..30), rng.random_range(-10..30)),
            };
            let (rh, rw) = placement.resized_extent(n, n);
            let a = resize_nearest(&alpha, n, n, rh, rw);
            for y in 0..rh {
                for x in 0..rw {
                    let cy = placement.offset.1 + y as i64;
                    let cx = placement.offset.0 + x as i64;
                    if (0..h as i64).contains(&cy) && (0..w as i64).contains(&cx) && a[y * rw + x] > 0.0 {
                        oracle[cy as usize * w + cx as usize] = true;
                    }
                }
            }
            canvas.paste_face(&patch, &placement).map_err(|e| e.to_string())?;
        }
        mismatched += canvas.mask().iter().zip(&oracle).filter(|(a, b)| a != b).count();
    }
    let detail = format!("max fit error {worst:.1e}, clamp exact, {mismatched} mask mismatches over 50 canvases");
    if mismatched != 0 {
        return Err(detail);
    }
    within(t, Duration::from_secs(5), detail)
}

fn cp_poles() -> Outcome {
    let t = Instant::now();
    let poles = cp_pole_values(100, 3).map_err(|e| e.to_string())?;
    let gt_max = poles.iter().map(|p| p.0).fold(f64::MIN, f64::max);
    let gt_min = poles.iter().map(|p| p.0).fold(f64::MAX, f64::min);
    let ref_min = poles.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    let ref_max = poles.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let detail = format!("CP(g=t) in [{gt_min:.6}, {gt_max:.6}], CP(g=r) in [{ref_min:.6}, {ref_max:.6}]");
    let ok = gt_min >= -1.0 && gt_max <= -0.995 && ref_min >= 0.995 && ref_max <= 1.0;
    if !ok {
        return Err(detail);
    }
    within(t, Duration::from_secs(1), detail)
}

fn curriculum() -> Outcome {
    let s = CurriculumSchedule::standard();
    let table: [(u64, f64); 10] = [
        (0, 0.0),
        (10_000, 0.05),
        (15_000, 0.05),
        (20_000, 0.1),
        (30_000, 0.2),
        (40_000, 0.3),
        (50_000, 0.4),
        (60_000, 0.5),
        (100_000, 0.5),
        (1_000_000, 0.5),
    ];
    let bad: Vec<String> = table
        .iter()
        .filter(|(step, p)| s.probability(*step) != *p)
        .map(|(step, p)| format!("step {step}: got {} want {p}", s.probability(*step)))
        .collect();
    if bad.is_empty() {
        Ok(format!("{} schedule points exact", table.len()))
    } else {
        Err(bad.join(", "))
    }
}

struct SeedRun {
    seed: u64,
    lambda: f64,
    localization: f64,
    heldout_l_fs: f64,
    train_secs: f64,
}

fn train_and_eval(root: &std::path::Path, seed: u64, lambda: f64) -> Result<SeedRun, String> {
    let cfg = ExperimentConfig {
        seed,
        lambda,
        out: root.join(format!("seed{seed}_lambda{lambda}")),
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let outcome = run_train(&cfg, None).map_err(|e| e.to_string())?;
    let train_secs = t.elapsed().as_secs_f64();
    let scenes = heldout_scenes(&cfg).map_err(|e| e.to_string())?;
    let ev = evaluate_model(&outcome.model, &cfg, &scenes, cfg.seed, &RankingThresholds::default())
        .map_err(|e| e.to_string())?;
    eprintln!(
        "  seed {seed} lambda {lambda}: localization {:.3}, held-out L_fs {:.4}, train {train_secs:.0}s",
        ev.localization, ev.heldout_l_fs
    );
    Ok(SeedRun {
        seed,
        lambda,
        localization: ev.localization,
        heldout_l_fs: ev.heldout_l_fs,
        train_secs,
    })
}

/// Criteria 7 and 8 share the same six trainings.
fn end_to_end(want7: bool, want8: bool) -> Vec<(usize, Outcome)> {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return vec![(7, Err(e.to_string())), (8, Err(e.to_string()))],
    };
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3 {
        match train_and_eval(dir.path(), seed, 0.1) {
            Ok(r) => with.push(r),
            Err(e) => return vec![(7, Err(e.clone())), (8, Err(e))],
        }
        if want8 {
            match train_and_eval(dir.path(), seed, 0.0) {
                Ok(r) => without.push(r),
                Err(e) => return vec![(8, Err(e))],
            }
        }
    }
    let mut out = Vec::new();
    if want7 {
        let passing = with.iter().filter(|r| r.localization >= 0.8 && r.train_secs <= 1200.0).count();
        let detail = with
            .iter()
            .map(|r| format!("seed {} {:.3} ({:.0}s)", r.seed, r.localization, r.train_secs))
            .collect::<Vec<_>>()
            .join(", ");
        let detail = format!("localization {detail}; {passing}/3 seeds reach 0.8");
        out.push((7, if passing >= 2 { Ok(detail) } else { Err(detail) }));
    }
    if want8 {
        let pairs: Vec<(&SeedRun, &SeedRun)> = with.iter().zip(&without).collect();
        let lower = pairs.iter().filter(|(a, b)| a.heldout_l_fs < b.heldout_l_fs).count();
        let detail = pairs
            .iter()
            .map(|(a, b)| format!("seed {}: {:.4} (lambda {}) vs {:.4} (lambda {})", a.seed, a.heldout_l_fs, a.lambda, b.heldout_l_fs, b.lambda))
            .collect::<Vec<_>>()
            .join(", ");
        let detail = format!("held-out L_fs {detail}; lower in {lower}/3");
        out.push((8, if lower >= 2 { Ok(detail) } else { Err(detail) }));
    }
    out
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn image_bits(img: &Image) -> Vec<u64> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

fn dropout_cfg() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig {
        dropout: 1.0,
        ..ExperimentConfig::default()
    };
    let sc = cfg.scene_config();
    let embedder = OracleEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Dit::new(cfg.dit_config(), &mut rng).map_err(|e| e.to_string())?;
    // Nonzero gates, so conditions actually reach the output.
    model.randomize_zero_init(&mut rng, 0.3);
    let g = sc.image_size / sc.patch;
    let mut checked = 0;
    for k in 0..4 {
        let scene = generate_scene(&sc, k, 2, &mut scene_rng(11, k)).map_err(|e| e.to_string())?;
        let x_t = gaussian_like(&scene_target(&scene, sc.patch).map_err(|e| e.to_string())?, &mut rng);
        let full = inputs_of(&inference_conditions(&sc, &scene, &embedder).map_err(|e| e.to_string())?);
        let dropped = training_conditions(&cfg, &scene, 0.0, &embedder, &mut rng).map_err(|e| e.to_string())?;
        if !dropped.iter().all(|c| c.dropped && c.input.is_null()) {
            return Err("dropout rate 1 left a condition in place".into());
        }
        let dropped = inputs_of(&dropped);
        let zeroed: Vec<IdentityInput> = full
            .iter()
            .map(|i| IdentityInput {
                patches: None,
                coords: i.coords.clone(),
                embedding: None,
            })
            .collect();
        let uncond = Dit::unconditional(&full);
        let run = |ids: &[IdentityInput]| {
            model.velocity(&ModelInput {
                x_t: &x_t,
                grid: (g, g),
                t: 0.6,
                prompt: &scene.prompt,
                identities: ids,
            })
        };
        let a = run(&dropped).map_err(|e| e.to_string())?;
        let b = run(&zeroed).map_err(|e| e.to_string())?;
        let c = run(&uncond).map_err(|e| e.to_string())?;
        let cond = run(&full).map_err(|e| e.to_string())?;
        if bits(&a) != bits(&c) || bits(&b) != bits(&c) {
            return Err(format!("scene {k}: zeroed conditions differ from the unconditional branch"));
        }
        if bits(&cond) == bits(&c) {
            return Err(format!("scene {k}: conditions do not reach the output"));
        }

        let x1 = gaussian_like(&x_t, &mut rng);
        let sampled = sample_image(&model, &sc, &scene.prompt, &full, 6, 1.0, x1.clone()).map_err(|e| e.to_string())?;
        let mut x = x1;
        let h = 1.0 / 6.0;
        for s in 0..6 {
            let tt = 1.0 - s as f64 * h;
            let mu = model
                .velocity(&ModelInput {
                    x_t: &x,
                    grid: (g, g),
                    t: tt,
                    prompt: &scene.prompt,
                    identities: &full,
                })
                .map_err(|e| e.to_string())?;
            x = x.zip_map(&mu, |a, m| a - h * m).map_err(|e| e.to_string())?;
        }
        let single = from_model_space(&x, sc.image_size, sc.image_size, sc.patch).map_err(|e| e.to_string())?;
        if image_bits(&sampled) != image_bits(&single) {
            return Err(format!("scene {k}: cfg 1.0 sampling differs from single-branch sampling"));
        }
        checked += 1;
    }
    within(
        t,
        Duration::from_secs(10),
        format!("{checked} scenes: dropped = zeroed = unconditional, cfg 1.0 = single branch, bit-exact"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = ExperimentConfig {
        steps: 40,
        seed: 5,
        ..ExperimentConfig::default()
    };
    let a = ExperimentConfig { out: dir.path().join("a"), ..base.clone() };
    let b = ExperimentConfig { out: dir.path().join("b"), ..base };
    if config_hash(&a) != config_hash(&b) {
        return Err("identical configs hash differently".into());
    }
    run_train(&a, None).map_err(|e| e.to_string())?;
    run_train(&b, None).map_err(|e| e.to_string())?;
    let hash_line = |p: &std::path::Path| -> Result<String, String> {
        let text = fs::read_to_string(p.join("manifest_train.txt")).map_err(|e| e.to_string())?;
        text.lines()
            .find(|l| l.starts_with("config_hash"))
            .map(str::to_string)
            .ok_or_else(|| "manifest without config_hash".to_string())
    };
    if hash_line(&a.out)? != hash_line(&b.out)? {
        return Err("manifests record different config hashes".into());
    }
    let la = fs::read(a.out.join(LOSS_LOG)).map_err(|e| e.to_string())?;
    let lb = fs::read(b.out.join(LOSS_LOG)).map_err(|e| e.to_string())?;
    if la != lb {
        return Err("loss logs differ".into());
    }
    Ok(format!("two 40-step runs, {} identical log bytes", la.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let singles: [(usize, fn() -> Outcome); 8] = [
        (1, mask_oracle),
        (2, gradients),
        (3, toy_flow),
        (4, geometry),
        (5, cp_poles),
        (6, curriculum),
        (9, dropout_cfg),
        (10, determinism),
    ];
    let mut results: Vec<(usize, Outcome)> = singles
        .iter()
        .filter(|(n, _)| wanted(*n))
        .map(|&(n, f)| (n, guarded(f)))
        .collect();
    if wanted(7) || wanted(8) {
        match panic::catch_unwind(|| end_to_end(wanted(7), wanted(8))) {
            Ok(r) => results.extend(r),
            Err(_) => {
                results.push((7, Err("panicked".into())));
                results.push((8, Err("panicked".into())));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {n}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n}: {d}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idcanvas::image::{Image, Rect};
use idcanvas::metrics::{
    copy_paste_metric, cosine_sim, evaluate_run, ranking_filter, EmbeddingTriple, EvalCase, EvalRecord,
    OracleEmbedder, RankingThresholds, CP_EPS,
};
use idcanvas::synth::{
    generate_scene, identity_canvas, random_identity, render_identity, scene_rng, Nuisance, SceneConfig,
};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(unit)
}

proptest! {
    #[test]
    fn embedding_ignores_affine_photometry(seed in any::<u64>(), a in 0.3f64..2.0, b in -0.5f64..0.5) {
        let e = OracleEmbedder::default();
        let img = render_identity(&random_identity(&mut ChaCha8Rng::seed_from_u64(seed)), 16, 16, &Nuisance::none());
        let mut shifted = img.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v = a * *v + b);
        let c = cosine_sim(&e.embed(&img).unwrap(), &e.embed(&shifted).unwrap()).unwrap();
        prop_assert!(c > 1.0 - 1e-9, "{}", c);
    }

    #[test]
    fn cp_flips_sign_when_roles_swap(r in unit_vec(6), t in unit_vec(6), g in unit_vec(6)) {
        let a = copy_paste_metric(&EmbeddingTriple::new(r.clone(), t.clone(), g.clone()).unwrap(), CP_EPS).unwrap();
        let b = copy_paste_metric(&EmbeddingTriple::new(t, r, g).unwrap(), CP_EPS).unwrap();
        prop_assert!((a + b).abs() < 1e-9);
    }

    #[test]
    fn cp_is_rotation_invariant(r in unit_vec(4), t in unit_vec(4), g in unit_vec(4), th in -3.0f64..3.0, ph in -3.0f64..3.0) {
        let rot = |v: &[f64]| {
            let (c1, s1, c2, s2) = (th.cos(), th.sin(), ph.cos(), ph.sin());
            vec![c1 * v[0] - s1 * v[1], s1 * v[0] + c1 * v[1], c2 * v[2] - s2 * v[3], s2 * v[2] + c2 * v[3]]
        };
        let a = copy_paste_metric(&EmbeddingTriple::new(r.clone(), t.clone(), g.clone()).unwrap(), CP_EPS).unwrap();
        let b = copy_paste_metric(&EmbeddingTriple::new(rot(&r), rot(&t), rot(&g)).unwrap(), CP_EPS).unwrap();
        prop_assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
    }

    #[test]
    fn ranking_filter_is_idempotent(sims in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..20)) {
        let records: Vec<EvalRecord> = sims
            .iter()
            .enumerate()
            .map(|(i, &(gt, rf))| EvalRecord::scored(i, 0, gt, rf, 0.0))
            .collect();
        let th = RankingThresholds::default();
        let once = ranking_filter(&records, &th);
        prop_assert_eq!(ranking_filter(&once.cp, &th).cp, once.cp.clone());
        prop_assert_eq!(ranking_filter(&once.quality, &th).quality, once.quality.clone());
        prop_assert!(once.cp.iter().all(|r| r.sim_gt > th.sim_gt_min));
    }
}

#[test]
fn same_identity_survives_photometric_nuisance() {
    let e = OracleEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let z = random_identity(&mut rng);
        let n = Nuisance {
            brightness: rng.random_range(-0.1..=0.1),
            contrast: rng.random_range(0.85..=1.15),
            noise_std: 0.0,
            noise_seed: 0,
        };
        let a = e.embed(&render_identity(&z, 16, 16, &Nuisance::none())).unwrap();
        let b = e.embed(&render_identity(&z, 16, 16, &n)).unwrap();
        assert!(cosine_sim(&a, &b).unwrap() > 0.99);
    }
}

#[test]
fn distinct_identities_are_told_apart() {
    let e = OracleEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let separated = (0..100)
        .filter(|_| {
            let a = e.embed(&render_identity(&random_identity(&mut rng), 16, 16, &Nuisance::none())).unwrap();
            let b = e.embed(&render_identity(&random_identity(&mut rng), 16, 16, &Nuisance::none())).unwrap();
            cosine_sim(&a, &b).unwrap().abs() < 0.8
        })
        .count();
    assert!(separated >= 95, "{separated}");
}

#[test]
fn ground_truth_crops_match_their_references() {
    let sc = SceneConfig::default();
    let e = OracleEmbedder::default();
    for k in 0..20 {
        let scene = generate_scene(&sc, k, 2, &mut scene_rng(3, k)).unwrap();
        for slot in &scene.identities {
            let t = e.embed(&scene.image.crop_rect(&slot.rect).unwrap()).unwrap();
            let r = e.embed(&slot.reference).unwrap();
            assert!(cosine_sim(&t, &r).unwrap() > 0.9, "scene {k}");
        }
    }
}

#[test]
fn embedding_is_deterministic() {
    let img = render_identity(&random_identity(&mut ChaCha8Rng::seed_from_u64(4)), 12, 12, &Nuisance::none());
    assert_eq!(OracleEmbedder::default().embed(&img).unwrap(), OracleEmbedder::default().embed(&img).unwrap());
}

#[test]
fn single_identity_canvas_has_one_region_inside_its_box() {
    let sc = SceneConfig::default();
    let scene = generate_scene(&sc, 0, 1, &mut scene_rng(5, 0)).unwrap();
    let slot = &scene.identities[0];
    let canvas = identity_canvas(&sc, &idcanvas::geometry::FacePatch::opaque(slot.reference.clone()), slot).unwrap();
    let w = canvas.width();
    let marked: Vec<usize> = (0..canvas.mask().len()).filter(|&i| canvas.mask()[i]).collect();
    assert!(!marked.is_empty());
    assert!(marked.iter().all(|&i| slot.rect.contains(i / w, i % w)));
}

fn paste(base: &Image, patch: &Image, rect: &Rect) -> Image {
    let mut out = base.clone();
    for y in 0..rect.h {
        for x in 0..rect.w {
            out.set_pixel(rect.y + y, rect.x + x, patch.pixel(y, x));
        }
    }
    out
}

#[test]
fn evaluation_reaches_both_poles() {
    let sc = SceneConfig::default();
    let e = OracleEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scene = generate_scene(&sc, 0, 1, &mut scene_rng(6, 0)).unwrap();
    let rect = scene.identities[0].rect;
    let other = render_identity(&random_identity(&mut rng), rect.h, rect.w, &Nuisance::none());
    let copied = paste(&scene.image, &other, &rect);
    let cases = vec![
        EvalCase {
            case_id: 0,
            generated: scene.image.clone(),
            ground_truth: scene.image.clone(),
            identities: vec![(Some(rect), other.clone())],
        },
        EvalCase {
            case_id: 1,
            generated: copied,
            ground_truth: scene.image.clone(),
            identities: vec![(Some(rect), other.clone()), (None, other)],
        },
    ];
    let report = evaluate_run(&cases, &e, &RankingThresholds::default());
    assert_eq!(report.records.len(), 3);
    assert!((report.records[0].cp + 1.0).abs() < 1e-9, "{}", report.records[0].cp);
    assert!((report.records[1].cp - 1.0).abs() < 1e-9, "{}", report.records[1].cp);
    assert!(report.records[2].excluded.is_some());
    assert_eq!(report.overall.count, 2);
}

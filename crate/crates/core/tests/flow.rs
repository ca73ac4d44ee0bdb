use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use idcanvas::flow::{
    cfm_loss, cfm_loss_value, crop_face, crop_indices, euler_sample, face_similarity_loss, face_similarity_value,
    interpolate, one_step_estimate, prepare_conditions, total_loss, CurriculumSchedule, FlowBatch, Guidance,
};
use idcanvas::image::Rect;
use idcanvas::metrics::OracleEmbedder;
use idcanvas::numerics::{check_gradient, Tape, Tensor};
use idcanvas::synth::{generate_scene, random_identity, render_identity, scene_rng, Nuisance, SceneConfig};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn interpolation_hits_both_endpoints(x0 in tensor(4, 6), x1 in tensor(4, 6)) {
        prop_assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
    }

    #[test]
    fn one_step_estimate_inverts_the_true_path(x0 in tensor(3, 5), x1 in tensor(3, 5), t in 0.0f64..=1.0) {
        let b = FlowBatch::new(x0.clone(), x1, t).unwrap();
        let est = one_step_estimate(&b.x_t, t, &b.target).unwrap();
        prop_assert!(est.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn flow_loss_ignores_batch_order(pred in tensor(5, 4), target in tensor(5, 4), shift in 1usize..5) {
        let roll = |t: &Tensor| {
            let data: Vec<f64> = (0..5).flat_map(|r| t.row_slice((r + shift) % 5).to_vec()).collect();
            Tensor::matrix(5, 4, data).unwrap()
        };
        let a = cfm_loss_value(&pred, &target).unwrap();
        let b = cfm_loss_value(&roll(&pred), &roll(&target)).unwrap();
        prop_assert!((a - b).abs() <= 1e-15 * a.max(1.0));
    }

    #[test]
    fn curriculum_is_monotone(a in 0u64..200_000, b in 0u64..200_000) {
        let s = CurriculumSchedule::standard();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(s.probability(lo) <= s.probability(hi));
    }
}

#[test]
fn flow_loss_cases() {
    let x0 = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.25, 1.0]).unwrap();
    let x1 = x0.map(|v| v + 1.0);
    let b = FlowBatch::new(x0, x1, 0.3).unwrap();
    assert_eq!(cfm_loss_value(&b.target, &b.target).unwrap(), 0.0);
    assert_eq!(cfm_loss_value(&Tensor::zeros(&[2, 3]), &b.target).unwrap(), 1.0);
    let target = b.target.clone();
    let r = check_gradient(
        &|tape: &mut Tape, x| {
            let t = tape.leaf(target.clone());
            cfm_loss(tape, x, t)
        },
        &Tensor::matrix(2, 3, vec![0.1, 0.7, -0.4, 0.9, -1.1, 0.3]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
}

#[test]
fn one_step_cases() {
    let x = Tensor::row(&[0.3, -0.2, 1.5]);
    assert_eq!(one_step_estimate(&x, 0.0, &Tensor::row(&[9.0, 9.0, 9.0])).unwrap(), x);
    assert_eq!(one_step_estimate(&x, 1.0, &x).unwrap(), Tensor::zeros(&[1, 3]));
    assert!(one_step_estimate(&x, -0.1, &x).is_err());
}

#[test]
fn crop_cases_and_gradient_support() {
    let (h, w, p) = (8, 8, 4);
    let full = crop_indices(&Rect::new(0, 0, 8, 8), h, w, p).unwrap();
    let mut sorted = full.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..h * w * 3).collect::<Vec<_>>());
    let patch = crop_indices(&Rect::new(4, 0, 4, 4), h, w, p).unwrap();
    let mut sorted = patch.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (48..96).collect::<Vec<_>>(), "one patch is one contiguous row");
    assert!(crop_indices(&Rect::new(6, 6, 4, 4), h, w, p).is_err());

    let rect = Rect::new(4, 4, 4, 4);
    let inside = crop_indices(&rect, h, w, p).unwrap();
    let x = Tensor::matrix(4, 48, (0..192).map(|i| 0.1 + i as f64 * 0.01).collect()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let c = crop_face(&mut tape, xv, &rect, h, w, p).unwrap();
    let loss = tape.mean_square(c);
    let g = tape.backward(loss).unwrap().wrt(&tape, xv);
    for (i, v) in g.data().iter().enumerate() {
        assert_eq!(*v != 0.0, inside.contains(&i), "entry {i}");
    }
}

#[test]
fn face_similarity_cases() {
    let e = OracleEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random_identity(&mut rng);
    let img = render_identity(&z, 16, 16, &Nuisance::none());
    let r = e.embed(&img).unwrap();
    let rect = Rect::new(0, 0, 16, 16);
    let mut tape = Tape::new();
    let crop = tape.leaf(Tensor::row(img.data()));
    let l = face_similarity_loss(&mut tape, &e, &[(crop, rect)], &[r.clone()]).unwrap();
    assert!(tape.value(l).item() < 1e-6);

    let neg: Vec<f64> = r.iter().map(|v| -v).collect();
    assert!((face_similarity_value(&[r.clone()], &[neg]).unwrap() - 2.0).abs() < 1e-12);
    let a = vec![1.0, 0.0];
    let b = vec![0.0, 1.0];
    assert_eq!(face_similarity_value(&[a.clone(), a.clone()], &[a.clone(), b]).unwrap(), 0.5);
    assert!(face_similarity_value(&[], &[]).is_err());
}

#[test]
fn total_loss_cases() {
    assert_eq!(total_loss(0.7, 3.0, 0.0).unwrap(), 0.7);
    assert!((total_loss(1.0, 0.5, 0.1).unwrap() - 1.05).abs() < 1e-15);
    assert!(total_loss(1.0, 0.5, -0.1).is_err());
}

#[test]
fn replacement_probability_extremes_and_rate() {
    let sc = SceneConfig::default();
    let scene = generate_scene(&sc, 0, 2, &mut scene_rng(1, 0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let kept = prepare_conditions(&scene.identities, 0.0, 0.0, &mut rng).unwrap();
    for (k, s) in kept.iter().zip(&scene.identities) {
        assert!(!k.replaced && !k.dropped);
        assert_eq!(k.reference, s.reference);
    }
    let e = OracleEmbedder::default();
    let all = prepare_conditions(&scene.identities, 1.0, 0.0, &mut rng).unwrap();
    for (k, s) in all.iter().zip(&scene.identities) {
        assert!(k.replaced);
        assert_ne!(k.reference, s.reference);
        let same = idcanvas::metrics::cosine_sim(&e.embed(&k.reference).unwrap(), &e.embed(&s.reference).unwrap()).unwrap();
        assert!(same > 0.9, "{same}");
    }

    let one = &scene.identities[..1];
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| prepare_conditions(one, 0.3, 0.0, &mut rng).unwrap()[0].replaced)
        .count();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.3).abs() <= 0.02, "{rate}");
    assert!(prepare_conditions(one, 1.2, 0.0, &mut rng).is_err());
}

#[test]
fn euler_cases() {
    let x0 = Tensor::row(&[0.2, -0.7, 1.1]);
    let x1 = Tensor::row(&[1.0, 0.5, -0.3]);
    let v = x1.zip_map(&x0, |a, b| a - b).unwrap();
    let mut exact = |_: &Tensor, _: f64, _: Guidance| Ok(v.clone());
    let out = euler_sample(&mut exact, x1.clone(), 1, 3.0).unwrap();
    assert!(out.max_abs_diff(&x0) < 1e-15);

    let mut calls = Vec::new();
    let mut field = |x: &Tensor, t: f64, g: Guidance| {
        calls.push(g);
        Ok(x.map(|a| a * t))
    };
    let one = euler_sample(&mut field, x1.clone(), 5, 1.0).unwrap();
    assert!(calls.iter().all(|g| *g == Guidance::Conditional) && calls.len() == 5);
    let mut single = x1.clone();
    for k in 0..5 {
        let t = 1.0 - k as f64 * 0.2;
        let mu = single.map(|a| a * t);
        single = single.zip_map(&mu, |a, m| a - 0.2 * m).unwrap();
    }
    assert_eq!(one, single);
    assert!(euler_sample(&mut exact, x1, 0, 1.0).is_err());
}

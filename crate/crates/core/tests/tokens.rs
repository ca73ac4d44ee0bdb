use proptest::prelude::*;

use idcanvas::image::Image;
use idcanvas::numerics::Tensor;
use idcanvas::tokens::rope::{apply_rope, RopeConfig};
use idcanvas::tokens::{downsample_mask, patchify, prune_identity_tokens, unpatchify, RopeCoord};

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, h * w * 3).prop_map(move |d| Image::new(h, w, d).unwrap())
}

proptest! {
    #[test]
    fn patchify_round_trips(img in image(8, 12)) {
        let t = patchify(&img, 4).unwrap();
        prop_assert_eq!(t.shape(), &[6, 48]);
        prop_assert_eq!(unpatchify(&t, 8, 12, 4).unwrap(), img);
    }

    #[test]
    fn rope_preserves_row_norms(
        data in prop::collection::vec(-2.0f64..2.0, 3 * 16),
        xs in prop::collection::vec(0usize..8, 3),
    ) {
        let cfg = RopeConfig::new(16, 100.0).unwrap();
        let x = Tensor::matrix(3, 16, data).unwrap();
        let coords: Vec<RopeCoord> = xs.iter().map(|&v| RopeCoord::identity(v, 7 - v)).collect();
        let y = apply_rope(&x, &coords, &cfg).unwrap();
        for r in 0..3 {
            let n = |t: &Tensor| t.row_slice(r).iter().map(|v| v * v).sum::<f64>();
            prop_assert!((n(&x) - n(&y)).abs() < 1e-9);
        }
    }

    #[test]
    fn pruning_keeps_exactly_the_covered_cells(bits in prop::collection::vec(any::<bool>(), 64)) {
        let tokens = downsample_mask(&bits, 8, 8, 4).unwrap();
        for gy in 0..2 {
            for gx in 0..2 {
                let any = (0..4).any(|dy| (0..4).any(|dx| bits[(gy * 4 + dy) * 8 + gx * 4 + dx]));
                prop_assert_eq!(tokens[gy * 2 + gx], any);
            }
        }
        let canvas = Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let (kept, coords) = prune_identity_tokens(&canvas, &tokens, 2).unwrap();
        prop_assert_eq!(kept.rows(), tokens.iter().filter(|&&b| b).count());
        for (r, c) in coords.iter().enumerate() {
            prop_assert_eq!(kept.row_slice(r), canvas.row_slice(c.y * 2 + c.x));
        }
    }
}

#[test]
fn indivisible_extent_is_rejected() {
    assert!(patchify(&Image::white(10, 8), 4).is_err());
    assert!(RopeConfig::new(7, 100.0).is_err());
}

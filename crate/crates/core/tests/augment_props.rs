use prognosis_core::augment::{
    augment_once, flip_horizontal, flip_vertical, gaussian_blur, histogram_normalize,
    resize_bilinear, sample_rng, AffineRanges, AugmentConfig,
};
use prognosis_core::image::Image;
use proptest::prelude::*;

fn arb_image() -> impl Strategy<Value = Image> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f32..4.0, h * w)
            .prop_map(move |px| Image::new(h, w, px).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pipeline_output_shape_and_range(img in arb_image(), seed in any::<u64>(), with_affine in any::<bool>()) {
        let cfg = AugmentConfig {
            target: 6,
            affine: with_affine.then(AffineRanges::default),
            ..Default::default()
        };
        let out = augment_once(&img, &mut sample_rng(seed, 0, 0), &cfg).unwrap();
        prop_assert_eq!(out.height(), 6);
        prop_assert_eq!(out.width(), 6);
        for &v in out.pixels() {
            prop_assert!(v.is_finite());
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pipeline_deterministic_per_sample(img in arb_image(), seed in any::<u64>(), epoch in 0u64..4, index in 0u64..64) {
        let cfg = AugmentConfig { target: 6, ..Default::default() };
        let a = augment_once(&img, &mut sample_rng(seed, epoch, index), &cfg).unwrap();
        let b = augment_once(&img, &mut sample_rng(seed, epoch, index), &cfg).unwrap();
        prop_assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn histogram_rank_and_idempotence(img in arb_image()) {
        let once = histogram_normalize(&img, (0.0, 1.0)).unwrap();
        let twice = histogram_normalize(&once, (0.0, 1.0)).unwrap();
        prop_assert_eq!(once.pixels(), twice.pixels());
        let v = img.pixels();
        let u = once.pixels();
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(u[i] < u[j]);
                } else if v[i] == v[j] {
                    prop_assert!(u[i] == u[j]);
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions(img in arb_image()) {
        let hh = flip_horizontal(&flip_horizontal(&img));
        prop_assert_eq!(hh.pixels(), img.pixels());
        let vv = flip_vertical(&flip_vertical(&img));
        prop_assert_eq!(vv.pixels(), img.pixels());
    }

    #[test]
    fn blur_preserves_constant_images(level in 0.01f32..3.0, sigma in 0.1f64..2.5) {
        let img = Image::new(5, 7, vec![level; 35]).unwrap();
        let out = gaussian_blur(&img, sigma).unwrap();
        for &v in out.pixels() {
            prop_assert!((v - level).abs() < 1e-5);
        }
    }

    #[test]
    fn resize_stays_within_input_range(img in arb_image(), oh in 1usize..16, ow in 1usize..16) {
        let lo = img.pixels().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = img.pixels().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let out = resize_bilinear(&img, oh, ow);
        for &v in out.pixels() {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }
}

use proptest::prelude::*;

use tt_core::frontend::{plan_masks, spec_augment, stack_subsample, FrontendConfig};
use tt_core::tensor::{Rng, Tensor};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // Offset away from zero so masked entries are recognizable.
    Tensor::new(shape.to_vec(), (0..n).map(|_| 1.0 + rng.uniform()).collect()).unwrap()
}

#[test]
fn unit_stack_is_identity() {
    let x = random(&mut Rng::new(0), &[7, 3]);
    assert_eq!(stack_subsample(&x, 1, 1).unwrap(), x);
    assert!(stack_subsample(&Tensor::zeros([0, 3]), 1, 1).is_err());
    assert!(stack_subsample(&x, 0, 1).is_err());
}

#[test]
fn disabled_or_zero_width_augmentation_is_identity() {
    let x = random(&mut Rng::new(1), &[20, 8]);
    let mut cfg = FrontendConfig {
        freq_mask_width: 4,
        freq_mask_count: 2,
        time_mask_width: 5,
        time_mask_count: 3,
        ..FrontendConfig::default()
    };
    assert_eq!(spec_augment(&x, &cfg, &mut Rng::new(2)), x);
    cfg.augment = true;
    cfg.freq_mask_width = 0;
    cfg.time_mask_width = 0;
    assert_eq!(spec_augment(&x, &cfg, &mut Rng::new(2)), x);
}

#[test]
fn large_masks_clamp_to_extent() {
    let x = random(&mut Rng::new(3), &[4, 3]);
    let cfg = FrontendConfig {
        augment: true,
        ..FrontendConfig::large()
    };
    let plan = plan_masks(4, 3, &cfg, &mut Rng::new(4));
    assert!(plan.freq.iter().all(|b| b.start + b.width <= 3));
    assert!(plan.time.iter().all(|b| b.start + b.width <= 4));
    let y = spec_augment(&x, &cfg, &mut Rng::new(4));
    assert_eq!(y.shape(), x.shape());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn stacked_length_is_ceiling(n in 1usize..60, d in 1usize..4, stack in 1usize..6, sub in 1usize..6) {
        let x = random(&mut Rng::new(n as u64), &[n, d]);
        let y = stack_subsample(&x, stack, sub).unwrap();
        prop_assert_eq!(y.rows(), n.div_ceil(sub));
        prop_assert_eq!(y.cols(), stack * d);
        for i in 0..y.rows() {
            for j in 0..stack {
                let src = (i * sub + j).min(n - 1);
                prop_assert_eq!(&y.row(i)[j * d..(j + 1) * d], x.row(src));
            }
        }
    }

    #[test]
    fn masking_touches_only_planned_bands(
        seed in any::<u64>(),
        n in 1usize..40,
        d in 1usize..12,
        fw in 0usize..6,
        fc in 0usize..4,
        tw in 0usize..8,
        tc in 0usize..4,
    ) {
        let x = random(&mut Rng::new(seed ^ 1), &[n, d]);
        let cfg = FrontendConfig {
            freq_mask_width: fw,
            freq_mask_count: fc,
            time_mask_width: tw,
            time_mask_count: tc,
            augment: true,
            ..FrontendConfig::default()
        };
        let y = spec_augment(&x, &cfg, &mut Rng::new(seed));
        prop_assert_eq!(&y, &spec_augment(&x, &cfg, &mut Rng::new(seed)));
        // Recompute the bands from the same seeded stream.
        let plan = plan_masks(n, d, &cfg, &mut Rng::new(seed));
        let mut masked = 0;
        for r in 0..n {
            for c in 0..d {
                let in_band = plan.freq.iter().any(|b| (b.start..b.start + b.width).contains(&c))
                    || plan.time.iter().any(|b| (b.start..b.start + b.width).contains(&r));
                if in_band {
                    masked += 1;
                    prop_assert_eq!(y.row(r)[c], 0.0);
                } else {
                    prop_assert_eq!(y.row(r)[c], x.row(r)[c]);
                }
            }
        }
        prop_assert!(masked <= fc * fw * n + tc * tw * d);
    }
}

use proptest::prelude::*;

use r2mf::loss::{bce_loss, dice_loss};
use r2mf::mask::BinaryMask;
use r2mf::metrics::{asd, dice_coef, hd95, iou, pooled_boundary_distances};
use r2mf::postprocess::{closing, count_components, largest_component, postprocess_pipeline, threshold};
use r2mf::{Dims, Tensor};

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::from_bits(h, w, bits).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (mask(h, w), mask(h, w)))
}

fn any_mask() -> impl Strategy<Value = BinaryMask> {
    (1usize..14, 1usize..14).prop_flat_map(|(h, w)| mask(h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn overlap_ratios_are_ordered((p, t) in mask_pair()) {
        let (i, d) = (iou(&p, &t).unwrap(), dice_coef(&p, &t).unwrap());
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!(i <= d && d <= 1.0);
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
    }

    #[test]
    fn surface_distances_are_symmetric((p, t) in mask_pair()) {
        prop_assume!(!p.is_empty() && !t.is_empty());
        let (a, b) = (asd(&p, &t).unwrap(), asd(&t, &p).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert_eq!(hd95(&p, &t).unwrap(), hd95(&t, &p).unwrap());
        let max = pooled_boundary_distances(&p, &t).unwrap().into_iter().fold(0.0, f64::max);
        prop_assert!(hd95(&p, &t).unwrap() <= max);
        prop_assert_eq!(asd(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(hd95(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn soft_dice_agrees_with_hard_dice_on_binary_maps((p, t) in mask_pair()) {
        prop_assume!(!p.is_empty() || !t.is_empty());
        let soft = 1.0 - dice_loss(&p.to_values::<f64>(), &t.to_values::<f64>(), 1e-12).unwrap();
        prop_assert!((soft - dice_coef(&p, &t).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn bce_is_smallest_at_the_mask_mean(m in mask(6, 6)) {
        let target = m.to_values::<f64>();
        let mean = target.iter().sum::<f64>() / target.len() as f64;
        prop_assume!(mean > 0.05 && mean < 0.95);
        let at = |c: f64| bce_loss(&vec![c; target.len()], &target).unwrap();
        let best = at(mean);
        for k in 1..100 {
            prop_assert!(best <= at(k as f64 / 100.0) + 1e-12);
        }
    }

    #[test]
    fn closing_is_idempotent(m in any_mask()) {
        let c = closing(&m);
        prop_assert_eq!(closing(&c), c.clone());
        prop_assert!(m.bits().iter().zip(c.bits()).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn largest_component_shrinks_to_one_component(m in any_mask()) {
        let l = largest_component(&m);
        prop_assert!(l.area() <= m.area());
        prop_assert!(count_components(&l) == (!m.is_empty()) as usize);
        prop_assert_eq!(largest_component(&l), l.clone());
    }

    #[test]
    fn threshold_is_elementwise(vals in prop::collection::vec(0.0f64..=1.0, 30)) {
        let p = Tensor::from_vec(Dims::new(1, 1, 5, 6), vals.clone()).unwrap();
        let m = threshold(&p, 0.5);
        for (i, v) in vals.iter().enumerate() {
            prop_assert_eq!(m.bits()[i], *v >= 0.5);
        }
    }

    #[test]
    fn pipeline_leaves_at_most_one_component(m in any_mask()) {
        let p = m.to_tensor::<f64>();
        let out = postprocess_pipeline(&p);
        prop_assert!(count_components(&out) <= 1);
        prop_assert_eq!(postprocess_pipeline(&p), out);
    }
}

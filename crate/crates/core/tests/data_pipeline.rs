use std::fs;

use proptest::prelude::*;

use r2mf::data::augment::{apply, augment, warp_image, warp_mask, AugmentParams, AugmentationConfig};
use r2mf::data::pgm::{decode_pgm, encode_pgm, grey_to_image, grey_to_mask, image_to_grey, mask_to_grey};
use r2mf::data::synth::{generate_dataset, generate_sample, load_split, write_dataset, Split, SynthConfig};
use r2mf::data::{Quality, View};

#[test]
fn default_splits_are_24_6_6_per_view() {
    let cfg = SynthConfig::default();
    let data = generate_dataset(&cfg).unwrap();
    for (split, want) in [(Split::Train, 24), (Split::Val, 6), (Split::Test, 6)] {
        let samples = data.split(split);
        for v in View::ALL {
            assert_eq!(samples.iter().filter(|s| s.view == v).count(), want, "{split} {v}");
        }
        assert!(samples.iter().all(|s| s.image.dims().h == 64 && s.image.dims().w == 64));
    }
    let mut ids: Vec<(&str, Split)> = data.entries.iter().map(|e| (e.id.as_str(), e.split)).collect();
    ids.dedup();
    let mut patients: Vec<&str> = ids.iter().map(|p| p.0).collect();
    patients.sort();
    patients.dedup();
    assert_eq!(patients.len(), ids.len(), "a patient appears in two splits");
}

#[test]
fn writing_twice_gives_identical_bytes_and_reloads() {
    let cfg = SynthConfig { per_view: 4, size: 32, seed: 9, ..SynthConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &generate_dataset(&cfg).unwrap()).unwrap();
    write_dataset(b.path(), &generate_dataset(&cfg).unwrap()).unwrap();
    let mut files = Vec::new();
    for split in ["", "train", "val", "test"] {
        for e in fs::read_dir(a.path().join(split)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                files.push(p.strip_prefix(a.path()).unwrap().to_path_buf());
            }
        }
    }
    assert_eq!(files.len(), 1 + 2 * 3 * (4 + 1 + 1));
    for f in &files {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f.display());
    }
    let train = load_split(a.path(), Split::Train).unwrap();
    let fresh = generate_dataset(&cfg).unwrap().split(Split::Train);
    assert_eq!(train.len(), fresh.len());
    for (x, y) in train.iter().zip(&fresh) {
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.image, y.image);
    }
}

#[test]
fn pgm_round_trips() {
    let s = generate_sample(4, View::Coronal, 32, Quality::Low).unwrap();
    let m = grey_to_mask(&decode_pgm(&encode_pgm(&mask_to_grey(&s.mask))).unwrap());
    assert_eq!(m, s.mask);
    let img = grey_to_image(&decode_pgm(&encode_pgm(&image_to_grey(&s.image))).unwrap());
    assert_eq!(img, s.image);
    let mut ascii = b"P2\n2 1\n255\n0 255\n".to_vec();
    assert!(decode_pgm(&ascii).is_err());
    ascii.truncate(3);
    assert!(decode_pgm(&ascii).is_err());
}

fn wide() -> AugmentationConfig {
    AugmentationConfig {
        flip_prob: 0.5,
        rotation_deg: 20.0,
        scale: (0.8, 1.2),
        translate_frac: 0.1,
        gamma: (0.7, 1.4),
        noise_sigma: 0.05,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_range_and_binarity(seed in any::<u64>(), view in 0usize..3) {
        let s = generate_sample(seed % 1000, View::ALL[view], 32, Quality::Medium).unwrap();
        let a = augment(&s, &wide(), seed);
        prop_assert_eq!(a.image.dims(), s.image.dims());
        prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!((a.mask.height(), a.mask.width()), (32, 32));
        prop_assert_eq!(augment(&s, &wide(), seed), a);
    }

    #[test]
    fn mask_follows_the_image_transform(seed in any::<u64>()) {
        let s = generate_sample(seed % 1000, View::LeftBending, 32, Quality::High).unwrap();
        let p = AugmentParams::sample(&wide(), 32, seed);
        let warped = warp_mask(&s.mask, &p);
        // Bilinear warp of the mask as an image: fully inside pixels land
        // on 1, fully outside on 0, and nearest sampling must agree there.
        let soft = warp_image(&s.mask.to_tensor::<f32>(), &p);
        for (i, &v) in soft.data().iter().enumerate() {
            if v == 1.0 {
                prop_assert!(warped.bits()[i]);
            } else if v == 0.0 {
                prop_assert!(!warped.bits()[i]);
            }
        }
        let photometric_only = AugmentParams { flip: false, angle_rad: 0.0, scale: 1.0, shift: (0.0, 0.0), ..p };
        prop_assert_eq!(apply(&s, &photometric_only).mask, s.mask.clone());
    }

    #[test]
    fn horizontal_flip_is_an_involution(seed in 0u64..500) {
        let s = generate_sample(seed, View::RightBending, 32, Quality::Low).unwrap();
        let flip = AugmentParams { flip: true, ..AugmentParams::identity() };
        let twice = apply(&apply(&s, &flip), &flip);
        prop_assert_eq!(twice.mask, s.mask.clone());
        prop_assert_eq!(twice.image, s.image.clone());
    }
}

mod common;

use std::collections::HashMap;

use common::*;
use proptest::prelude::*;
use siamseg::data::*;

fn params() -> GenParams {
    GenParams::default()
}

/// Lattice points of pixel centres inside a disc, counted directly.
fn disc_pixel_oracle(cx: f64, cy: f64, r: f64, h: usize, w: usize) -> usize {
    let mut n = 0;
    for row in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn invariant_sweep_over_a_thousand_episodes() {
    let split = ClassSplit::train(&[12, 13]);
    let p = params();
    let r = p.mask_radius();
    for i in 0..1000u64 {
        let ep = generate_episode(&split, &p, format!("{i}"), 5, &mut episode_rng(5, i)).unwrap();
        ep.check_invariants().unwrap();
        assert!((p.min_objects..=p.max_objects).contains(&ep.objects.len()));
        assert!(ep.objects.iter().any(|o| o.class == ep.needle_class));
        assert!(ep.haystack_image.is_finite() && ep.needle_image.is_finite());
        for o in &ep.objects {
            let count = o.mask.data().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(count, disc_pixel_oracle(o.pickup.0, o.pickup.1, r, p.height, p.width));
            // Rasterised area stays within one perimeter of the true area.
            let area = std::f64::consts::PI * r * r;
            assert!((count as f64 - area).abs() <= 2.0 * std::f64::consts::PI * r, "{count} vs {area}");
        }
        let mut classes: Vec<u32> = ep.objects.iter().map(|o| o.class).collect();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes.len(), ep.objects.len(), "haystack classes are distinct");
    }
}

#[test]
fn needle_image_holds_one_object_of_the_needle_class() {
    let p = params();
    let ep = generate_episode(&ClassSplit::train(&[1, 2]), &p, "x", 0, &mut rng(3)).unwrap();
    let n = ep.needle_mask.data().iter().filter(|&&v| v == 1.0).count();
    assert_eq!(n, disc_pixel_oracle(ep.needle_pickup.0, ep.needle_pickup.1, p.mask_radius(), 64, 64));
    assert!(ep.needle_class > 2);
}

#[test]
fn generation_is_deterministic() {
    let split = ClassSplit::eval(&[12, 13]);
    let a = generate_set(&split, &params(), 20, 77).unwrap();
    let b = generate_set(&split, &params(), 20, 77).unwrap();
    assert_eq!(a, b);
    let c = generate_set(&split, &params(), 20, 78).unwrap();
    assert_ne!(a, c);
}

#[test]
fn needle_classes_are_balanced() {
    let split = ClassSplit::train(&[12, 13]);
    let mut counts: HashMap<u32, usize> = HashMap::new();
    let n = 10_000;
    for ep in generate_set(&split, &params(), n, 9).unwrap() {
        *counts.entry(ep.needle_class).or_default() += 1;
    }
    assert_eq!(counts.len(), 11);
    let expect = n as f64 / 11.0;
    for (c, k) in counts {
        assert!((k as f64 - expect).abs() / expect < 0.1, "class {c}: {k}");
    }
}

#[test]
fn eval_split_contract_holds_on_a_full_sweep() {
    let p = GenParams { min_objects: 4, ..params() };
    for holdout in enumerate_holdout_splits(13, 2).unwrap() {
        let split = ClassSplit::eval(&holdout);
        let seed = (holdout[0] * 100 + holdout[1]) as u64;
        for ep in generate_set(&split, &p, 10, seed).unwrap() {
            assert!(holdout.contains(&ep.needle_class));
            for h in &holdout {
                assert!(ep.objects.iter().any(|o| o.class == *h));
            }
            assert!(ep.objects.len() >= 4);
        }
    }
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let eps = generate_set(&ClassSplit::train(&[12, 13]), &params(), 10, 4).unwrap();
    write_dataset(&eps, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), eps.len());
    for (a, b) in eps.iter().zip(&back) {
        assert_eq!(a, b);
        let bits = |t: &siamseg::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.haystack_image), bits(&b.haystack_image));
        assert_eq!(bits(&a.needle_image), bits(&b.needle_image));
        let (listed, files) = stored_mask_counts(dir.path(), &a.id).unwrap();
        assert_eq!(listed, files);
        assert_eq!(listed, a.objects.len());
    }
}

#[test]
fn depth_channel_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = GenParams { channels: 4, ..params() };
    let eps = generate_set(&ClassSplit::train(&[12, 13]), &p, 3, 4).unwrap();
    assert_eq!(eps[0].haystack_image.shape(), &[4, 64, 64]);
    write_dataset(&eps, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), eps);
}

#[test]
fn corrupted_mask_names_the_episode() {
    let dir = tempfile::tempdir().unwrap();
    let eps = generate_set(&ClassSplit::train(&[12, 13]), &params(), 3, 4).unwrap();
    write_dataset(&eps, dir.path()).unwrap();
    let victim = dir.path().join("episodes").join(&eps[1].id).join("mask_0.png");
    std::fs::write(&victim, b"not a png").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&eps[1].id), "{err}");
    assert!(err.contains("mask_0.png"), "{err}");
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn silhouettes_are_pairwise_distinguishable() {
    // Render each family large and unrotated; distinct families must not
    // overlap almost completely.
    let n = 96usize;
    let render = |f: ShapeFamily| -> Vec<f64> {
        (0..n * n)
            .map(|i| {
                let u = ((i % n) as f64 + 0.5) / (n as f64 / 2.0) - 1.0;
                let v = ((i / n) as f64 + 0.5) / (n as f64 / 2.0) - 1.0;
                if f.contains(u * 1.1, v * 1.1) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let masks: Vec<Vec<f64>> = ShapeFamily::ALL.iter().map(|&f| render(f)).collect();
    for i in 0..masks.len() {
        assert!(masks[i].iter().sum::<f64>() > 100.0);
        for j in i + 1..masks.len() {
            let iou = discrete_iou(&masks[i], &masks[j]);
            assert!(iou < 0.85, "{:?} vs {:?}: {iou}", ShapeFamily::ALL[i], ShapeFamily::ALL[j]);
        }
    }
}

#[test]
fn impossible_requests_are_rejected() {
    let split = ClassSplit { needle: vec![1], distractor: vec![1], required: vec![] };
    assert!(generate_episode(&split, &params(), "x", 0, &mut rng(0)).is_err());
    let p = GenParams { min_objects: 11, max_objects: 11, mask_radius_frac: 0.2, ..params() };
    assert!(generate_episode(&ClassSplit::train(&[]), &p, "x", 0, &mut rng(0)).is_err());
    let p = GenParams { min_objects: 1, ..params() };
    assert!(p.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_seed_gives_valid_episodes(seed in any::<u64>(), lo in 2usize..5, extra in 0usize..3) {
        let p = GenParams { min_objects: lo, max_objects: lo + extra, ..params() };
        let ep = generate_episode(&ClassSplit::train(&[5]), &p, "p", seed, &mut rng(seed)).unwrap();
        prop_assert!(ep.check_invariants().is_ok());
        prop_assert!(ep.objects.len() >= lo && ep.objects.len() <= lo + extra);
        prop_assert!(ep.objects.iter().all(|o| o.class != 5));
    }
}

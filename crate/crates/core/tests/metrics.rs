use ashplus_core::dft::{DftWeights, HallucinateOptions, HallucinationNets, StyleMode};
use ashplus_core::metrics::{classwise_style_diff, dump_features, iou_per_class, miou, rel_diff, ConfusionMatrix};
use ashplus_core::nets::{ArchConfig, Decoder, Encoder, SegNet};
use ashplus_core::objectives::IGNORE_LABEL;
use ashplus_core::synthdata::{generate_domain, generate_style_pool, DomainSpec};
use proptest::prelude::*;

fn labels(k: usize, n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![9 => 0..k as u8, 1 => Just(IGNORE_LABEL)], n)
}

fn instance() -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
    (2usize..=5, 1usize..=64).prop_flat_map(|(k, n)| (Just(k), labels(k, n), prop::collection::vec(0..k as u8, n)))
}

/// Per-class counting straight from the pixel lists.
fn oracle(k: usize, truth: &[u8], pred: &[u8]) -> (Vec<Option<f64>>, Option<f64>) {
    let iou: Vec<Option<f64>> = (0..k as u8)
        .map(|c| {
            let pairs = truth.iter().zip(pred).filter(|(t, _)| **t != IGNORE_LABEL);
            let inter = pairs.clone().filter(|(t, p)| **t == c && **p == c).count();
            let union = pairs.filter(|(t, p)| **t == c || **p == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (iou, mean)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_matches_pixel_oracle((k, truth, pred) in instance()) {
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &truth).unwrap();
        let (iou, mean) = oracle(k, &truth, &pred);
        prop_assert_eq!(iou_per_class(&cm), iou);
        if let Some(m) = mean {
            prop_assert_eq!(miou(&cm), m);
        }
        let counted = truth.iter().filter(|&&t| t != IGNORE_LABEL).count() as u64;
        prop_assert_eq!(cm.total(), counted);
    }

    #[test]
    fn accumulation_order_and_sharding_do_not_matter(
        (k, truth, pred) in instance(),
        split in 0usize..64,
        rotate in 0usize..64,
    ) {
        let n = truth.len();
        let mut whole = ConfusionMatrix::new(k);
        whole.accumulate(&pred, &truth).unwrap();

        let s = split % (n + 1);
        let mut a = ConfusionMatrix::new(k);
        a.accumulate(&pred[..s], &truth[..s]).unwrap();
        let mut b = ConfusionMatrix::new(k);
        b.accumulate(&pred[s..], &truth[s..]).unwrap();
        b.merge(&a).unwrap();

        let r = rotate % n;
        let (mut t2, mut p2) = (truth.clone(), pred.clone());
        t2.rotate_left(r);
        p2.rotate_left(r);
        let mut rotated = ConfusionMatrix::new(k);
        rotated.accumulate(&p2, &t2).unwrap();

        for i in 0..k {
            for j in 0..k {
                prop_assert_eq!(whole.get(i, j), b.get(i, j));
                prop_assert_eq!(whole.get(i, j), rotated.get(i, j));
            }
        }
    }

    #[test]
    fn rel_diff_sign_and_fixed_point(ours in 0.1f64..100.0, theirs in 0.0f64..100.0) {
        prop_assert_eq!(rel_diff(ours, ours), 0.0);
        let d = rel_diff(ours, theirs);
        prop_assert_eq!(d > 0.0, ours > theirs);
        prop_assert_eq!(d < 0.0, ours < theirs);
    }
}

#[test]
fn all_ignore_truth_leaves_matrix_empty_and_shape_mismatch_errors() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 1, 2], &[IGNORE_LABEL; 3]).unwrap();
    assert_eq!(cm.total(), 0);
    assert!(cm.accumulate(&[0, 1], &[0, 1, 2]).is_err());
}

fn nets(arch: &ArchConfig) -> (Encoder<f32>, Decoder<f32>, SegNet<f32>, DftWeights<f32>) {
    (
        Encoder::new(arch, 1),
        Decoder::new(arch, 2),
        SegNet::new(arch, 3),
        DftWeights::new(arch.num_classes, 8, arch.latent_channels(), 0.5, 4).unwrap(),
    )
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        image_size: 32,
        stage_channels: vec![4, 8],
        seg_width: 6,
        seg_dilations: vec![1, 2],
        ..ArchConfig::default()
    }
}

#[test]
fn classwise_difference_at_content_corner_is_reconstruction_error() {
    let arch = small_arch();
    let (enc, dec, seg, dft) = nets(&arch);
    let ds = generate_domain(&DomainSpec::default_world(32), 2, 3).unwrap();
    let (x, _) = ds.batch(&[0, 1]).unwrap();
    let style = &generate_style_pool(1, 32, 0).unwrap()[0];
    let opts = HallucinateOptions {
        sigma1: 1.0,
        sigma2: 0.0,
        mode: StyleMode::Transformer {
            orthogonal_noise: true,
            use_alpha: true,
        },
        hard_predictions: false,
        keep_class: None,
    };
    let h = HallucinationNets {
        encoder: &enc,
        decoder: &dec,
        segmenter: &seg,
    };
    let recon = dec.decode(enc.encode(&x).unwrap().last().unwrap()).unwrap();
    let expected = recon.zip_map(&x, |a, b| (a - b).abs());
    let pred = seg.predict(&x).unwrap();
    for k in 0..arch.num_classes {
        let d = classwise_style_diff(&x, style, k, h, &dft, &opts, 9).unwrap();
        assert!(d.map.max_abs_diff(&expected) <= 1e-6, "class {k}");
        assert!(d.map.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        let count = pred.iter().filter(|&&p| p as usize == k).count();
        assert_eq!(d.predicted_pixels, count);
        assert_eq!(d.normalized.is_none(), count == 0);
    }
    assert!(classwise_style_diff(&x, style, arch.num_classes, h, &dft, &opts, 9).is_err());
}

#[test]
fn feature_dump_shape_and_determinism() {
    let arch = small_arch();
    let (_, _, seg, _) = nets(&arch);
    let ds = generate_domain(&DomainSpec::default_world(32), 6, 3).unwrap();
    let a = dump_features(&seg, &ds, 500, 4, 1).unwrap();
    assert_eq!(a.rows.len(), 500);
    assert_eq!(a.width, seg.feature_width());
    assert!(a.rows.iter().all(|(f, c)| f.len() == a.width && (*c as usize) < arch.num_classes));
    assert_eq!(a, dump_features(&seg, &ds, 500, 4, 1).unwrap());
    assert_ne!(a, dump_features(&seg, &ds, 500, 4, 2).unwrap());
}

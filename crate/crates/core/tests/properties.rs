use proptest::prelude::*;

use rdk::dist_prior::{kl_loss, soft_histogram, telescoped_mass, Histogram, HistogramSpec};
use rdk::geometry::{warp, DepthSource, Intrinsics, Pose};
use rdk::metrics::{evaluate, EvalRange};
use rdk::reweighting::consistency_map;
use rdk::tensor::{decode, encode, read_tensor, write_tensor};
use rdk::Grid;

fn grid_strategy() -> impl Strategy<Value = Grid> {
    prop::collection::vec(1usize..6, 1..=3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6f32..1e6, n).prop_map(move |data| Grid::new(shape.clone(), data).unwrap())
    })
}

fn depth_map(h: usize, w: usize, lo: f32, hi: f32) -> impl Strategy<Value = Grid> {
    prop::collection::vec(lo..hi, h * w).prop_map(move |d| Grid::new(vec![h, w], d).unwrap())
}

fn histogram(bins: usize) -> impl Strategy<Value = Histogram> {
    prop::collection::vec(0.0f64..1.0, bins)
        .prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-6)
        .prop_map(move |v| {
            let s: f64 = v.iter().sum();
            let spec = HistogramSpec::with_default_bandwidth(3.5, 80.0, bins).unwrap();
            Histogram::new(spec, v.into_iter().map(|x| x / s).collect()).unwrap()
        })
}

fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-0.05f64..0.05), prop::array::uniform3(-1.0f64..1.0))
        .prop_map(|(theta, trans)| Pose::new(theta, trans).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn tensor_bytes_round_trip(g in grid_strategy()) {
        let back = decode(&encode(&g)).unwrap();
        prop_assert_eq!(back.shape(), g.shape());
        prop_assert!(back.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tensor_file_round_trip(g in grid_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rdt");
        write_tensor(&g, &path).unwrap();
        prop_assert_eq!(read_tensor(&path).unwrap(), g);
    }

    #[test]
    fn truncated_bytes_are_rejected(g in grid_strategy(), cut in 1usize..12) {
        let bytes = encode(&g);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn histogram_mass_matches_telescoped_form(d in depth_map(6, 7, 0.5, 100.0)) {
        let spec = HistogramSpec::default();
        let h = soft_histogram(&d, &spec).unwrap();
        prop_assert!(h.probs.iter().all(|&p| p >= 0.0));
        let mass: f64 = h.probs.iter().sum();
        prop_assert!(mass <= 1.0 + 1e-12);
        prop_assert!((mass - telescoped_mass(&d, &spec).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in histogram(20), q in histogram(20)) {
        prop_assert!(kl_loss(&p, &q).unwrap().value >= -1e-12);
        prop_assert!(kl_loss(&p, &p).unwrap().value.abs() <= 1e-10);
    }

    #[test]
    fn warp_is_linear_in_the_image(
        a in depth_map(8, 10, -1.0, 1.0),
        b in depth_map(8, 10, -1.0, 1.0),
        depth in depth_map(8, 10, 5.0, 60.0),
        pose in pose(),
        s in -2.0f32..2.0,
    ) {
        let k = Intrinsics::new(20.0, 20.0, 4.5, 3.5).unwrap();
        let combo = a.zip_map(&b, |x, y| s * x + y).unwrap();
        let wa = warp(&a, &pose, DepthSource::Map(&depth), &k).unwrap();
        let wb = warp(&b, &pose, DepthSource::Map(&depth), &k).unwrap();
        let wc = warp(&combo, &pose, DepthSource::Map(&depth), &k).unwrap();
        prop_assert_eq!(&wa.mask, &wc.mask);
        for i in 0..combo.len() {
            let expect = s * wa.image.data()[i] + wb.image.data()[i];
            prop_assert!((wc.image.data()[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity(p in pose()) {
        let m = p.compose(&p.inverse()).to_matrix();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                prop_assert!((m.rotation[(r, c)] - want).abs() < 1e-12);
            }
            prop_assert!(m.translation[r].abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_weights_are_bounded(
        s in depth_map(5, 5, 0.01, 100.0),
        d in depth_map(5, 5, 0.01, 100.0),
        beta in 0.0f64..5.0,
        eps in 0.0f64..2.0,
    ) {
        let m = consistency_map(&s, &d, beta, eps).unwrap();
        for (&c, &w) in m.confidence.data().iter().zip(m.weights.data()) {
            // Large disagreement underflows to zero in f32.
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!((f64::from(w) - (f64::from(c) + eps)).abs() < 1e-6);
        }
    }

    #[test]
    fn metrics_ignore_pixel_order(
        pred in depth_map(4, 6, 0.2, 90.0),
        gt in depth_map(4, 6, 0.2, 90.0),
        rot in 0usize..24,
    ) {
        let r = EvalRange::DRIVING;
        let a = evaluate(&pred, &gt, &r);
        let shift = |g: &Grid| {
            let mut v = g.data().to_vec();
            v.rotate_left(rot);
            Grid::new(vec![24], v).unwrap()
        };
        let b = evaluate(&shift(&pred), &shift(&gt), &r);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.n_valid, b.n_valid);
                prop_assert!(a.abs_rel >= 0.0 && (0.0..=100.0).contains(&a.delta1));
                prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
                prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
                prop_assert_eq!(a.delta1, b.delta1);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "validity depends on order"),
        }
    }
}

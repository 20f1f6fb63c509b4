use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use ntir2dc::checkpoint;
use ntir2dc::config::TrainConfig;
use ntir2dc::edges::{canny, eta, read_edge_png, tile_densities, write_edge_png, CannyParams, EdgeMap};
use ntir2dc::metrics::{apce, miou, ThresholdSweep};
use ntir2dc::training::{lr_at, TrainState};
use ntir2dc::Tensor64;

fn image(h: usize, w: usize, px: &[f64]) -> Tensor64 {
    Tensor64::from_vec(&[1, h, w], px.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn miou_of_a_perfect_prediction_is_one(labels in prop::collection::vec(0u32..5, 1..200)) {
        let r = miou(&labels, &labels, 5, 255).unwrap();
        prop_assert_eq!(r.miou, 1.0);
        for (c, iou) in r.per_class.iter().enumerate() {
            prop_assert_eq!(iou.is_some(), labels.contains(&(c as u32)));
        }
    }

    #[test]
    fn miou_lies_in_the_unit_interval(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..200),
    ) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let r = miou(&pred, &gt, 4, 255).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        let total: u64 = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total as usize, gt.len());
    }

    #[test]
    fn apce_is_a_precision(
        a in prop::collection::vec(0.0f64..1.0, 256),
        b in prop::collection::vec(0.0f64..1.0, 256),
    ) {
        let sweep = ThresholdSweep { highs: vec![0.05, 0.2, 0.5], low_ratio: 0.5 };
        let (src, out) = (image(16, 16, &a), image(16, 16, &b));
        if let Ok(r) = apce(std::slice::from_ref(&src), std::slice::from_ref(&out), &sweep) {
            prop_assert!((0.0..=1.0).contains(&r.apce));
        }
        if let Ok(r) = apce(std::slice::from_ref(&src), std::slice::from_ref(&src), &sweep) {
            prop_assert_eq!(r.apce, 1.0);
        }
    }

    #[test]
    fn edge_png_round_trips(mask in prop::collection::vec(any::<bool>(), 1..300), w in 1usize..20) {
        let h = mask.len().div_ceil(w);
        let mut mask = mask;
        mask.resize(h * w, false);
        let edges = EdgeMap { height: h, width: w, mask };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.png");
        write_edge_png(&edges, &path).unwrap();
        prop_assert_eq!(read_edge_png(&path).unwrap(), edges);
    }

    #[test]
    fn tile_densities_average_to_the_edge_fraction(mask in prop::collection::vec(any::<bool>(), 64)) {
        let edges = EdgeMap { height: 8, width: 8, mask };
        let d = tile_densities(&edges, 4);
        prop_assert_eq!(d.len(), 4);
        let mean = d.iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, edges.count() as f64 / 64.0, epsilon = 1e-12);
    }

    #[test]
    fn lr_never_increases(e1 in 0.0f64..80.0, e2 in 0.0f64..80.0) {
        let cfg = TrainConfig::default();
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(lr_at(hi, &cfg).unwrap() <= lr_at(lo, &cfg).unwrap());
    }
}

#[test]
fn canny_finds_a_step_and_ignores_a_flat_image() {
    let step: Vec<f64> = (0..32 * 32).map(|i| if i % 32 < 16 { 0.1 } else { 0.9 }).collect();
    let p = CannyParams::default();
    let e = canny(&step, 32, 32, &p);
    assert!(e.count() > 0);
    for y in 4..28 {
        let cols: Vec<usize> = (0..32).filter(|&x| e.get(y, x)).collect();
        assert!(cols.iter().all(|&x| (14..=17).contains(&x)), "row {y}: {cols:?}");
    }
    assert_eq!(canny(&vec![0.5; 32 * 32], 32, 32, &p).count(), 0);
}

#[test]
fn eta_rejects_non_positive_ranges() {
    assert!(eta(0.0).is_err());
    assert!(eta(-1.0).is_err());
    assert!(eta(1.0).unwrap() > 0.0);
}

#[test]
fn config_text_round_trips() {
    let mut cfg = TrainConfig::desk();
    cfg.apply_override("lambda_sga=0.25").unwrap();
    cfg.apply_override("seed=77").unwrap();
    let back = TrainConfig::from_text(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
    assert!(cfg.apply_override("no_such_key=1").is_err());
    assert!(cfg.apply_override("epochs=ten").is_err());
}

#[test]
fn fresh_checkpoint_round_trips_bytewise() {
    let state = TrainState::<f32>::new(TrainConfig::desk()).unwrap();
    let bytes = checkpoint::to_bytes(&state);
    let back = checkpoint::from_bytes::<f32>(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    assert!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    assert!(checkpoint::from_bytes::<f32>(&corrupt).is_err());
}

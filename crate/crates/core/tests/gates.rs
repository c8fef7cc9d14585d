mod common;

use clod::detector::{decode_boxes, BBox, DetectorOutput, GridSpec};
use clod::distill::{iou_gate, objectness_weight, objectness_weights, yolo_lwf_total, DistillConfig};
use common::random_output;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let l = rng.random_range(-10.0..70.0);
    let t = rng.random_range(-10.0..70.0);
    // zero and negative extents included on purpose
    BBox::new(l, t, l + rng.random_range(-2.0..40.0), t + rng.random_range(-2.0..40.0))
}

#[test]
fn gates_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let scales = [1.0, 10.0, 1e3];
    let mut logits = Vec::new();
    for i in 0..10_000 {
        let nc = rng.random_range(1..=8);
        let scale = scales[i % 3];
        logits.clear();
        logits.extend((0..nc).map(|_| rng.random_range(-scale..scale)));
        let w = objectness_weight(&logits);
        assert!((0.0..=1.0).contains(&w), "{logits:?} → {w}");
    }
    let s: Vec<BBox> = (0..10_000).map(|_| random_box(&mut rng)).collect();
    let t: Vec<BBox> = (0..10_000).map(|_| random_box(&mut rng)).collect();
    let gate = iou_gate(&s, &t).unwrap();
    assert!(gate.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(gate.degenerate > 0);
}

#[test]
fn identical_boxes_close_the_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let grid = GridSpec::desk();
    for _ in 0..20 {
        let out = random_output(&grid, 3, 8, &mut rng);
        let boxes: Vec<BBox> = decode_boxes(&out).iter().map(|d| d.bbox).collect();
        let gate = iou_gate(&boxes, &boxes).unwrap();
        // clipped boxes may collapse at the border; those stay open
        for (v, b) in gate.values.iter().zip(&boxes) {
            if b.is_valid() {
                assert_eq!(*v, 0.0);
            }
        }
        let (_, terms) = yolo_lwf_total(&out, &out, &DistillConfig::default()).unwrap();
        assert!(terms.cls.abs() < 1e-12);
    }
}

#[test]
fn zero_logits_give_half_weight() {
    for nc in 1..6 {
        assert_eq!(objectness_weight(&vec![0.0; nc]), 0.5);
    }
    let out = DetectorOutput::zeros(GridSpec::desk(), 4, 16);
    assert!(objectness_weights(&out).iter().all(|&w| w == 0.5));
}

#[test]
fn disjoint_boxes_open_the_gate() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = BBox::new(20.0, 20.0, 30.0, 30.0);
    assert_eq!(iou_gate(&[a], &[b]).unwrap().values, vec![1.0]);
    assert!(iou_gate(&[a, b], &[a]).is_err());
}

proptest! {
    #[test]
    fn weight_is_the_largest_sigmoid(logits in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let w = objectness_weight(&logits);
        let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((w - 1.0 / (1.0 + (-best).exp())).abs() < 1e-12);
    }

    #[test]
    fn gate_is_symmetric(
        a in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0),
        b in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0),
    ) {
        let a = BBox::from_xywh(a.0, a.1, a.2, a.3);
        let b = BBox::from_xywh(b.0, b.1, b.2, b.3);
        let ab = iou_gate(&[a], &[b]).unwrap().values[0];
        let ba = iou_gate(&[b], &[a]).unwrap().values[0];
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}

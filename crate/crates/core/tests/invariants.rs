use proptest::prelude::*;
use weathergan_core::data::crop_boxes;
use weathergan_core::detection::{ciou_loss, iou, nms, BBox, BoxSet};
use weathergan_core::losses::{ciou_loss_rows, cycle_loss, LossReport, LossWeights};
use weathergan_core::{Graph, Tensor};

fn bbox() -> impl Strategy<Value = BBox> {
    (0usize..3, 0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.6, 0.01f64..0.6, 0.0f64..1.0)
        .prop_map(|(c, cx, cy, w, h, conf)| BBox::gt(c, cx, cy, w, h).with_confidence(conf))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&b, &a)).abs() <= 1e-15);
        prop_assert!((iou(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ciou_loss_bounds(a in bbox(), b in bbox()) {
        let l = ciou_loss(&a, &b);
        prop_assert!((0.0..2.5).contains(&l), "{}", l);
        prop_assert!(ciou_loss(&a, &a).abs() <= 1e-12);
    }

    #[test]
    fn differentiable_ciou_matches_scalar(pairs in prop::collection::vec((bbox(), bbox()), 1..6)) {
        let g = Graph::new();
        let m = pairs.len();
        let p: Vec<f64> = pairs.iter().flat_map(|(a, _)| [a.cx, a.cy, a.w, a.h]).collect();
        let t: Vec<f64> = pairs.iter().flat_map(|(_, b)| [b.cx, b.cy, b.w, b.h]).collect();
        let l = ciou_loss_rows(g.constant(Tensor::from_vec(&[m, 4], p)), &Tensor::from_vec(&[m, 4], t));
        for (i, (a, b)) in pairs.iter().enumerate() {
            // the graph version carries 1e-9 stabilizers in its denominators
            let tol = 1e-8 / a.area().min(b.area());
            prop_assert!((l.value().data()[i] - ciou_loss(a, b)).abs() <= tol);
        }
    }

    #[test]
    fn nms_keeps_a_sorted_non_overlapping_subset(boxes in prop::collection::vec(bbox(), 0..20), thr in 0.1f64..0.9) {
        let kept = nms(boxes.clone(), thr);
        prop_assert!(kept.len() <= boxes.len());
        prop_assert!(kept.iter().all(|k| boxes.contains(k)));
        prop_assert!(kept.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(a, b) <= thr);
            }
        }
        prop_assert_eq!(nms(kept.clone(), thr), kept);
    }

    #[test]
    fn cropped_boxes_stay_inside_window(
        boxes in prop::collection::vec(bbox(), 0..10),
        (w, h) in (64u32..400, 64u32..400),
        fx in 0.0f64..1.0, fy in 0.0f64..1.0,
    ) {
        let size = 64.0;
        let (x0, y0) = ((w as f64 - size) * fx, (h as f64 - size) * fy);
        let out = crop_boxes(&BoxSet::new(boxes.clone()), w as f64, h as f64, x0.floor(), y0.floor(), size);
        prop_assert!(out.len() <= boxes.len());
        for b in out.iter() {
            let (x1, y1, x2, y2) = b.corners();
            prop_assert!(x1 >= -1e-12 && y1 >= -1e-12 && x2 <= 1.0 + 1e-12 && y2 <= 1.0 + 1e-12);
            prop_assert!(b.w > 0.0 && b.h > 0.0);
        }
    }

    #[test]
    fn loss_report_identities(adv in 0.0f64..3.0, cyc in 0.0f64..3.0, ciou in 0.0f64..2.5, cls in 0.0f64..5.0, conf in 0.0f64..5.0) {
        let w = LossWeights::default();
        let r = LossReport::from_components(adv, cyc, (ciou, cls, conf), &w).unwrap();
        prop_assert!(r.identity_error(&w) <= 1e-12);
        prop_assert!((r.det - (0.4 * ciou + 0.3 * cls + 0.3 * conf)).abs() <= 1e-12);
    }

    #[test]
    fn cycle_loss_is_nonnegative_and_zero_on_reconstruction(vals in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4 * 4)) {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 3, 4, 4], vals.clone()));
        let y = g.constant(Tensor::from_vec(&[2, 3, 4, 4], vals.iter().map(|v| v * 0.5).collect()));
        prop_assert_eq!(cycle_loss(x, x, y, y).unwrap().value().data()[0], 0.0);
        prop_assert!(cycle_loss(x, y, y, x).unwrap().value().data()[0] >= 0.0);
    }
}

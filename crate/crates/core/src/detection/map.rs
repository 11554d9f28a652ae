use super::boxes::{iou, BoxSet};
use crate::error::{Error, Result};
use crate::report::Table;
use std::collections::{BTreeMap, BTreeSet};

/// Detection quality at one IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionStats {
    pub fn_: usize,
    pub fp: usize,
    pub tp: usize,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
}

/// VOC-style mean average precision.
///
/// Per class, predictions are ranked by confidence (ties keep input order)
/// and each is greedily matched to the unmatched ground-truth box of that
/// class in the same image with the highest IoU, if that IoU reaches
/// `iou_threshold`. AP is the area under the all-point precision envelope;
/// mAP averages AP over classes that occur in the ground truth.
pub fn evaluate_map(predictions: &[BoxSet], ground_truths: &[BoxSet], iou_threshold: f64) -> Result<DetectionStats> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction sets for {} ground-truth sets",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let n_gt: usize = ground_truths.iter().map(BoxSet::len).sum();
    if n_gt == 0 {
        return Err(Error::InvalidInput("mAP is undefined without ground-truth boxes".into()));
    }
    let gt_classes: BTreeSet<usize> = ground_truths.iter().flat_map(|s| s.iter().map(|b| b.class_id)).collect();
    let pred_classes: BTreeSet<usize> = predictions.iter().flat_map(|s| s.iter().map(|b| b.class_id)).collect();

    let mut tp_total = 0;
    let mut per_class_ap = BTreeMap::new();
    for &class in gt_classes.union(&pred_classes) {
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (img, set) in predictions.iter().enumerate() {
            for (j, b) in set.iter().enumerate() {
                if b.class_id == class {
                    ranked.push((b.confidence, img, j));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = ground_truths.iter().map(|s| vec![false; s.len()]).collect();
        let class_gt = ground_truths.iter().flat_map(|s| s.iter()).filter(|b| b.class_id == class).count();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(_, img, j) in &ranked {
            let p = &predictions[img].boxes[j];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in ground_truths[img].iter().enumerate() {
                if gt.class_id != class || used[img][g] {
                    continue;
                }
                let v = iou(p, gt);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[img][g] = true;
            }
            hits.push(best.is_some());
        }
        let tp_class = hits.iter().filter(|&&h| h).count();
        tp_total += tp_class;
        if class_gt > 0 {
            per_class_ap.insert(class, average_precision(&hits, class_gt));
        }
    }
    let n_pred: usize = predictions.iter().map(BoxSet::len).sum();
    let map = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(DetectionStats { fn_: n_gt - tp_total, fp: n_pred - tp_total, tp: tp_total, per_class_ap, map })
}

/// All-point interpolated AP from confidence-ranked hit flags.
fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    ap
}

/// One row per labeled setting: mAP, per-class AP and FN/FP/TP counts.
pub fn stats_table(title: &str, rows: &[(String, DetectionStats)]) -> Table {
    let classes: BTreeSet<usize> = rows.iter().flat_map(|(_, s)| s.per_class_ap.keys().copied()).collect();
    let mut headers = vec!["setting".to_string(), "mAP".to_string()];
    headers.extend(classes.iter().map(|c| format!("AP class {}", c)));
    headers.extend(["FN", "FP", "TP"].map(String::from));
    let mut t = Table { title: title.to_string(), headers, rows: Vec::new() };
    for (name, s) in rows {
        let mut r = vec![name.clone(), format!("{:.3}", s.map)];
        r.extend(classes.iter().map(|c| s.per_class_ap.get(c).map_or("-".to_string(), |v| format!("{:.3}", v))));
        r.extend([s.fn_, s.fp, s.tp].map(|v| v.to_string()));
        t.rows.push(r);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;

    fn gt() -> Vec<BoxSet> {
        vec![
            BoxSet::new(vec![BBox::gt(0, 0.3, 0.3, 0.2, 0.2), BBox::gt(1, 0.7, 0.7, 0.2, 0.3)]),
            BoxSet::new(vec![BBox::gt(0, 0.5, 0.5, 0.4, 0.4)]),
        ]
    }

    #[test]
    fn perfect_predictions() {
        let s = evaluate_map(&gt(), &gt(), 0.5).unwrap();
        assert_eq!(s.map, 1.0);
        assert_eq!((s.fn_, s.fp, s.tp), (0, 0, 3));
    }

    #[test]
    fn no_predictions() {
        let s = evaluate_map(&[BoxSet::default(), BoxSet::default()], &gt(), 0.5).unwrap();
        assert_eq!(s.map, 0.0);
        assert_eq!((s.tp, s.fn_), (0, 3));
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert!(evaluate_map(&[BoxSet::default()], &[BoxSet::default()], 0.5).is_err());
    }

    #[test]
    fn false_positive_ranked_first_halves_precision() {
        let g = vec![BoxSet::new(vec![BBox::gt(0, 0.5, 0.5, 0.2, 0.2)])];
        let p = vec![BoxSet::new(vec![
            BBox::gt(0, 0.1, 0.1, 0.1, 0.1).with_confidence(0.9),
            BBox::gt(0, 0.5, 0.5, 0.2, 0.2).with_confidence(0.8),
        ])];
        let s = evaluate_map(&p, &g, 0.5).unwrap();
        assert!((s.map - 0.5).abs() < 1e-12);
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 0));
    }

    #[test]
    fn table_layout() {
        let s = evaluate_map(&gt(), &gt(), 0.5).unwrap();
        let t = stats_table("t", &[("real".into(), s)]);
        assert_eq!(t.headers, ["setting", "mAP", "AP class 0", "AP class 1", "FN", "FP", "TP"]);
        assert_eq!(t.rows[0][1], "1.000");
    }
}

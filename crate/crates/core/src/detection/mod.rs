//! Boxes, the frozen-detector contract, a small trainable grid detector,
//! VOC-style mAP evaluation and detector retraining.

mod boxes;
mod detector;
mod map;
mod retrain;

pub use boxes::{ciou, ciou_loss, iou, nms, BBox, BoxSet};
pub use detector::{decode_dense, DenseMaps, DetectorConfig, FrozenDetector, ToyDetector};
pub use map::{evaluate_map, stats_table, DetectionStats};
pub use retrain::{retrain_detector, DetectorTrainConfig};

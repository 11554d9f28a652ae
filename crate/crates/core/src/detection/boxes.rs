use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// One labeled box in normalized center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl BBox {
    /// A ground-truth box (confidence 1).
    pub fn gt(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class_id, cx, cy, w, h, confidence: 1.0 }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn from_corners(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::gt(class_id, (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h, self.confidence].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidInput(format!("degenerate box {:?}", self)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        Ok(())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Complete IoU: IoU minus normalized center distance and aspect penalties.
///
/// The aspect trade-off weight is `v / ((1 - IoU) + v)`, taken as 0 when
/// the aspect ratios agree.
pub fn ciou(pred: &BBox, gt: &BBox) -> f64 {
    let i = iou(pred, gt);
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let c2 = cw * cw + ch * ch;
    let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let v = 4.0 / (std::f64::consts::PI * std::f64::consts::PI)
        * ((gt.w / gt.h).atan() - (pred.w / pred.h).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / ((1.0 - i) + v) };
    let dist = if c2 > 0.0 { rho2 / c2 } else { 0.0 };
    i - dist - alpha * v
}

/// `1 - CIoU`, in `[0, 2.5)`: the distance term stays below 1 and the aspect
/// term below 1/2.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - ciou(pred, gt)
}

/// Labeled boxes of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxSet {
    pub boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>) -> Self {
        Self { boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BBox> {
        self.boxes.iter()
    }

    pub fn validate(&self) -> Result<()> {
        self.boxes.iter().try_for_each(BBox::validate)
    }

    /// Parses YOLO label text: `class cx cy w h [confidence]` per line.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut boxes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 && fields.len() != 6 {
                return Err(format!("line {}: expected 5 or 6 fields, got {}", n + 1, fields.len()));
            }
            let class_id = fields[0].parse::<usize>().map_err(|e| format!("line {}: class id: {}", n + 1, e))?;
            let mut vals = [0.0f64; 5];
            vals[4] = 1.0;
            for (slot, f) in vals.iter_mut().zip(&fields[1..]) {
                *slot = f.parse::<f64>().map_err(|e| format!("line {}: {}", n + 1, e))?;
            }
            let b = BBox { class_id, cx: vals[0], cy: vals[1], w: vals[2], h: vals[3], confidence: vals[4] };
            b.validate().map_err(|e| format!("line {}: {}", n + 1, e))?;
            boxes.push(b);
        }
        Ok(Self { boxes })
    }

    /// YOLO label text; the confidence column is written only when asked.
    pub fn to_text(&self, with_confidence: bool) -> String {
        let mut s = String::new();
        for b in &self.boxes {
            let _ = write!(s, "{} {:.6} {:.6} {:.6} {:.6}", b.class_id, b.cx, b.cy, b.w, b.h);
            if with_confidence {
                let _ = write!(s, " {:.6}", b.confidence);
            }
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn write(&self, path: &Path, with_confidence: bool) -> Result<()> {
        std::fs::write(path, self.to_text(with_confidence)).map_err(|e| Error::io(path, e))
    }
}

/// Class-wise greedy non-maximum suppression; returns survivors by descending confidence.
pub fn nms(mut boxes: Vec<BBox>, iou_threshold: f64) -> Vec<BBox> {
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<BBox> = Vec::new();
    for b in boxes {
        if keep.iter().all(|k| k.class_id != b.class_id || iou(k, &b) <= iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

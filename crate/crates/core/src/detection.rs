//! Anchor-free detection on the decoder pyramid: a light convolutional head,
//! per-location target assignment, the three training losses, box decoding
//! with class-wise NMS, and mAP at IoU 0.5.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Init, Linear};
use crate::params::ParamId;
use crate::tape::{Tape, Var};
use crate::tensor::{cst, Scalar, Tensor};

/// Axis-aligned box in full-resolution pixel coordinates (edges, not centers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn key(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

impl Annotation {
    pub fn validate(&self, num_classes: usize, width: usize, height: usize) -> Result<()> {
        let b = &self.bbox;
        if self.class_id >= num_classes {
            return Err(Error::Format(format!("class {} outside 0..{num_classes}", self.class_id)));
        }
        let finite = b.key().iter().all(|v| v.is_finite());
        if !finite || b.x_min >= b.x_max || b.y_min >= b.y_max {
            return Err(Error::Format(format!("degenerate box {b:?}")));
        }
        if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > width as f64 || b.y_max > height as f64 {
            return Err(Error::Format(format!("box {b:?} outside {width}x{height} image")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

impl fmt::Display for Detection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.bbox;
        write!(
            f,
            "{} {:.6} {:.3} {:.3} {:.3} {:.3}",
            self.class_id, self.score, b.x_min, b.y_min, b.x_max, b.y_max
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Channel width of the shared towers.
    pub width: usize,
    /// `(lo, hi]` range of the largest regression distance, per pyramid
    /// level in pyramid order (coarsest first).
    pub scale_ranges: Vec<(f64, f64)>,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub prior_prob: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            width: 32,
            scale_ranges: vec![(12.0, f64::INFINITY), (6.0, 12.0), (0.0, 6.0)],
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            prior_prob: 0.01,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        if self.scale_ranges.len() != levels {
            return Err(Error::Config(format!(
                "{} scale ranges for {levels} pyramid levels",
                self.scale_ranges.len()
            )));
        }
        if self.scale_ranges.iter().any(|&(lo, hi)| !(lo >= 0.0 && hi > lo)) {
            return Err(Error::Config("scale ranges must satisfy 0 <= lo < hi".into()));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("score and NMS thresholds must lie in [0, 1]".into()));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Config("prior probability must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Spatial layout of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub range: (f64, f64),
}

impl LevelGeometry {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// Input-pixel position of grid cell `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }
}

/// Head parameters: per-level input projections, towers and output convs
/// shared across levels, and one learnable regression scale per level.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub num_classes: usize,
    pub proj: Vec<Linear>,
    pub cls_tower: [Conv; 2],
    pub reg_tower: [Conv; 2],
    pub cls_out: Conv,
    pub reg_out: Conv,
    pub ctr_out: Conv,
    pub scales: Vec<ParamId>,
}

impl DetectionHead {
    pub fn init<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        config: &HeadConfig,
        level_channels: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        config.validate(level_channels.len())?;
        if num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let w = config.width;
        init.scope(name, |init| {
            let mut proj = Vec::new();
            for (l, &c) in level_channels.iter().enumerate() {
                proj.push(init.linear(&format!("proj{l}"), c, w)?);
            }
            let cls_tower = [init.conv("cls0", 3, w, w)?, init.conv("cls1", 3, w, w)?];
            let reg_tower = [init.conv("reg0", 3, w, w)?, init.conv("reg1", 3, w, w)?];
            let cls_out = init.conv("cls_out", 3, w, num_classes)?;
            let prior = -((1.0 - config.prior_prob) / config.prior_prob).ln();
            init.fill(cls_out.b, prior);
            let reg_out = init.conv("reg_out", 3, w, 4)?;
            let ctr_out = init.conv("ctr_out", 3, w, 1)?;
            let mut scales = Vec::new();
            for l in 0..level_channels.len() {
                scales.push(init.constant(&format!("scale{l}"), &[1], 1.0)?);
            }
            Ok(DetectionHead {
                num_classes,
                proj,
                cls_tower,
                reg_tower,
                cls_out,
                reg_out,
                ctr_out,
                scales,
            })
        })
    }
}

/// Head outputs for one pyramid level, `[N, h, w, .]`.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutputs {
    pub cls: Var,
    /// Distances `(l, t, r, b)` in input pixels, always positive.
    pub reg: Var,
    pub ctr: Var,
}

#[derive(Clone, Debug)]
pub struct DetOutputs {
    pub levels: Vec<LevelOutputs>,
    pub geometry: Vec<LevelGeometry>,
    pub batch: usize,
}

/// Run the head over pyramid features `(feature [N, h, w, C_l], stride)`.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    head: &DetectionHead,
    config: &HeadConfig,
    pyramid: &[(Var, usize)],
) -> Result<DetOutputs> {
    if pyramid.len() != head.proj.len() {
        return Err(Error::shape(
            "detection_head",
            format!("{} pyramid levels for a {}-level head", pyramid.len(), head.proj.len()),
        ));
    }
    let mut levels = Vec::new();
    let mut geometry = Vec::new();
    let mut batch = 0;
    for (l, &(feat, stride)) in pyramid.iter().enumerate() {
        let s = tape.shape(feat).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("detection_head", format!("expected [N, h, w, C], got {s:?}")));
        }
        batch = s[0];
        let x = head.proj[l].forward(tape, feat)?;
        let mut c = x;
        for conv in &head.cls_tower {
            let y = conv.forward(tape, c, 1, 1)?;
            c = tape.gelu(y);
        }
        let mut r = x;
        for conv in &head.reg_tower {
            let y = conv.forward(tape, r, 1, 1)?;
            r = tape.gelu(y);
        }
        let cls = head.cls_out.forward(tape, c, 1, 1)?;
        let raw = head.reg_out.forward(tape, r, 1, 1)?;
        let scaled = tape.mul(raw, head.scales[l].into())?;
        let dist = tape.exp(scaled);
        let reg = tape.scale(dist, stride as f64);
        let ctr = head.ctr_out.forward(tape, r, 1, 1)?;
        levels.push(LevelOutputs { cls, reg, ctr });
        geometry.push(LevelGeometry {
            height: s[1],
            width: s[2],
            stride,
            range: config.scale_ranges[l],
        });
    }
    Ok(DetOutputs { levels, geometry, batch })
}

/// Per-location training targets, flattened in (level, image, row, col)
/// order to match [`flatten_outputs`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub num_classes: usize,
    pub locations: usize,
    /// One-hot class labels `[locations, num_classes]`; background rows are 0.
    pub cls: Vec<f64>,
    /// Flat indices of positive locations, ascending.
    pub positives: Vec<usize>,
    /// Regression distances `(l, t, r, b)` per positive.
    pub reg: Vec<[f64; 4]>,
    pub ctr: Vec<f64>,
    /// Index of the assigned annotation (within its image) per positive.
    pub matched: Vec<usize>,
}

pub fn centerness(d: &[f64; 4]) -> f64 {
    let (l, t, r, b) = (d[0], d[1], d[2], d[3]);
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Assign each location to at most one annotation: it must lie strictly
/// inside the box and the box's largest distance must fall in the level's
/// range; overlapping candidates resolve to the smallest box.
pub fn assign_targets(annotations: &[Vec<Annotation>], geometry: &[LevelGeometry], num_classes: usize) -> Targets {
    let batch = annotations.len();
    let locations: usize = geometry.iter().map(|g| g.locations() * batch).sum();
    let mut t = Targets {
        num_classes,
        locations,
        cls: vec![0.0; locations * num_classes],
        ..Targets::default()
    };
    let mut flat = 0;
    for g in geometry {
        for anns in annotations {
            for i in 0..g.height {
                for j in 0..g.width {
                    let (cx, cy) = g.center(i, j);
                    let mut best: Option<(f64, usize, [f64; 4])> = None;
                    for (k, a) in anns.iter().enumerate() {
                        let b = &a.bbox;
                        let d = [cx - b.x_min, cy - b.y_min, b.x_max - cx, b.y_max - cy];
                        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        if lo <= 0.0 || hi <= g.range.0 || hi > g.range.1 {
                            continue;
                        }
                        if best.is_none_or(|(area, _, _)| b.area() < area) {
                            best = Some((b.area(), k, d));
                        }
                    }
                    if let Some((_, k, d)) = best {
                        t.cls[flat * num_classes + anns[k].class_id] = 1.0;
                        t.positives.push(flat);
                        t.reg.push(d);
                        t.ctr.push(centerness(&d));
                        t.matched.push(k);
                    }
                    flat += 1;
                }
            }
        }
    }
    t
}

/// Level outputs reshaped to rows and concatenated:
/// `(cls [L, K], reg [L, 4], ctr [L, 1])` with `L` all locations.
pub fn flatten_outputs<T: Scalar>(tape: &mut Tape<T>, out: &DetOutputs) -> Result<(Var, Var, Var)> {
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    let mut ctr = Vec::new();
    for (lv, g) in out.levels.iter().zip(&out.geometry) {
        let rows = out.batch * g.locations();
        let k = *tape.shape(lv.cls).last().unwrap_or(&0);
        cls.push(tape.reshape(lv.cls, &[rows, k])?);
        reg.push(tape.reshape(lv.reg, &[rows, 4])?);
        ctr.push(tape.reshape(lv.ctr, &[rows, 1])?);
    }
    Ok((tape.concat(&cls, 0)?, tape.concat(&reg, 0)?, tape.concat(&ctr, 0)?))
}

#[derive(Clone, Copy, Debug)]
pub struct DetLosses {
    pub reg: Var,
    pub cls: Var,
    pub ctr: Var,
}

/// Focal classification loss over every location normalized by the positive
/// count, and IoU / centerness losses averaged over positives (zero when
/// there are none).
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &DetOutputs,
    targets: &Targets,
    config: &HeadConfig,
) -> Result<DetLosses> {
    let (cls, reg, ctr) = flatten_outputs(tape, out)?;
    let rows = tape.shape(cls)[0];
    if rows != targets.locations || tape.shape(cls)[1] != targets.num_classes {
        return Err(Error::mismatch(
            "detection_loss",
            tape.shape(cls),
            &[targets.locations, targets.num_classes],
        ));
    }
    let npos = targets.positives.len();
    let norm = npos.max(1) as f64;
    let cls_t = Tensor::new(&[rows, targets.num_classes], targets.cls.iter().map(|&v| cst(v)).collect())?;
    let l_cls = tape.sigmoid_focal_loss(cls, &cls_t, config.focal_alpha, config.focal_gamma, norm)?;
    if npos == 0 {
        let zero = tape.constant(Tensor::scalar(T::zero()));
        return Ok(DetLosses { reg: zero, cls: l_cls, ctr: zero });
    }
    let pred = tape.gather_rows(reg, &targets.positives)?;
    let reg_t = Tensor::new(&[npos, 4], targets.reg.iter().flatten().map(|&v| cst(v)).collect())?;
    let l_reg = tape.iou_loss(pred, &reg_t, norm)?;
    let ctr_logits = tape.gather_rows(ctr, &targets.positives)?;
    let ctr_t = Tensor::new(&[npos, 1], targets.ctr.iter().map(|&v| cst(v)).collect())?;
    let l_ctr = tape.bce_with_logits(ctr_logits, &ctr_t, norm)?;
    Ok(DetLosses { reg: l_reg, cls: l_cls, ctr: l_ctr })
}

/// Plain-value head outputs of one level for one image.
#[derive(Clone, Debug)]
pub struct LevelPrediction {
    pub geometry: LevelGeometry,
    /// `[h * w * K]` class logits.
    pub cls: Vec<f64>,
    /// `[h * w * 4]` distances.
    pub reg: Vec<f64>,
    /// `[h * w]` centerness logits.
    pub ctr: Vec<f64>,
}

/// Split recorded head outputs into per-image, per-level plain predictions.
pub fn predictions<T: Scalar>(tape: &Tape<T>, out: &DetOutputs) -> Vec<Vec<LevelPrediction>> {
    let f = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>();
    (0..out.batch)
        .map(|n| {
            out.levels
                .iter()
                .zip(&out.geometry)
                .map(|(lv, g)| {
                    let hw = g.locations();
                    let k = *tape.shape(lv.cls).last().unwrap_or(&0);
                    LevelPrediction {
                        geometry: *g,
                        cls: f(&tape.value(lv.cls).data()[n * hw * k..(n + 1) * hw * k]),
                        reg: f(&tape.value(lv.reg).data()[n * hw * 4..(n + 1) * hw * 4]),
                        ctr: f(&tape.value(lv.ctr).data()[n * hw..(n + 1) * hw]),
                    }
                })
                .collect()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic ranking: score descending, then box coordinates, then class.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            a.bbox
                .key()
                .iter()
                .zip(b.bbox.key().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.class_id.cmp(&b.class_id))
}

/// Class-wise greedy suppression: a box is dropped if it overlaps a kept box
/// of the same class with IoU of at least `iou`.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) < iou) {
            kept.push(d);
        }
    }
    kept
}

/// Turn one image's predictions into scored boxes clipped to the image.
pub fn decode(levels: &[LevelPrediction], image: (usize, usize), config: &HeadConfig) -> Vec<Detection> {
    let (img_h, img_w) = (image.0 as f64, image.1 as f64);
    let mut dets = Vec::new();
    for lp in levels {
        let g = &lp.geometry;
        let k = lp.cls.len() / g.locations().max(1);
        for i in 0..g.height {
            for j in 0..g.width {
                let loc = i * g.width + j;
                let c = sigmoid(lp.ctr[loc]);
                let d = &lp.reg[loc * 4..loc * 4 + 4];
                let (cx, cy) = g.center(i, j);
                let bbox = BBox::new(
                    (cx - d[0]).clamp(0.0, img_w),
                    (cy - d[1]).clamp(0.0, img_h),
                    (cx + d[2]).clamp(0.0, img_w),
                    (cy + d[3]).clamp(0.0, img_h),
                );
                if bbox.area() <= 0.0 || !bbox.key().iter().all(|v| v.is_finite()) {
                    continue;
                }
                for class_id in 0..k {
                    let score = sigmoid(lp.cls[loc * k + class_id]) * c;
                    if score > config.score_thresh {
                        dets.push(Detection { class_id, score, bbox });
                    }
                }
            }
        }
    }
    let mut kept = nms(dets, config.nms_iou);
    kept.truncate(config.max_detections);
    kept
}

/// All-point interpolated average precision from ranked hit flags.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class AP at IoU >= 0.5 and their unweighted mean over the classes
/// that have at least one annotation (0 when no class does).
#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn map_at_50(detections: &[Vec<Detection>], annotations: &[Vec<Annotation>], num_classes: usize) -> Result<MapReport> {
    if detections.len() != annotations.len() {
        return Err(Error::Contract(format!(
            "{} detection lists for {} annotated images",
            detections.len(),
            annotations.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let num_gt: usize = annotations.iter().map(|a| a.iter().filter(|x| x.class_id == class_id).count()).sum();
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, d)| d.iter().filter(|x| x.class_id == class_id).map(move |x| (img, x)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut used: Vec<Vec<bool>> = annotations.iter().map(|a| vec![false; a.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let best = annotations[img]
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.class_id == class_id)
                    .map(|(k, a)| (k, a.bbox.iou(&d.bbox)))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                match best {
                    Some((k, iou)) if iou >= 0.5 && !used[img][k] => {
                        used[img][k] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class.push(Some(average_precision(&hits, num_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MapReport { map, per_class })
}

#[cfg(test)]
#[path = "detection_tests.rs"]
mod tests;

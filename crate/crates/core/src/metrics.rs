//! Segmentation metrics: mean IoU, tagging accuracy (TA), localization
//! accuracy (LA, box IoU of connected regions), and boundary accuracy (BA,
//! boundary F1 within a Chebyshev tolerance).
//!
//! Pixels whose ground truth equals the ignore label are removed from every
//! metric, whatever the prediction says there.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{shape_err, Error, Result};
use crate::tensor::LabelMap;

/// A class is an image tag when it covers at least this fraction of the
/// image's evaluated pixels.
pub const TAG_THRESHOLD: f64 = 0.001;
/// Matched box IoU a class needs before its boundary is scored.
pub const LOCALIZED_IOU: f64 = 0.5;
pub const DEFAULT_TAU: usize = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `None` when the class appears in neither map.
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }
}

fn check_pair(pred: &LabelMap, gt: &LabelMap, l: usize, ignore: Option<usize>) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(shape_err(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    gt.check_range(l, ignore)?;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if Some(g) != ignore && p >= l {
            return Err(Error::LabelOutOfRange {
                label: p,
                labels: l,
            });
        }
    }
    Ok(())
}

fn valid(g: usize, ignore: Option<usize>) -> bool {
    Some(g) != ignore
}

pub fn class_counts(
    pred: &LabelMap,
    gt: &LabelMap,
    l: usize,
    ignore: Option<usize>,
) -> Result<Vec<ClassCounts>> {
    check_pair(pred, gt, l, ignore)?;
    let mut counts = vec![ClassCounts::default(); l];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if !valid(g, ignore) {
            continue;
        }
        if p == g {
            counts[p].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[g].fn_ += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub counts: Vec<ClassCounts>,
}

impl IouReport {
    pub fn from_counts(counts: Vec<ClassCounts>) -> Self {
        let per_class: Vec<_> = counts.iter().map(ClassCounts::iou).collect();
        let mean = mean_defined(&per_class);
        IouReport {
            per_class,
            mean,
            counts,
        }
    }
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let (s, n) = v
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-class `TP / (TP + FP + FN)`; classes absent from both maps are
/// left out of the mean.
pub fn miou(pred: &LabelMap, gt: &LabelMap, l: usize, ignore: Option<usize>) -> Result<IouReport> {
    Ok(IouReport::from_counts(class_counts(pred, gt, l, ignore)?))
}

/// Classes covering at least [`TAG_THRESHOLD`] of the evaluated pixels.
pub fn image_tags(map: &LabelMap, mask_gt: &LabelMap, l: usize, ignore: Option<usize>) -> Vec<bool> {
    let mut hist = vec![0usize; l];
    let mut total = 0usize;
    for (&p, &g) in map.labels().iter().zip(mask_gt.labels()) {
        if valid(g, ignore) {
            hist[p] += 1;
            total += 1;
        }
    }
    hist.iter()
        .map(|&c| c > 0 && c as f64 >= TAG_THRESHOLD * total as f64)
        .collect()
}

/// Fraction of classes whose predicted tag (present / absent) agrees with
/// the ground-truth tag for this image.
pub fn tagging_accuracy(pred: &LabelMap, gt: &LabelMap, l: usize, ignore: Option<usize>) -> Result<f64> {
    check_pair(pred, gt, l, ignore)?;
    let pt = image_tags(pred, gt, l, ignore);
    let gtt = image_tags(gt, gt, l, ignore);
    let agree = pt.iter().zip(&gtt).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / l as f64)
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> u64 {
        ((self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)) as u64
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let y0 = self.y0.max(other.y0);
        let x0 = self.x0.max(other.x0);
        let y1 = self.y1.min(other.y1);
        let x1 = self.x1.min(other.x1);
        if y0 > y1 || x0 > x1 {
            return 0.0;
        }
        let inter = ((y1 - y0 + 1) * (x1 - x0 + 1)) as u64;
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

/// Bounding boxes of the 4-connected components of `mask`, in raster order
/// of each component's first pixel.
pub fn component_boxes(mask: &[bool], h: usize, w: usize) -> Vec<BoundingBox> {
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut b = BoundingBox {
            y0: start / w,
            x0: start % w,
            y1: start / w,
            x1: start % w,
        };
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y);
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        boxes.push(b);
    }
    boxes
}

/// Greedy one-to-one matching by descending IoU. Returns the IoU of every
/// matched pair; pairs with zero overlap are never matched.
pub fn match_boxes(pred: &[BoundingBox], gt: &[BoundingBox]) -> Vec<f64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = p.iou(g);
            if iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut matched = Vec::new();
    for (iou, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matched.push(iou);
        }
    }
    matched
}

fn class_mask(map: &LabelMap, gt: &LabelMap, c: usize, ignore: Option<usize>) -> Vec<bool> {
    map.labels()
        .iter()
        .zip(gt.labels())
        .map(|(&p, &g)| valid(g, ignore) && p == c)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    /// Box IoU per class; `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Classes with at least one matched box at IoU >= [`LOCALIZED_IOU`].
    pub localized: Vec<bool>,
    pub mean: f64,
}

/// Per class: sum of matched box IoUs over the number of boxes involved
/// (`matched + unmatched pred + unmatched gt`), so unmatched boxes count 0.
pub fn localization_accuracy(
    pred: &LabelMap,
    gt: &LabelMap,
    l: usize,
    ignore: Option<usize>,
) -> Result<LocalizationReport> {
    check_pair(pred, gt, l, ignore)?;
    let (h, w) = (gt.height(), gt.width());
    let mut per_class = vec![None; l];
    let mut localized = vec![false; l];
    for c in 0..l {
        let gb = component_boxes(&class_mask(gt, gt, c, ignore), h, w);
        if gb.is_empty() {
            continue;
        }
        let pb = component_boxes(&class_mask(pred, gt, c, ignore), h, w);
        let matched = match_boxes(&pb, &gb);
        let involved = pb.len() + gb.len() - matched.len();
        per_class[c] = Some(matched.iter().sum::<f64>() / involved as f64);
        localized[c] = matched.iter().any(|&m| m >= LOCALIZED_IOU);
    }
    let mean = mean_defined(&per_class);
    Ok(LocalizationReport {
        per_class,
        localized,
        mean,
    })
}

/// Mask pixels with at least one in-image 4-neighbor outside the mask.
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            out[i] = (y > 0 && !mask[i - w])
                || (y + 1 < h && !mask[i + w])
                || (x > 0 && !mask[i - 1])
                || (x + 1 < w && !mask[i + 1]);
        }
    }
    out
}

fn within(target: &[bool], h: usize, w: usize, y: usize, x: usize, tau: usize) -> bool {
    let (ylo, yhi) = (y.saturating_sub(tau), (y + tau).min(h - 1));
    let (xlo, xhi) = (x.saturating_sub(tau), (x + tau).min(w - 1));
    (ylo..=yhi).any(|yy| (xlo..=xhi).any(|xx| target[yy * w + xx]))
}

/// Boundary F1 of two masks at Chebyshev tolerance `tau`. Two empty
/// boundaries score 1, exactly one empty boundary scores 0.
pub fn boundary_f1(pred: &[bool], gt: &[bool], h: usize, w: usize, tau: usize) -> f64 {
    let pb = boundary_pixels(pred, h, w);
    let gb = boundary_pixels(gt, h, w);
    let np = pb.iter().filter(|&&b| b).count();
    let ng = gb.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let hit = |from: &[bool], to: &[bool]| {
        (0..h * w)
            .filter(|&i| from[i] && within(to, h, w, i / w, i % w, tau))
            .count()
    };
    let precision = hit(&pb, &gb) as f64 / np as f64;
    let recall = hit(&gb, &pb) as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryReport {
    /// Boundary F1 per localized class; `None` elsewhere.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Boundary F1 for classes that [`localization_accuracy`] deems localized.
pub fn boundary_accuracy(
    pred: &LabelMap,
    gt: &LabelMap,
    l: usize,
    ignore: Option<usize>,
    tau: usize,
) -> Result<BoundaryReport> {
    let loc = localization_accuracy(pred, gt, l, ignore)?;
    let (h, w) = (gt.height(), gt.width());
    let per_class: Vec<Option<f64>> = (0..l)
        .map(|c| {
            loc.localized[c].then(|| {
                boundary_f1(
                    &class_mask(pred, gt, c, ignore),
                    &class_mask(gt, gt, c, ignore),
                    h,
                    w,
                    tau,
                )
            })
        })
        .collect();
    let mean = mean_defined(&per_class);
    Ok(BoundaryReport { per_class, mean })
}

/// Dataset-level report. mIoU pools pixel counts over all images; TA
/// averages over images; per-class bIoU and BA average over the images
/// where they are defined, and their means average over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou: IouReport,
    pub ta: f64,
    pub biou: Vec<Option<f64>>,
    pub la: f64,
    pub ba_per_class: Vec<Option<f64>>,
    pub ba: f64,
    pub images: usize,
}

pub fn evaluate(
    pairs: &[(LabelMap, LabelMap)],
    l: usize,
    ignore: Option<usize>,
    tau: usize,
) -> Result<EvalReport> {
    let mut counts = vec![ClassCounts::default(); l];
    let mut ta = 0.0;
    let mut biou_acc = vec![(0.0, 0usize); l];
    let mut ba_acc = vec![(0.0, 0usize); l];
    for (pred, gt) in pairs {
        for (acc, c) in counts.iter_mut().zip(class_counts(pred, gt, l, ignore)?) {
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
        }
        ta += tagging_accuracy(pred, gt, l, ignore)?;
        let loc = localization_accuracy(pred, gt, l, ignore)?;
        for (acc, v) in biou_acc.iter_mut().zip(&loc.per_class) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
        let ba = boundary_accuracy(pred, gt, l, ignore, tau)?;
        for (acc, v) in ba_acc.iter_mut().zip(&ba.per_class) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }
    let avg = |acc: &[(f64, usize)]| -> Vec<Option<f64>> {
        acc.iter()
            .map(|&(s, n)| (n > 0).then(|| s / n as f64))
            .collect()
    };
    let biou = avg(&biou_acc);
    let ba_per_class = avg(&ba_acc);
    Ok(EvalReport {
        iou: IouReport::from_counts(counts),
        ta: if pairs.is_empty() {
            0.0
        } else {
            ta / pairs.len() as f64
        },
        la: mean_defined(&biou),
        biou,
        ba: mean_defined(&ba_per_class),
        ba_per_class,
        images: pairs.len(),
    })
}

impl EvalReport {
    /// `class,iou,ba,biou` rows (empty cell when undefined), then a summary line.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<report>", e);
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(out, "class,iou,ba,biou").map_err(io)?;
        for c in 0..self.iou.per_class.len() {
            writeln!(
                out,
                "{c},{},{},{}",
                cell(self.iou.per_class[c]),
                cell(self.ba_per_class[c]),
                cell(self.biou[c])
            )
            .map_err(io)?;
        }
        writeln!(
            out,
            "summary,miou={:.6},ta={:.6},la={:.6},ba={:.6},images={}",
            self.iou.mean, self.ta, self.la, self.ba, self.images
        )
        .map_err(io)
    }
}

//! Pseudo-label selection: turns raw detector output on the training images
//! into accepted pseudo labels.
//!
//! A detection is accepted when its score exceeds the threshold `P` and its
//! IoU with every label already on the image stays below `lgt_iou_ceiling`
//! (0.05). Detections are visited in descending score order, and a detection
//! overlapping an already accepted one of the same category at
//! `dedup_iou` or more is dropped as a duplicate.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, CategoryCounts, CategoryId, DatasetSnapshot, Origin};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub category: CategoryId,
    score: f64,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: BBox, category: CategoryId, score: f64) -> Result<Self> {
        if !(score > 0.0 && score < 1.0) {
            return Err(Error::InvalidInput(format!("detection score {score} outside (0, 1)")));
        }
        Ok(Self {
            image_id: image_id.into(),
            bbox,
            category,
            score,
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Descending score, then `(image_id, x, y, category)` ascending.
pub fn priority_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.bbox.x().total_cmp(&b.bbox.x()))
        .then_with(|| a.bbox.y().total_cmp(&b.bbox.y()))
        .then_with(|| a.category.cmp(&b.category))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionCriterion {
    /// Score threshold `P`; acceptance needs `score > P`.
    pub p_threshold: f64,
    /// Acceptance needs IoU strictly below this against every existing label.
    pub lgt_iou_ceiling: f64,
    /// Accepted detections suppress later ones at or above this IoU.
    pub dedup_iou: f64,
    /// Restrict duplicate suppression to detections of the same category.
    /// The exclusion against existing labels is spatial either way.
    pub category_specific: bool,
}

impl Default for SelectionCriterion {
    fn default() -> Self {
        Self {
            p_threshold: 0.3,
            lgt_iou_ceiling: 0.05,
            dedup_iou: 0.5,
            category_specific: true,
        }
    }
}

impl SelectionCriterion {
    pub fn with_threshold(self, p: f64) -> Self {
        Self {
            p_threshold: p,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_threshold) {
            return Err(Error::Config(format!("P = {} outside [0, 1)", self.p_threshold)));
        }
        if !(self.lgt_iou_ceiling > 0.0 && self.lgt_iou_ceiling < 1.0) {
            return Err(Error::Config(format!(
                "lgt_iou_ceiling = {} outside (0, 1)",
                self.lgt_iou_ceiling
            )));
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return Err(Error::Config(format!("dedup_iou = {} outside (0, 1]", self.dedup_iou)));
        }
        Ok(())
    }

    fn is_duplicate(&self, d: &Detection, accepted: &Annotation) -> bool {
        (!self.category_specific || d.category == accepted.category)
            && iou(&d.bbox, &accepted.bbox) >= self.dedup_iou
    }
}

/// Threshold and exclusion clauses for a single detection. `existing` holds
/// every label already on the detection's image.
pub fn accept_one(d: &Detection, existing: &[Annotation], crit: &SelectionCriterion) -> bool {
    d.score > crit.p_threshold
        && existing
            .iter()
            .all(|a| iou(&d.bbox, &a.bbox) < crit.lgt_iou_ceiling)
}

/// An accepted pseudo label together with its image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub image_id: String,
    pub annotation: Annotation,
}

fn select_image(
    image_id: &str,
    mut dets: Vec<&Detection>,
    existing: &[Annotation],
    crit: &SelectionCriterion,
    round: u32,
) -> Result<Vec<PseudoLabel>> {
    dets.sort_by(|a, b| priority_order(a, b));
    let mut accepted: Vec<Annotation> = Vec::new();
    for d in dets {
        if d.score <= crit.p_threshold {
            break;
        }
        if !accept_one(d, existing, crit) || accepted.iter().any(|a| crit.is_duplicate(d, a)) {
            continue;
        }
        accepted.push(Annotation::pseudo(d.bbox, d.category, d.score, round)?);
    }
    Ok(accepted
        .into_iter()
        .map(|annotation| PseudoLabel {
            image_id: image_id.to_string(),
            annotation,
        })
        .collect())
}

/// Groups detections by image position in `snapshot`, failing on unknown ids.
pub(crate) fn group_by_image<'a>(
    detections: &'a [Detection],
    snapshot: &DatasetSnapshot,
) -> Result<Vec<Vec<&'a Detection>>> {
    let index = snapshot.image_index();
    let mut groups: Vec<Vec<&Detection>> = vec![Vec::new(); snapshot.images().len()];
    let mut unknown: Vec<&str> = Vec::new();
    for d in detections {
        match index.get(d.image_id.as_str()) {
            Some(&i) => groups[i].push(d),
            None => unknown.push(&d.image_id),
        }
    }
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(Error::InvalidInput(format!(
            "detections reference unknown images: {}",
            unknown.join(", ")
        )));
    }
    Ok(groups)
}

/// Selects the pseudo labels `X` from detections `T` on the images of
/// `snapshot`. Output is ordered by image id, then by acceptance order.
pub fn select_ugt(
    detections: &[Detection],
    snapshot: &DatasetSnapshot,
    crit: &SelectionCriterion,
    round: u32,
) -> Result<Vec<PseudoLabel>> {
    crit.validate()?;
    if round == 0 {
        return Err(Error::InvalidInput("selection round must be >= 1".into()));
    }
    let groups = group_by_image(detections, snapshot)?;
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| snapshot.images()[a].image_id.cmp(&snapshot.images()[b].image_id));
    let per_image = par::map(&order, |&i| {
        let img = &snapshot.images()[i];
        select_image(&img.image_id, groups[i].clone(), &img.annotations, crit, round)
    });
    let mut out = Vec::new();
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

pub fn count_labels(x: &[PseudoLabel]) -> CategoryCounts {
    let mut counts = CategoryCounts::default();
    for p in x {
        counts.add(p.annotation.category, 1);
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub counts: CategoryCounts,
}

/// Pseudo-label counts per threshold and category.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Threshold printed without float noise: `0.30000000000000004` -> `0.3`.
pub fn format_threshold(p: f64) -> String {
    let r = (p * 1e9).round() / 1e9;
    format!("{r}")
}

impl SweepTable {
    /// CSV with header `P,cat1,cat2,cat3,cat4`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["P", "cat1", "cat2", "cat3", "cat4"]).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![format_threshold(row.p)];
            rec.extend(row.counts.0.iter().map(|n| n.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Runs the criterion at every threshold of `p_values` over one shared
/// detection list.
pub fn sweep_thresholds(
    detections: &[Detection],
    snapshot: &DatasetSnapshot,
    template: &SelectionCriterion,
    p_values: &[f64],
) -> Result<SweepTable> {
    if p_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("sweep thresholds must be sorted ascending".into()));
    }
    let mut rows = Vec::with_capacity(p_values.len());
    for &p in p_values {
        let x = select_ugt(detections, snapshot, &template.with_threshold(p), 1)?;
        rows.push(SweepRow {
            p,
            counts: count_labels(&x),
        });
    }
    Ok(SweepTable { rows })
}

/// The `0.0, 0.1, ..., 0.9` grid.
pub fn decile_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    c: i64,
    score: f64,
}

/// Parses a detections JSON-lines document. Blank lines are skipped.
pub fn parse_detections(text: &str, context: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{context}:{}", n + 1);
        let rec: DetectionRecord = serde_json::from_str(line).map_err(|e| Error::format(ctx(), e))?;
        let bbox = BBox::new(rec.x, rec.y, rec.w, rec.h).map_err(|e| Error::format(ctx(), e))?;
        let category = CategoryId::new(rec.c).map_err(|e| Error::format(ctx(), e))?;
        let det = Detection::new(rec.image_id, bbox, category, rec.score)
            .map_err(|e| Error::format(ctx(), e))?;
        out.push(det);
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}

pub fn detections_to_jsonl(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let rec = DetectionRecord {
            image_id: d.image_id.clone(),
            x: d.bbox.x(),
            y: d.bbox.y(),
            w: d.bbox.w(),
            h: d.bbox.h(),
            c: d.category.get() as i64,
            score: d.score,
        };
        out.push_str(&serde_json::to_string(&rec).expect("detection serializes"));
        out.push('\n');
    }
    out
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(detections_to_jsonl(detections).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct PseudoLabelRecord {
    image_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    c: i64,
    confidence: f64,
    round: u32,
}

pub fn pseudo_labels_to_json(x: &[PseudoLabel]) -> String {
    let recs: Vec<PseudoLabelRecord> = x
        .iter()
        .map(|p| {
            let a = &p.annotation;
            PseudoLabelRecord {
                image_id: p.image_id.clone(),
                x: a.bbox.x(),
                y: a.bbox.y(),
                w: a.bbox.w(),
                h: a.bbox.h(),
                c: a.category.get() as i64,
                confidence: a.confidence(),
                round: match a.origin() {
                    Origin::Pseudo { round } => round,
                    Origin::Manual => 0,
                },
            }
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&recs).expect("labels serialize");
    s.push('\n');
    s
}

//! Per-category sensitivity under the center-focus criterion.
//!
//! Detections below the score floor are dropped and each image keeps at most
//! `max_dets_per_image` of the rest. Matching is greedy in descending score
//! order: a detection claims the unmatched same-category ground truth it
//! CF-matches with the highest IoU.

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, CategoryCounts, CategoryId, DatasetSnapshot, Origin};
use crate::error::{Error, Result};
use crate::geometry::{cf_match, iou, BBox, CfParams};
use crate::par;
use crate::selection::{group_by_image, priority_order, Detection, PseudoLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    /// Detections need a score strictly above this value.
    pub score_floor: f64,
    pub max_dets_per_image: usize,
    pub cf: CfParams,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            score_floor: 0.1,
            max_dets_per_image: 100,
            cf: CfParams::default(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!("score_floor {} outside [0, 1)", self.score_floor)));
        }
        if self.max_dets_per_image == 0 {
            return Err(Error::Config("max_dets_per_image must be >= 1".into()));
        }
        self.cf.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMatch {
    pub tp: CategoryCounts,
    pub fn_: CategoryCounts,
    /// `(detection index, ground-truth index)` into the inputs.
    pub matches: Vec<(usize, usize)>,
}

pub fn match_image(detections: &[Detection], gts: &[Annotation], protocol: &EvalProtocol) -> ImageMatch {
    match_boxes(detections.iter().enumerate(), gts, protocol)
}

fn match_boxes<'a>(
    detections: impl Iterator<Item = (usize, &'a Detection)>,
    gts: &[Annotation],
    protocol: &EvalProtocol,
) -> ImageMatch {
    let mut kept: Vec<(usize, &Detection)> =
        detections.filter(|(_, d)| d.score() > protocol.score_floor).collect();
    kept.sort_by(|a, b| priority_order(a.1, b.1).then(a.0.cmp(&b.0)));
    kept.truncate(protocol.max_dets_per_image);

    let mut taken = vec![false; gts.len()];
    let mut out = ImageMatch::default();
    for (di, d) in kept {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.category != d.category || !cf_match(&d.bbox, &g.bbox, &protocol.cf) {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out.matches.push((di, gi));
        }
    }
    for (gi, g) in gts.iter().enumerate() {
        if taken[gi] {
            out.tp.add(g.category, 1);
        } else {
            out.fn_.add(g.category, 1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategorySensitivity {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `tp / (tp + fn)`; absent when the category has no ground truth.
    pub sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub per_category: [CategorySensitivity; 4],
    pub protocol: EvalProtocol,
}

impl SensitivityTable {
    fn from_counts(tp: CategoryCounts, fn_: CategoryCounts, protocol: EvalProtocol) -> Self {
        let per_category = CategoryId::ALL.map(|c| {
            let (t, f) = (tp.get(c), fn_.get(c));
            CategorySensitivity {
                tp: t,
                fn_: f,
                sensitivity: (t + f > 0).then(|| t as f64 / (t + f) as f64),
            }
        });
        Self { per_category, protocol }
    }

    pub fn get(&self, c: CategoryId) -> &CategorySensitivity {
        &self.per_category[c.index()]
    }

    pub fn sensitivities(&self) -> [Option<f64>; 4] {
        self.per_category.map(|c| c.sensitivity)
    }
}

/// Sensitivity of `detections` against the annotations carried by
/// `snapshot`. Hidden truth is ignored.
pub fn sensitivity(
    detections: &[Detection],
    snapshot: &DatasetSnapshot,
    protocol: &EvalProtocol,
) -> Result<SensitivityTable> {
    protocol.validate()?;
    let groups = group_by_image(detections, snapshot)?;
    let per_image = par::map_range(groups.len(), |i| {
        let gts = &snapshot.images()[i].annotations;
        match_boxes(groups[i].iter().copied().enumerate(), gts, protocol)
    });
    let (mut tp, mut fn_) = (CategoryCounts::default(), CategoryCounts::default());
    for m in per_image {
        for c in CategoryId::ALL {
            tp.add(c, m.tp.get(c));
            fn_.add(c, m.fn_.get(c));
        }
    }
    Ok(SensitivityTable::from_counts(tp, fn_, *protocol))
}

/// Hidden lesions on an image that no manual label CF-matches.
fn unlabeled_lesions<'a>(hidden: &'a [Annotation], labels: &[Annotation], cf: &CfParams) -> Vec<&'a Annotation> {
    hidden
        .iter()
        .filter(|h| {
            !labels
                .iter()
                .any(|a| a.origin() == Origin::Manual && a.category == h.category && cf_match(&a.bbox, &h.bbox, cf))
        })
        .collect()
}

/// Fraction of `boxes` that CF-match an unlabeled hidden lesion of the same
/// category. `None` when `boxes` is empty.
fn unlabeled_hit_rate<'a>(
    boxes: impl Iterator<Item = (&'a str, BBox, CategoryId)>,
    snapshot: &DatasetSnapshot,
) -> Result<Option<f64>> {
    let cf = CfParams::default();
    let index = snapshot.image_index();
    let mut unlabeled: Vec<Option<Vec<&Annotation>>> = vec![None; snapshot.images().len()];
    let (mut total, mut hits) = (0usize, 0usize);
    for (image_id, bbox, category) in boxes {
        let &i = index
            .get(image_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown image {image_id}")))?;
        let img = &snapshot.images()[i];
        let hidden = img.hidden_truth.as_deref().ok_or_else(|| {
            Error::OracleUnavailable(format!(
                "image {image_id} has no hidden truth; the precision oracle needs simulation data"
            ))
        })?;
        let lesions = unlabeled[i].get_or_insert_with(|| unlabeled_lesions(hidden, &img.annotations, &cf));
        total += 1;
        hits += lesions
            .iter()
            .any(|h| h.category == category && cf_match(&bbox, &h.bbox, &cf)) as usize;
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Fraction of accepted pseudo labels that recover a lesion the manual labels
/// missed. Requires hidden truth.
pub fn ugt_precision_oracle(x: &[PseudoLabel], snapshot: &DatasetSnapshot) -> Result<Option<f64>> {
    if !snapshot.has_hidden_truth() {
        return Err(Error::OracleUnavailable(
            "snapshot carries no hidden truth; the precision oracle needs simulation data".into(),
        ));
    }
    unlabeled_hit_rate(
        x.iter()
            .map(|p| (p.image_id.as_str(), p.annotation.bbox, p.annotation.category)),
        snapshot,
    )
}

/// Same measure as [`ugt_precision_oracle`] applied to raw detections.
pub fn detection_precision_oracle(detections: &[Detection], snapshot: &DatasetSnapshot) -> Result<Option<f64>> {
    if !snapshot.has_hidden_truth() {
        return Err(Error::OracleUnavailable(
            "snapshot carries no hidden truth; the precision oracle needs simulation data".into(),
        ));
    }
    unlabeled_hit_rate(
        detections.iter().map(|d| (d.image_id.as_str(), d.bbox, d.category)),
        snapshot,
    )
}

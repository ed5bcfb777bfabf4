//! Multi-round pseudo-labeling loop.
//!
//! Each round trains on the current dataset `D*`, runs inference on the
//! training images, selects new pseudo labels at that round's threshold and
//! merges them into `D*`. The loop stops once a round accepts at most
//! `m_stop` labels, or at `max_rounds`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::{
    count_by_category, save_dataset, Annotation, CategoryCounts, DatasetSnapshot, OriginFilter,
};
use crate::detector::DetectorHandle;
use crate::error::{Error, Result};
use crate::evaluation::{detection_precision_oracle, sensitivity, ugt_precision_oracle, EvalProtocol, SensitivityTable};
use crate::geometry::iou;
use crate::par;
use crate::selection::{count_labels, pseudo_labels_to_json, select_ugt, write_detections, PseudoLabel, SelectionCriterion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub p_initial: f64,
    pub p_step: f64,
    /// Stop once a round accepts at most this many labels.
    pub m_stop: usize,
    pub max_rounds: u32,
    /// Template; its threshold is replaced by each round's value.
    pub criterion: SelectionCriterion,
    /// Evaluate each round's detector on the validation split.
    pub evaluate: bool,
    pub protocol: EvalProtocol,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            p_initial: 0.3,
            p_step: 0.1,
            m_stop: 100,
            max_rounds: 7,
            criterion: SelectionCriterion::default(),
            evaluate: true,
            protocol: EvalProtocol::default(),
        }
    }
}

impl RoundConfig {
    /// Threshold for round `k` (1-based), rounded to 1e-9 so that
    /// `0.3 + 0.1 * 3` reads as 0.6.
    pub fn threshold(&self, k: u32) -> f64 {
        let p = self.p_initial + self.p_step * (k.saturating_sub(1)) as f64;
        (p * 1e9).round() / 1e9
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be >= 1".into()));
        }
        if !self.p_initial.is_finite() || !self.p_step.is_finite() || self.p_step < 0.0 {
            return Err(Error::Config("p_initial and p_step must be finite, p_step >= 0".into()));
        }
        let last = self.threshold(self.max_rounds);
        if !(self.p_initial >= 0.0 && last < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must stay in [0, 1); round {} would use {last}",
                self.max_rounds
            )));
        }
        self.criterion.validate()?;
        self.protocol.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// A round accepted at most `m_stop` labels.
    Converged,
    RoundCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round_index: u32,
    pub p_used: f64,
    pub l_x: usize,
    pub x_counts: CategoryCounts,
    /// Label counts of `D*` after merging this round's labels.
    pub dstar_counts: CategoryCounts,
    pub dstar_pseudo_counts: CategoryCounts,
    pub detector_tag: String,
    pub detections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_summary: Option<SensitivityTable>,
    /// Share of this round's labels that recover a missing lesion; only
    /// known in simulation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_precision: Option<f64>,
    /// Same measure over all of this round's detections.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_precision: Option<f64>,
    #[serde(skip)]
    pub x_selected: Vec<PseudoLabel>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rounds: Vec<RoundState>,
    pub stop_reason: StopReason,
    pub final_dataset: DatasetSnapshot,
    pub detector: DetectorHandle,
}

/// Adds `x` to `snapshot`. Every label must be disjoint (IoU below
/// `ceiling`) from all annotations already on its image, else the merge is
/// refused.
pub fn merge_pseudo(snapshot: &DatasetSnapshot, x: &[PseudoLabel], ceiling: f64) -> Result<DatasetSnapshot> {
    let index = snapshot.image_index();
    let mut images = snapshot.images().to_vec();
    let mut added: Vec<Vec<Annotation>> = vec![Vec::new(); images.len()];
    for p in x {
        let &i = index.get(p.image_id.as_str()).ok_or_else(|| {
            Error::Invariant(format!("pseudo label for unknown image {}", p.image_id))
        })?;
        if p.annotation.is_manual() {
            return Err(Error::Invariant(format!(
                "manual annotation passed as pseudo label on {}",
                p.image_id
            )));
        }
        if let Some(a) = images[i].annotations.iter().find(|a| iou(&a.bbox, &p.annotation.bbox) >= ceiling) {
            return Err(Error::Invariant(format!(
                "pseudo label on {} overlaps an existing label (IoU {:.3} >= {ceiling})",
                p.image_id,
                iou(&a.bbox, &p.annotation.bbox)
            )));
        }
        added[i].push(p.annotation);
    }
    for (img, extra) in images.iter_mut().zip(added) {
        img.annotations.extend(extra);
    }
    DatasetSnapshot::new(snapshot.round_index() + 1, snapshot.split(), images)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_round(dir: &Path, trained_on: &DatasetSnapshot, dets: &[crate::selection::Detection], state: &RoundState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_dataset(trained_on, &dir.join("dataset.json"), false)?;
    write_detections(&dir.join("detections.jsonl"), dets)?;
    write_file(&dir.join("x_selected.json"), &pseudo_labels_to_json(&state.x_selected))?;
    let json = serde_json::to_string_pretty(state).expect("round state serializes");
    write_file(&dir.join("state.json"), &(json + "\n"))
}

pub fn round_dir(out: &Path, k: u32) -> PathBuf {
    out.join("rounds").join(k.to_string())
}

/// Runs the loop from `train`. When `out` is given, each round's dataset,
/// detections, selected labels and state land in `out/rounds/<k>/` before
/// the next round starts.
pub fn run_rounds(
    train: &DatasetSnapshot,
    val: Option<&DatasetSnapshot>,
    detector: &DetectorHandle,
    cfg: &RoundConfig,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.evaluate && val.is_none() {
        return Err(Error::Config("evaluation requested without a validation split".into()));
    }
    let mut dstar = train.clone();
    let mut handle = detector.clone();
    let mut rounds = Vec::new();
    for k in 1..=cfg.max_rounds {
        let p = cfg.threshold(k);
        let crit = cfg.criterion.with_threshold(p);
        handle = handle.train(&dstar)?;
        let dets = handle.infer(&dstar)?;
        let x = select_ugt(&dets, &dstar, &crit, k)?;
        let eval_summary = match (cfg.evaluate, val) {
            (true, Some(v)) => Some(sensitivity(&handle.infer(v)?, v, &cfg.protocol)?),
            _ => None,
        };
        let (x_precision, t_precision) = if dstar.has_hidden_truth() {
            (ugt_precision_oracle(&x, &dstar)?, detection_precision_oracle(&dets, &dstar)?)
        } else {
            (None, None)
        };
        let next = merge_pseudo(&dstar, &x, crit.lgt_iou_ceiling)?;
        let state = RoundState {
            round_index: k,
            p_used: p,
            l_x: x.len(),
            x_counts: count_labels(&x),
            dstar_counts: count_by_category(&next, None),
            dstar_pseudo_counts: count_by_category(&next, Some(OriginFilter::Pseudo)),
            detector_tag: handle.artifact_tag().unwrap_or_default().to_string(),
            detections: dets.len(),
            eval_summary,
            x_precision,
            t_precision,
            x_selected: x,
        };
        log::info!("round {k}: P={p} L(X)={} D*={}", state.l_x, state.dstar_counts.total());
        if let Some(out) = out {
            write_round(&round_dir(out, k), &dstar, &dets, &state)?;
        }
        dstar = next;
        let converged = state.l_x <= cfg.m_stop;
        rounds.push(state);
        if converged {
            return Ok(RunOutcome {
                rounds,
                stop_reason: StopReason::Converged,
                final_dataset: dstar,
                detector: handle,
            });
        }
    }
    Ok(RunOutcome {
        rounds,
        stop_reason: StopReason::RoundCap,
        final_dataset: dstar,
        detector: handle,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStudyRow {
    pub p: f64,
    pub x_counts: CategoryCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_precision: Option<f64>,
    pub sensitivity: SensitivityTable,
}

/// Trains once on `train`, then for each threshold merges that threshold's
/// labels, retrains and measures validation sensitivity.
pub fn threshold_study(
    train: &DatasetSnapshot,
    val: &DatasetSnapshot,
    detector: &DetectorHandle,
    template: &SelectionCriterion,
    p_values: &[f64],
    protocol: &EvalProtocol,
) -> Result<Vec<ThresholdStudyRow>> {
    template.validate()?;
    protocol.validate()?;
    let first = detector.train(train)?;
    let dets = first.infer(train)?;
    let rows = par::map(p_values, |&p| -> Result<ThresholdStudyRow> {
        let crit = template.with_threshold(p);
        let x = select_ugt(&dets, train, &crit, 1)?;
        let merged = merge_pseudo(train, &x, crit.lgt_iou_ceiling)?;
        let second = first.train(&merged)?;
        Ok(ThresholdStudyRow {
            p,
            x_counts: count_labels(&x),
            x_precision: if train.has_hidden_truth() {
                ugt_precision_oracle(&x, train)?
            } else {
                None
            },
            sensitivity: sensitivity(&second.infer(val)?, val, protocol)?,
        })
    });
    rows.into_iter().collect()
}
